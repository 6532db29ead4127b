use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest coordinate-wise relative disagreement between the reverse-mode
/// gradient of `f` at `point` and central finite differences with step `eps`.
///
/// Relative error per coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.variable(point.clone());
        let y = f(&mut g, x)?;
        check_finite(g.value(y))?;
        g.backward(y)?;
        g.grad(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.numel()])
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        let v = g.scalar_value(y);
        check_finite(&[v])?;
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.values_mut()[i] += eps;
        let mut minus = point.clone();
        minus.values_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(format!("grad_check objective produced {v}"))),
        None => Ok(()),
    }
}
