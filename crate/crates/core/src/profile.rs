use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::weibull_survival;

/// Lateral half-grid `x_g = g / (G − 1)`, trench center at `x = 0`.
pub fn lateral_grid(grid_size: usize) -> Vec<f64> {
    let denom = (grid_size.max(2) - 1) as f64;
    (0..grid_size).map(|g| g as f64 / denom).collect()
}

/// Trench depth (μm) sampled on the lateral half-grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Profile {
    pub depths_um: Vec<f64>,
}

impl Profile {
    pub fn zeros(grid_size: usize) -> Self {
        Self {
            depths_um: vec![0.0; grid_size],
        }
    }

    pub fn grid_size(&self) -> usize {
        self.depths_um.len()
    }

    /// Depth at the trench center.
    pub fn center(&self) -> f64 {
        self.depths_um[0]
    }
}

/// Shape, lateral scale and amplitude of one step's etch increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullStepParams {
    pub k: f64,
    pub lambda: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
}

/// `Δ(x_g) = A · exp(−(x_g / λ)^k)` on every grid point.
pub fn weibull_increment(params: &WeibullStepParams, grid: &[f64]) -> Result<Vec<f64>> {
    let WeibullStepParams { k, lambda, amplitude } = *params;
    if !(k > 0.0 && lambda > 0.0) {
        return Err(Error::invalid(format!(
            "Weibull shape and scale must be positive, got k={k}, lambda={lambda}"
        )));
    }
    if !(amplitude >= 0.0) {
        return Err(Error::invalid(format!("Weibull amplitude must be non-negative, got {amplitude}")));
    }
    Ok(grid
        .iter()
        .map(|&x| amplitude * weibull_survival(x, k, lambda))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn grid_spans_unit_interval() {
        let g = lateral_grid(64);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[63], 1.0);
    }

    #[test]
    fn exponential_special_case() {
        let p = WeibullStepParams { k: 1.0, lambda: 0.5, amplitude: 1.0 };
        let d = weibull_increment(&p, &[0.0, 0.5]).unwrap();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 0.36787944117144233).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_is_flat_zero() {
        let p = WeibullStepParams { k: 2.0, lambda: 0.3, amplitude: 0.0 };
        assert!(weibull_increment(&p, &lateral_grid(16)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_knob_shape_values() {
        let p = WeibullStepParams { k: 4.5, lambda: 1.0, amplitude: 2.0 };
        let d = weibull_increment(&p, &[0.0, 1.0]).unwrap();
        assert_eq!(d[0], 2.0);
        assert!((d[1] - 0.7357588823428847).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_shape_or_scale() {
        for (k, lambda) in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0), (1.0, -0.5)] {
            let p = WeibullStepParams { k, lambda, amplitude: 1.0 };
            assert!(weibull_increment(&p, &[0.0]).is_err());
        }
    }

    proptest! {
        #[test]
        fn k_one_equals_exponential_decay(lambda in 0.01f64..5.0, a in 0.0f64..10.0) {
            let grid = lateral_grid(33);
            let p = WeibullStepParams { k: 1.0, lambda, amplitude: a };
            let d = weibull_increment(&p, &grid).unwrap();
            for (x, v) in grid.iter().zip(d) {
                prop_assert!((v - a * (-x / lambda).exp()).abs() < 1e-12);
            }
        }

        #[test]
        fn increment_is_non_increasing_laterally(
            k in 0.05f64..20.0, lambda in 0.01f64..5.0, a in 0.0f64..10.0,
        ) {
            let p = WeibullStepParams { k, lambda, amplitude: a };
            let d = weibull_increment(&p, &lateral_grid(64)).unwrap();
            prop_assert_eq!(d[0], a);
            for w in d.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
