use std::f64::consts::PI;

use super::params::{Attention, Head, Layout, Linear, Norm};
use super::{AttentionMaps, Model, ModelConfig, ParamStore, PredictionDistribution};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, Graph, Tensor, Var};
use crate::profile::{lateral_grid, WeibullStepParams};
use crate::recipe::Recipe;

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[G]`
    pub mean: Var,
    /// `[G]`
    pub variance: Var,
    /// `[T, G]` accumulated mean after each step (accumulating variants).
    pub per_step_mean: Option<Var>,
    /// `[T, G]` accumulated variance after each step (accumulating variants).
    pub per_step_variance: Option<Var>,
    /// `[T]` each: shape, scale, amplitude (weibull variant).
    pub step_params: Option<[Var; 3]>,
    pub attention: AttentionMaps,
}

/// Adds every parameter tensor to `g` as a borrowed leaf.
pub(crate) fn bind<'a>(g: &mut Graph<'a>, params: &'a ParamStore, requires_grad: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| g.param(t, requires_grad))
        .collect()
}

fn linear(g: &mut Graph<'_>, p: &[Var], l: Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, p[l.w])?;
    g.add(y, p[l.b])
}

fn norm(g: &mut Graph<'_>, p: &[Var], n: Norm, x: Var, eps: f64) -> Result<Var> {
    g.layer_norm(x, p[n.gamma], p[n.beta], eps)
}

/// Multi-head scaled dot-product attention of `queries` over `keys`. Returns
/// the projected output and the head-averaged weights, row-major
/// `[queries × keys]`.
fn attention(
    g: &mut Graph<'_>,
    p: &[Var],
    a: Attention,
    queries: Var,
    keys: Var,
    n_heads: usize,
) -> Result<(Var, Vec<f64>)> {
    let q = linear(g, p, a.q, queries)?;
    let k = g.matmul(keys, p[a.k])?;
    let v = linear(g, p, a.v, keys)?;
    let d = g.shape(q)[1];
    let dh = d / n_heads;
    let rows = g.shape(q)[0];
    let cols = g.shape(k)[0];
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut avg = vec![0.0; rows * cols];
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = if n_heads == 1 { q } else { g.slice(q, 1, lo, hi)? };
        let kh = if n_heads == 1 { k } else { g.slice(k, 1, lo, hi)? };
        let vh = if n_heads == 1 { v } else { g.slice(v, 1, lo, hi)? };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores);
        for (a, w) in avg.iter_mut().zip(g.value(weights)) {
            *a += w;
        }
        heads.push(g.matmul(weights, vh)?);
    }
    avg.iter_mut().for_each(|a| *a /= n_heads as f64);
    let joined = if n_heads == 1 { heads[0] } else { g.concat(&heads, 1)? };
    Ok((linear(g, p, a.o, joined)?, avg))
}

fn to_rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Sinusoidal encoding of step index `t` over `d` channels.
pub(crate) fn positional_encoding(steps: usize, d: usize) -> Tensor {
    let mut values = vec![0.0; steps * d];
    for t in 0..steps {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = t as f64 * freq;
            values[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![steps, d], values).expect("positional encoding shape")
}

/// Step embeddings `[T, d_model]`: projected min-max-normalized knobs plus
/// recipe-constant category embeddings plus positional encoding.
pub(crate) fn embed_recipe(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[Var],
    recipe: &Recipe,
) -> Result<Var> {
    if recipe.steps.is_empty() {
        return Err(Error::invalid("recipe has no steps"));
    }
    let eq = cfg.equipment_index(recipe.equipment)?;
    let loc = cfg.location_index(recipe.wafer_location)?;
    let t = recipe.len();
    let mut knobs = Vec::with_capacity(t * 5);
    for step in &recipe.steps {
        let n = cfg.knob_ranges.normalize(step);
        if n.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("knobs of recipe `{}`", recipe.id)));
        }
        knobs.extend_from_slice(&n);
    }
    let knobs = g.constant(Tensor::new(vec![t, 5], knobs)?);
    let mut x = linear(g, p, layout.knob_proj, knobs)?;

    let d = cfg.d_model;
    let e = g.embedding(p[layout.equipment], &[eq])?;
    let e = g.reshape(e, &[d])?;
    x = g.add(x, e)?;
    let l = g.embedding(p[layout.location], &[loc])?;
    let l = g.reshape(l, &[d])?;
    x = g.add(x, l)?;
    if cfg.positional_encoding {
        let pe = g.constant(positional_encoding(t, d));
        x = g.add(x, pe)?;
    }
    Ok(x)
}

/// Pre-norm encoder. Returns final states `[T, d_model]` and the
/// head-averaged self-attention of every layer.
pub(crate) fn encode(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[Var],
    mut x: Var,
) -> Result<(Var, Vec<Vec<Vec<f64>>>)> {
    let t = g.shape(x)[0];
    let mut maps = Vec::with_capacity(layout.layers.len());
    for layer in &layout.layers {
        let z = norm(g, p, layer.norm_attn, x, cfg.layer_norm_eps)?;
        let (a, w) = attention(g, p, layer.attn, z, z, cfg.n_heads)?;
        maps.push(to_rows(&w, t));
        x = g.add(x, a)?;
        let z = norm(g, p, layer.norm_ffn, x, cfg.layer_norm_eps)?;
        let h = linear(g, p, layer.ffn_in, z)?;
        let h = g.tanh(h);
        let f = linear(g, p, layer.ffn_out, h)?;
        x = g.add(x, f)?;
    }
    let x = norm(g, p, layout.final_norm, x, cfg.layer_norm_eps)?;
    Ok((x, maps))
}

fn column(g: &mut Graph<'_>, m: Var, c: usize) -> Result<Var> {
    let rows = g.shape(m)[0];
    let col = g.slice(m, 1, c, c + 1)?;
    g.reshape(col, &[rows])
}

fn last_row(g: &mut Graph<'_>, m: Var) -> Result<Var> {
    let (rows, cols) = (g.shape(m)[0], g.shape(m)[1]);
    let row = g.slice(m, 0, rows - 1, rows)?;
    g.reshape(row, &[cols])
}

/// `k = softplus(raw_k) + k_floor`, `λ = softplus(raw_λ) + λ_floor`,
/// `A = softplus(raw_A)`, applied to `[T]` vectors.
pub(crate) fn activation_graph(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    raw_k: Var,
    raw_lambda: Var,
    raw_amp: Var,
) -> [Var; 3] {
    let k = g.softplus(raw_k);
    let k = g.add_scalar(k, cfg.k_floor);
    let l = g.softplus(raw_lambda);
    let l = g.add_scalar(l, cfg.lambda_floor);
    let a = g.softplus(raw_amp);
    [k, l, a]
}

/// Maps raw `[T × 3]` head outputs to per-step Weibull parameters.
pub fn weibull_activation(raw: &Tensor, cfg: &ModelConfig) -> Result<Vec<WeibullStepParams>> {
    if raw.shape().len() != 2 || raw.shape()[1] != 3 {
        return Err(Error::Shape {
            op: "weibull_activation",
            lhs: raw.shape().to_vec(),
            rhs: vec![0, 3],
        });
    }
    let mut g = Graph::new();
    let r = g.constant(raw.clone());
    let cols = [column(&mut g, r, 0)?, column(&mut g, r, 1)?, column(&mut g, r, 2)?];
    let [k, l, a] = activation_graph(&mut g, cfg, cols[0], cols[1], cols[2]);
    Ok(params_from(&g, [k, l, a]))
}

fn params_from(g: &Graph<'_>, [k, l, a]: [Var; 3]) -> Vec<WeibullStepParams> {
    g.value(k)
        .iter()
        .zip(g.value(l))
        .zip(g.value(a))
        .map(|((&k, &lambda), &amplitude)| WeibullStepParams { k, lambda, amplitude })
        .collect()
}

/// Cumulative per-step sums; returns `(per_step [T,G], final [G])`.
fn accumulate(g: &mut Graph<'_>, increments: Var) -> Result<(Var, Var)> {
    let partial = g.cumsum_rows(increments)?;
    let last = last_row(g, partial)?;
    Ok((partial, last))
}

pub(crate) struct WeibullHead {
    pub mean: Var,
    pub variance: Var,
    pub per_step_mean: Var,
    pub per_step_variance: Var,
    pub params: [Var; 3],
}

/// Turns raw `[T, 4]` head outputs (k, λ, A, variance) into accumulated
/// Weibull increments and variances.
pub(crate) fn weibull_head(g: &mut Graph<'_>, cfg: &ModelConfig, raw: Var, grid: &[f64]) -> Result<WeibullHead> {
    let rk = column(g, raw, 0)?;
    let rl = column(g, raw, 1)?;
    let ra = column(g, raw, 2)?;
    let rs = column(g, raw, 3)?;
    let [k, l, a] = activation_graph(g, cfg, rk, rl, ra);
    let s = g.softplus(rs);
    let inc = g.weibull_profile(k, l, a, grid)?;
    let (per_step_mean, mean) = accumulate(g, inc)?;
    let var_inc = g.weibull_profile(k, l, s, grid)?;
    let var_sum = g.cumsum_rows(var_inc)?;
    let per_step_variance = g.add_scalar(var_sum, cfg.variance_floor);
    let variance = last_row(g, per_step_variance)?;
    Ok(WeibullHead { mean, variance, per_step_mean, per_step_variance, params: [k, l, a] })
}

pub(crate) fn forward<'a>(
    g: &mut Graph<'a>,
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[Var],
    recipe: &Recipe,
) -> Result<ForwardOutput> {
    let x = embed_recipe(g, cfg, layout, p, recipe)?;
    let (states, self_maps) = encode(g, cfg, layout, p, x)?;
    let t = recipe.len();
    let grid = lateral_grid(cfg.grid_size);

    match layout.head {
        Head::Weibull { out } => {
            let raw = linear(g, p, out, states)?;
            let h = weibull_head(g, cfg, raw, &grid)?;
            Ok(ForwardOutput {
                mean: h.mean,
                variance: h.variance,
                per_step_mean: Some(h.per_step_mean),
                per_step_variance: Some(h.per_step_variance),
                step_params: Some(h.params),
                attention: AttentionMaps { self_attention: self_maps, cross_attention: None },
            })
        }
        Head::AccumOnly { out } => {
            let raw = linear(g, p, out, states)?;
            let gs = cfg.grid_size;
            let raw_inc = g.slice(raw, 1, 0, gs)?;
            let raw_var = g.slice(raw, 1, gs, 2 * gs)?;
            let inc = g.softplus(raw_inc);
            let var_inc = g.softplus(raw_var);
            let (per_step_mean, mean) = accumulate(g, inc)?;
            let var_sum = g.cumsum_rows(var_inc)?;
            let per_step_variance = g.add_scalar(var_sum, cfg.variance_floor);
            let variance = last_row(g, per_step_variance)?;
            Ok(ForwardOutput {
                mean,
                variance,
                per_step_mean: Some(per_step_mean),
                per_step_variance: Some(per_step_variance),
                step_params: None,
                attention: AttentionMaps { self_attention: self_maps, cross_attention: None },
            })
        }
        Head::Baseline { queries, attn, mlp_in, mlp_out } => {
            let q = p[queries];
            let (ctx, cross) = attention(g, p, attn, q, states, cfg.n_heads)?;
            let h = g.add(q, ctx)?;
            let h = linear(g, p, mlp_in, h)?;
            let h = g.tanh(h);
            let out = linear(g, p, mlp_out, h)?;
            let mean = column(g, out, 0)?;
            let raw_var = column(g, out, 1)?;
            let var = g.softplus(raw_var);
            let variance = g.add_scalar(var, cfg.variance_floor);
            Ok(ForwardOutput {
                mean,
                variance,
                per_step_mean: None,
                per_step_variance: None,
                step_params: None,
                attention: AttentionMaps {
                    self_attention: self_maps,
                    cross_attention: Some(to_rows(&cross, t)),
                },
            })
        }
    }
}

/// Mean over grid points of `½·ln(2πσ²) + (y − μ)² / (2σ²)`.
pub(crate) fn gaussian_nll(g: &mut Graph<'_>, mean: Var, variance: Var, target: &[f64]) -> Result<Var> {
    let y = g.constant(Tensor::vector(target.to_vec()));
    let diff = g.sub(y, mean)?;
    let sq = g.mul(diff, diff)?;
    let inv = g.pow(variance, -1.0)?;
    let quad = g.mul(sq, inv)?;
    let quad = g.scale(quad, 0.5);
    let log_var = g.ln(variance);
    let log_var = g.scale(log_var, 0.5);
    let log_var = g.add_scalar(log_var, 0.5 * (2.0 * PI).ln());
    let total = g.add(log_var, quad)?;
    Ok(g.mean(total))
}

pub(crate) fn predict(model: &Model, recipe: &Recipe) -> Result<PredictionDistribution> {
    recipe.validate()?;
    let mut g = Graph::new();
    let p = bind(&mut g, &model.params, false);
    let out = forward(&mut g, &model.config, model.layout(), &p, recipe)?;
    let gs = model.config.grid_size;
    let rows = |g: &Graph<'_>, v: Option<Var>| v.map(|v| to_rows(g.value(v), gs)).unwrap_or_default();
    Ok(PredictionDistribution {
        mean_um: g.value(out.mean).to_vec(),
        variance_um2: g.value(out.variance).to_vec(),
        per_step_mean_um: rows(&g, out.per_step_mean),
        per_step_variance_um2: rows(&g, out.per_step_variance),
        step_params: out.step_params.map(|v| params_from(&g, v)).unwrap_or_default(),
        attention: out.attention,
    })
}

/// Gradient check of the full-model NLL against `target` with respect to
/// every parameter, via central differences on the flattened parameter vector.
pub fn loss_grad_check(model: &Model, recipe: &Recipe, target: &[f64], eps: f64) -> Result<f64> {
    let layout = model.layout();
    let shapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let point = Tensor::vector(model.params.flatten());
    grad_check(
        |g, flat| {
            let mut p = Vec::with_capacity(shapes.len());
            let mut offset = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let v = g.slice(flat, 0, offset, offset + n)?;
                p.push(g.reshape(v, s)?);
                offset += n;
            }
            let out = forward(g, &model.config, layout, &p, recipe)?;
            gaussian_nll(g, out.mean, out.variance, target)
        },
        &point,
        eps,
    )
}
