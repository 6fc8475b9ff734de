//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates probed per tensor; tensors with fewer entries are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            coords_per_tensor: 64,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    /// Position of the tensor in the slice passed to [`grad_check`].
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub eps: f64,
    pub tol: f64,
    pub pass: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_coords(numel: usize, wanted: usize) -> Vec<usize> {
    if numel <= wanted {
        return (0..numel).collect();
    }
    let mut v: Vec<usize> = (0..wanted).map(|i| i * numel / wanted + (i * 7) % (numel / wanted).max(1)).collect();
    v.dedup();
    v
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every tensor with `requires_grad`.
///
/// `f` must register tensor `i` through `graph.param(i, &params[i])`.
pub fn grad_check<F>(f: F, params: &mut [Tensor], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut a = vec![None; params.len()];
        for (key, grad) in g.param_grads() {
            if key < a.len() {
                a[key] = Some(grad.to_vec());
            }
        }
        a
    };

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        Ok(g.item(loss))
    };

    let mut per_param = Vec::new();
    for p in 0..params.len() {
        if !params[p].requires_grad() {
            continue;
        }
        let coords = probe_coords(params[p].numel(), cfg.coords_per_tensor);
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = params[p].data()[c];
            params[p].data_mut()[c] = orig + cfg.eps;
            let plus = eval(params)?;
            params[p].data_mut()[c] = orig - cfg.eps;
            let minus = eval(params)?;
            params[p].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[p].as_ref().map_or(0.0, |g| g[c]);
            worst = worst.max(relative_error(a, numeric, cfg.floor));
        }
        per_param.push(ParamCheck {
            index: p,
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = per_param.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        pass: max_rel_error < cfg.tol,
        per_param,
        max_rel_error,
        eps: cfg.eps,
        tol: cfg.tol,
    })
}
