//! Multi-head scaled dot-product attention kernels.

use crate::error::{NumericsError, Result};
use crate::gemm::{gemm, View, ViewMut};

/// Boolean `[queries × keys]` grid; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask over a sequence of length `n`.
    pub fn causal(n: usize) -> Self {
        let mut m = Self::full(n, n);
        for i in 0..n {
            for j in i + 1..n {
                m.allowed[i * n + j] = false;
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn forbid(&mut self, i: usize, j: usize) {
        self.allowed[i * self.cols + j] = false;
    }

    pub fn allow(&mut self, i: usize, j: usize) {
        self.allowed[i * self.cols + j] = true;
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(NumericsError::Shape {
                op: "attention mask",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rows, cols],
            });
        }
        for i in 0..rows {
            if !self.allowed[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                return Err(NumericsError::Precondition(format!(
                    "attention mask row {i} forbids every key"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) struct AttentionDims {
    pub nq: usize,
    pub nk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn new(nq: usize, nk: usize, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericsError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self { nq, nk, d, heads })
    }

    fn dh(&self) -> usize {
        self.d / self.heads
    }
}

/// Returns `(output [nq×d], probabilities [heads×nq×nk])`.
pub(crate) fn forward(
    dims: &AttentionDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: Option<&AttnMask>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let AttentionDims { nq, nk, d, heads } = *dims;
    if let Some(m) = mask {
        m.validate(nq, nk)?;
    }
    let dh = dims.dh();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * nq * nk];
    let mut out = vec![0.0; nq * d];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        // scores = Q_h · K_hᵀ
        gemm(
            nq,
            dh,
            nk,
            View { data: q, offset: h * dh, rs: d, cs: 1 },
            View { data: k, offset: h * dh, rs: 1, cs: d },
            0.0,
            ViewMut::rm(p, nk),
        );
        for i in 0..nq {
            let row = &mut p[i * nk..(i + 1) * nk];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if mask.is_none_or(|m| m.is_allowed(i, j)) && *s > max {
                    max = *s;
                }
            }
            let mut sum = 0.0;
            for (j, s) in row.iter_mut().enumerate() {
                if mask.is_none_or(|m| m.is_allowed(i, j)) {
                    *s = (*s - max).exp();
                    sum += *s;
                } else {
                    *s = 0.0;
                }
            }
            row.iter_mut().for_each(|s| *s /= sum);
        }
        // out_h = P · V_h
        gemm(
            nq,
            nk,
            dh,
            View::rm(p, nk),
            View { data: v, offset: h * dh, rs: d, cs: 1 },
            0.0,
            ViewMut { data: &mut out, offset: h * dh, rs: d, cs: 1 },
        );
    }
    Ok((out, probs))
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
}

pub(crate) fn backward(
    dims: &AttentionDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
) -> AttentionGrads {
    let AttentionDims { nq, nk, d, heads } = *dims;
    let dh = dims.dh();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut ds = vec![0.0; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dV_h = Pᵀ · dOut_h
        gemm(
            nk,
            nq,
            dh,
            View::tr(p, nk),
            View { data: g, offset: h * dh, rs: d, cs: 1 },
            0.0,
            ViewMut { data: &mut dv, offset: h * dh, rs: d, cs: 1 },
        );
        // dP = dOut_h · V_hᵀ
        gemm(
            nq,
            dh,
            nk,
            View { data: g, offset: h * dh, rs: d, cs: 1 },
            View { data: v, offset: h * dh, rs: 1, cs: d },
            0.0,
            ViewMut::rm(&mut ds, nk),
        );
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut ds[i * nk..(i + 1) * nk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pp) in dr.iter_mut().zip(pr) {
                *x = pp * (*x - dot) * scale;
            }
        }
        // dQ_h = dS · K_h ; dK_h = dSᵀ · Q_h
        gemm(
            nq,
            nk,
            dh,
            View::rm(&ds, nk),
            View { data: k, offset: h * dh, rs: d, cs: 1 },
            0.0,
            ViewMut { data: &mut dq, offset: h * dh, rs: d, cs: 1 },
        );
        gemm(
            nk,
            nq,
            dh,
            View::tr(&ds, nk),
            View { data: q, offset: h * dh, rs: d, cs: 1 },
            0.0,
            ViewMut { data: &mut dk, offset: h * dh, rs: d, cs: 1 },
        );
    }
    AttentionGrads { dq, dk, dv }
}
