//! Differentiable operations. Every tensor is viewed as `rows × cols` over
//! its last axis; no broadcasting beyond a leading row dimension.

use crate::attention::{self, AttentionDims, AttnMask};
use crate::error::{NumericsError, Result};
use crate::gemm::{gemm, View, ViewMut};
use crate::graph::{CustomBackward, Graph, Op, Var};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Numerically stable softmax of one row.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows(), n.cols())
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` (weights stored as `[out × in]`).
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.rows_cols(a);
        let bs = self.shape(b).to_vec();
        if bs.len() != 2 {
            return Err(shape_err("matmul", self.shape(a), &bs));
        }
        let (bk, n) = if trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if bk != k {
            return Err(shape_err("matmul", self.shape(a), &bs));
        }
        let mut out = vec![0.0; m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            let bview = if trans_b { View::tr(vb, k) } else { View::rm(vb, n) };
            gemm(m, k, n, View::rm(va, k), bview, 0.0, ViewMut::rm(&mut out, n));
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `x · wᵀ (+ bias)` for `w: [out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_ex(x, w, true)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul { a, b }, rg))
    }

    /// Adds a `[cols]` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rows_cols(a);
        if self.value(bias).len() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let v: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::AddRow { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Scale { a, c }, rg))
    }

    /// Multiplies `a` by the single entry `s[idx]`, differentiable in both.
    pub fn scale_by(&mut self, a: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = *self
            .value(s)
            .get(idx)
            .ok_or_else(|| NumericsError::Contract(format!("scale_by index {idx} out of range")))?;
        let v = self.value(a).iter().map(|x| x * sv).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::ScaleBy { a, s, idx }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![v], Op::Sum { a }, rg))
    }

    /// Mean over the row axis: `[rows × cols] -> [cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        let mut v = vec![0.0; n];
        for row in self.value(a).chunks(n) {
            for (acc, x) in v.iter_mut().zip(row) {
                *acc += x;
            }
        }
        v.iter_mut().for_each(|x| *x /= m as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n], v, Op::MeanRows { a }, rg))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let (_, n) = self.rows_cols(a);
        let v: Vec<f64> = self.value(a).chunks(n).flat_map(softmax_slice).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let (gv, bv) = (self.value(gamma), self.value(beta));
        for (r, row) in self.value(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Gelu { a }, rg))
    }

    /// Gathers rows of `table: [V × d]` -> `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vsize, d) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vsize) {
            return Err(NumericsError::Contract(format!(
                "embedding id {bad} out of range for table of {vsize} rows"
            )));
        }
        if ids.is_empty() {
            return Err(NumericsError::Contract("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let v: Vec<f64> = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            v,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.rows_cols(logits);
        if targets.len() != m {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if targets.iter().flatten().any(|&t| t >= v) {
            return Err(NumericsError::Contract("cross_entropy target out of vocabulary".into()));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumericsError::Contract("cross_entropy with every position masked".into()));
        }
        let z = self.value(logits);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &z[r * v..(r + 1) * v];
            let p = softmax_slice(row);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[*t];
            probs[r * v..(r + 1) * v].copy_from_slice(&p);
        }
        loss /= count as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Stacks along the row (sequence) axis; `[d]` vectors count as one row.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let n = self.node(first).cols();
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            v.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], v, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_cols(a);
        if len == 0 || start + len > m {
            return Err(NumericsError::Contract(format!(
                "slice {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let v = self.value(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len, n], v, Op::SliceRows { a, start }, rg))
    }

    /// One row of `a` as a `[cols]` vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.slice_rows(a, i, 1)?;
        let n = self.node(a).cols();
        self.reshape(r, vec![n])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, v, Op::Reshape { a }, rg))
    }

    /// Multi-head scaled dot-product attention core (no projections).
    ///
    /// `q: [nq × d]`, `k, v: [nk × d]`; heads split `d` into contiguous blocks
    /// and their outputs are concatenated back into `[nq × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&AttnMask>, heads: usize) -> Result<Var> {
        let (nq, d) = self.rows_cols(q);
        let (nk, dk) = self.rows_cols(k);
        if dk != d || self.shape(k) != self.shape(v) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        let dims = AttentionDims::new(nq, nk, d, heads)?;
        let (out, probs) = attention::forward(&dims, self.value(q), self.value(k), self.value(v), mask)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(vec![nq, d], out, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Per-head attention probabilities `[heads × nq × nk]` recorded by an attention node.
    pub fn attention_probs(&self, att: Var) -> Option<&[f64]> {
        match &self.node(att).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Records an operation with a caller-supplied value and vector-Jacobian product.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: impl Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(shape_err("custom", &shape, &[value.len()]));
        }
        let rg = self.rg(inputs);
        let backward: Box<CustomBackward> = Box::new(backward);
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        ))
    }
}
