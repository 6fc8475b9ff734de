//! Context prompt, context encoder, logit ensemble and the top-1 vision router.

use carpe_numerics::{softmax_slice, Graph, NumericsError, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{init_tensor, Init};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Single learnable embedding placed at the CTX slot.
#[derive(Debug, Clone)]
pub struct ContextPrompt {
    pub embedding: ParamId,
}

impl ContextPrompt {
    pub fn new(store: &mut ParamStore, init: Tensor) -> Self {
        Self {
            embedding: store.add("context.prompt", ParamGroup::ContextPrompt, init),
        }
    }

    pub fn var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        store.var(g, self.embedding)
    }
}

/// `(α, β) = softmax(W_context · H_context)`; α weighs the vision stream.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub w: ParamId,
}

impl ContextEncoder {
    /// Zero-initialized, so training starts from `(0.5, 0.5)`.
    pub fn new(store: &mut ParamStore, d: usize) -> Self {
        Self {
            w: store.add("context.encoder.w", ParamGroup::ContextEncoder, Tensor::zeros(&[2, d])),
        }
    }

    /// `[2]` node holding `(α, β)`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, h_context: Var) -> Result<Var> {
        let w = store.var(g, self.w);
        matvec_softmax(g, w, h_context)
    }
}

fn matvec_softmax(g: &mut Graph, w: Var, h: Var) -> Result<Var> {
    let d = g.shape(h)[0];
    let h = g.reshape(h, vec![1, d])?;
    let z = g.linear(h, w, None)?;
    let n = g.shape(z)[1];
    let z = g.reshape(z, vec![n])?;
    Ok(g.softmax(z)?)
}

/// Value-level `(α, β)` for a given `W_context` and `H_context`.
pub fn context_weights(w_context: &Tensor, h_context: &[f64]) -> (f64, f64) {
    let z: Vec<f64> = (0..2)
        .map(|r| w_context.row(r).iter().zip(h_context).map(|(a, b)| a * b).sum())
        .collect();
    let p = softmax_slice(&z);
    (p[0], p[1])
}

/// `Z = α·Z_vision + β·Z_llm`, with `(α, β)` read from the `[2]` node `weights`.
pub fn ensemble_logits(g: &mut Graph, z_vision: Var, z_llm: Var, weights: Var) -> Result<Var> {
    if g.shape(z_vision) != g.shape(z_llm) {
        return Err(NumericsError::Shape {
            op: "ensemble_logits",
            lhs: g.shape(z_vision).to_vec(),
            rhs: g.shape(z_llm).to_vec(),
        }
        .into());
    }
    let zv = g.scale_by(z_vision, weights, 0)?;
    let zl = g.scale_by(z_llm, weights, 1)?;
    Ok(g.add(zv, zl)?)
}

/// Value-level ensemble on flat logit arrays.
pub fn ensemble_values(z_vision: &[f64], z_llm: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    z_vision.iter().zip(z_llm).map(|(v, l)| alpha * v + beta * l).collect()
}

/// Top-1 router over `E` experts, conditioned on `H_context`.
#[derive(Debug, Clone)]
pub struct Router {
    pub w: ParamId,
    pub experts: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, experts: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(
                "router.w",
                ParamGroup::Router,
                init_tensor(&[experts, d], Init::Normal(0.1), rng),
            ),
            experts,
        }
    }

    /// `[E]` node of routing probabilities.
    pub fn probs(&self, g: &mut Graph, store: &ParamStore, h_context: Var) -> Result<Var> {
        let w = store.var(g, self.w);
        matvec_softmax(g, w, h_context)
    }
}

/// Argmax with lowest-index tie-break, and the winning probability.
pub fn route_decision(probs: &[f64]) -> (usize, f64) {
    let idx = crate::argmax(probs);
    (idx, probs[idx])
}

/// Top-1 routing from raw router logits.
pub fn route_from_logits(logits: &[f64]) -> (usize, f64) {
    route_decision(&softmax_slice(logits))
}

/// Per-sequence context decision: ensemble weights and routed expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextDecision {
    pub alpha: f64,
    pub beta: f64,
    pub expert_index: usize,
    pub gate_prob: f64,
}

/// Observables of one CARPE forward.
#[derive(Debug, Clone)]
pub struct EnsembleTrace {
    pub alpha: f64,
    pub beta: f64,
    pub expert_index: usize,
    pub gate_prob: f64,
    pub z_vision: Tensor,
    pub z_llm: Tensor,
    pub z: Tensor,
}

impl EnsembleTrace {
    pub fn decision(&self) -> ContextDecision {
        ContextDecision {
            alpha: self.alpha,
            beta: self.beta,
            expert_index: self.expert_index,
            gate_prob: self.gate_prob,
        }
    }
}
