//! AdamW with per-group learning rate and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{CarpeError, Result};
use crate::params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// First/second moment state of one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    /// One decoupled-weight-decay Adam update of `p` with gradient `g`.
    pub fn update(&mut self, p: &mut [f64], g: &[f64], group: GroupHyper, h: AdamHyper) {
        if self.m.len() != p.len() {
            self.m = vec![0.0; p.len()];
            self.v = vec![0.0; p.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p[i] -= group.lr * (group.weight_decay * p[i] + mhat / (vhat.sqrt() + h.eps));
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Optimizer over a [`ParamStore`]; only trainable tensors holding a gradient move.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: AdamHyper,
    groups: Vec<(ParamGroup, GroupHyper)>,
    state: Vec<AdamState>,
}

impl AdamW {
    pub fn new(hyper: AdamHyper, groups: Vec<(ParamGroup, GroupHyper)>) -> Self {
        Self {
            hyper,
            groups,
            state: Vec::new(),
        }
    }

    pub fn group(&self, group: ParamGroup) -> Option<GroupHyper> {
        self.groups.iter().find(|(g, _)| *g == group).map(|(_, h)| *h)
    }

    pub fn groups(&self) -> &[(ParamGroup, GroupHyper)] {
        &self.groups
    }

    /// Applies one update and clears the gradients. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for e in store.entries() {
            if let Some(g) = e.tensor.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(CarpeError::Diverged(format!(
                        "non-finite gradient {} at coordinate {i} of {}",
                        g[i], e.name
                    )));
                }
            }
        }
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), AdamState::default);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let group = store.entry(id).group;
            let Some(hyper) = self.group(group) else { continue };
            let t = store.tensor_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            self.state[id.0].update(t.data_mut(), &grad, hyper, self.hyper);
        }
        store.zero_grad();
        Ok(())
    }
}
