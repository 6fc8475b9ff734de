//! Named parameter storage partitioned into training groups.

use std::collections::HashMap;
use std::fmt;

use carpe_numerics::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CarpeError, Result};

/// Every parameter belongs to exactly one group; freezing and learning
/// rates are set per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionEncoders,
    LmBody,
    TokenEmbed,
    Adapter,
    WHead,
    Integrator,
    ContextEncoder,
    ContextPrompt,
    Router,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::VisionEncoders,
        ParamGroup::LmBody,
        ParamGroup::TokenEmbed,
        ParamGroup::Adapter,
        ParamGroup::WHead,
        ParamGroup::Integrator,
        ParamGroup::ContextEncoder,
        ParamGroup::ContextPrompt,
        ParamGroup::Router,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::VisionEncoders => "vision_encoders",
            ParamGroup::LmBody => "lm_body",
            ParamGroup::TokenEmbed => "token_embed",
            ParamGroup::Adapter => "adapter",
            ParamGroup::WHead => "w_head",
            ParamGroup::Integrator => "integrator",
            ParamGroup::ContextEncoder => "context_encoder",
            ParamGroup::ContextPrompt => "context_prompt",
            ParamGroup::Router => "router",
        }
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&g| g == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Records parameter `id` on `g` (once per graph).
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, &self.entries[id.0].tensor)
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.set_requires_grad(trainable);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.tensor.set_requires_grad(trainable);
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.entries
            .iter()
            .any(|e| e.group == group && e.tensor.requires_grad())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds the parameter gradients recorded on `g` into the stored tensors, scaled by `scale`.
    pub fn accumulate_grads(&mut self, g: &Graph, scale: f64) -> Result<()> {
        for (key, grad) in g.param_grads() {
            let t = &mut self
                .entries
                .get_mut(key)
                .ok_or_else(|| CarpeError::Config(format!("graph references unknown parameter {key}")))?
                .tensor;
            if scale == 1.0 {
                t.accumulate_grad(grad)?;
            } else {
                let scaled: Vec<f64> = grad.iter().map(|v| v * scale).collect();
                t.accumulate_grad(&scaled)?;
            }
        }
        Ok(())
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and raw values of one group, hex encoded.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            hash_entry(&mut h, e);
        }
        hex(&h.finalize())
    }

    pub fn full_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            hash_entry(&mut h, e);
        }
        hex(&h.finalize())
    }
}

fn hash_entry(h: &mut Sha256, e: &ParamEntry) {
    h.update((e.name.len() as u64).to_le_bytes());
    h.update(e.name.as_bytes());
    for d in e.tensor.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in e.tensor.data() {
        h.update(v.to_le_bytes());
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
