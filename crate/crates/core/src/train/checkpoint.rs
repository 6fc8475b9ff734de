//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CARPE-CKPT"  u32 version
//! u64 len, JSON metadata (model config, stage manifest)
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u32 epoch
//! u64 record count, then per record:
//!     u64 len, name bytes; u8 group code; u32 ndim; u64 dims…; f64 values…
//! [u8; 32] SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use carpe_numerics::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CarpeError, Result};
use crate::model::{CarpeModel, ModelConfig};
use crate::params::{hex, ParamGroup, ParamStore};

pub const MAGIC: &[u8; 10] = b"CARPE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Hashes of the parameter groups a pretraining stage produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub group_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub rng: RngState,
    pub epoch: u32,
    pub tensors: Vec<NamedTensor>,
}

/// A training stage: the groups it writes and the stages it requires.
pub struct StageDef {
    pub name: &'static str,
    pub groups: &'static [ParamGroup],
    pub requires: &'static [&'static str],
}

const HEAD_GROUPS: &[ParamGroup] = &[
    ParamGroup::Adapter,
    ParamGroup::WHead,
    ParamGroup::Integrator,
    ParamGroup::ContextEncoder,
    ParamGroup::ContextPrompt,
    ParamGroup::Router,
];

/// Known stages in execution order.
pub const STAGES: [StageDef; 5] = [
    StageDef {
        name: "stage_a",
        groups: &[ParamGroup::VisionEncoders],
        requires: &[],
    },
    StageDef {
        name: "stage_b",
        groups: &[ParamGroup::LmBody, ParamGroup::TokenEmbed],
        requires: &["stage_a"],
    },
    StageDef {
        name: "stage_c",
        groups: &[ParamGroup::Adapter, ParamGroup::WHead],
        requires: &["stage_a", "stage_b"],
    },
    StageDef {
        name: "finetune",
        groups: HEAD_GROUPS,
        requires: &["stage_a", "stage_b", "stage_c"],
    },
    StageDef {
        name: "merge",
        groups: HEAD_GROUPS,
        requires: &[],
    },
];

impl Checkpoint {
    pub fn from_model(model: &CarpeModel, stages: Vec<StageRecord>, rng: RngState, epoch: u32) -> Self {
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                group: e.group,
                tensor: Tensor::new(e.tensor.shape().to_vec(), e.tensor.data().to_vec())
                    .expect("stored tensors are valid"),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                model: model.cfg.clone(),
                stages,
            },
            rng,
            epoch,
            tensors,
        }
    }

    pub fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for t in &self.tensors {
            s.add(t.name.clone(), t.group, t.tensor.clone());
        }
        s
    }

    /// Rebuilds the model after checking the stage manifest.
    pub fn to_model(&self) -> Result<CarpeModel> {
        self.verify_stages()?;
        let mut model = CarpeModel::new(self.meta.model.clone())?;
        model.load_store(&self.store())?;
        Ok(model)
    }

    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut s = ParamStore::new();
        for t in self.tensors.iter().filter(|t| t.group == group) {
            s.add(t.name.clone(), t.group, t.tensor.clone());
        }
        s.group_hash(group)
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.meta.stages.iter().any(|s| s.stage == stage)
    }

    /// Records the current hashes of the groups `stage` writes.
    pub fn record_stage(&mut self, stage: &str) -> Result<()> {
        let def = STAGES
            .iter()
            .find(|d| d.name == stage)
            .ok_or_else(|| CarpeError::Checkpoint(format!("unknown stage {stage}")))?;
        let group_hashes = def
            .groups
            .iter()
            .filter(|g| self.tensors.iter().any(|t| t.group == **g))
            .map(|g| (g.name().to_string(), self.group_hash(*g)))
            .collect();
        self.meta.stages.retain(|s| s.stage != stage);
        self.meta.stages.push(StageRecord {
            stage: stage.to_string(),
            group_hashes,
        });
        Ok(())
    }

    /// Every recorded stage needs its prerequisites, and the groups a stage
    /// wrote must still match its recorded hashes unless a later recorded
    /// stage rewrote them.
    pub fn verify_stages(&self) -> Result<()> {
        for rec in &self.meta.stages {
            let def = STAGES
                .iter()
                .find(|d| d.name == rec.stage)
                .ok_or_else(|| CarpeError::Checkpoint(format!("unknown stage {}", rec.stage)))?;
            if let Some(missing) = def.requires.iter().find(|r| !self.has_stage(r)) {
                return Err(CarpeError::Checkpoint(format!(
                    "stage {} is recorded without its prerequisite {missing}",
                    rec.stage
                )));
            }
        }
        for (pos, def) in STAGES.iter().enumerate() {
            let Some(rec) = self.meta.stages.iter().find(|s| s.stage == def.name) else { continue };
            let rewritten = |g: ParamGroup| {
                STAGES[pos + 1..]
                    .iter()
                    .any(|later| self.has_stage(later.name) && later.groups.contains(&g))
            };
            for (name, want) in &rec.group_hashes {
                let g = ParamGroup::from_name(name)
                    .ok_or_else(|| CarpeError::Checkpoint(format!("unknown group {name}")))?;
                if !rewritten(g) && *want != self.group_hash(g) {
                    return Err(CarpeError::Checkpoint(format!(
                        "{name} parameters do not match the hash recorded by {}",
                        def.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.group.code());
            out.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
            for d in t.tensor.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CarpeError::Checkpoint("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CarpeError::Checkpoint("content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CarpeError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CarpeError::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let epoch = r.u32()?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CarpeError::Checkpoint("tensor name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let group = ParamGroup::from_code(code)
                .ok_or_else(|| CarpeError::Checkpoint(format!("unknown group code {code}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| CarpeError::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CarpeError::Checkpoint(format!("{name}: {e}")))?;
            tensors.push(NamedTensor { name, group, tensor });
        }
        if r.pos != body.len() {
            return Err(CarpeError::Checkpoint("trailing bytes after tensor records".into()));
        }
        Ok(Self {
            meta,
            rng: RngState { seed, stream, word_pos },
            epoch,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CarpeError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// WiSE-FT: `θ = (1 − c)·θ_A + c·θ_B` per tensor.
///
/// `c = 0` and `c = 1` return exact copies of the respective input. Otherwise
/// metadata comes from the nearer endpoint (B on a tie), and tensors equal in
/// both inputs are copied unchanged.
pub fn wiseft_merge(a: &Checkpoint, b: &Checkpoint, coeff: f64) -> Result<Checkpoint> {
    if !coeff.is_finite() {
        return Err(CarpeError::Config(format!("merge coefficient {coeff} is not finite")));
    }
    if a.tensors.len() != b.tensors.len() {
        return Err(CarpeError::Checkpoint(format!(
            "structure mismatch: {} vs {} tensors",
            a.tensors.len(),
            b.tensors.len()
        )));
    }
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        if ta.name != tb.name || ta.group != tb.group || ta.tensor.shape() != tb.tensor.shape() {
            return Err(CarpeError::Checkpoint(format!(
                "structure mismatch at {} / {}",
                ta.name, tb.name
            )));
        }
    }
    if coeff == 0.0 {
        return Ok(a.clone());
    }
    if coeff == 1.0 {
        return Ok(b.clone());
    }
    let mut out = if coeff < 0.5 { a.clone() } else { b.clone() };
    for (i, t) in out.tensors.iter_mut().enumerate() {
        let (xa, xb) = (a.tensors[i].tensor.data(), b.tensors[i].tensor.data());
        if xa == xb {
            t.tensor = a.tensors[i].tensor.clone();
            continue;
        }
        let data = xa.iter().zip(xb).map(|(x, y)| (1.0 - coeff) * x + coeff * y).collect();
        t.tensor = Tensor::new(a.tensors[i].tensor.shape().to_vec(), data)?;
    }
    out.record_stage("merge")?;
    Ok(out)
}
