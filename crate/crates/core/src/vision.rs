//! Toy patch transformers used as vision experts.

use carpe_numerics::{Graph, NumericsError, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::IMAGE_SIZE;
use crate::error::{CarpeError, Result};
use crate::nn::{init_tensor, Block, Init, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        let side = IMAGE_SIZE / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !IMAGE_SIZE.is_multiple_of(self.patch_size) {
            return Err(CarpeError::Config(format!(
                "patch size {} does not divide the image side {IMAGE_SIZE}",
                self.patch_size
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(CarpeError::Config(format!(
                "encoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// The four default experts: patch size in {8, 4} crossed with width in {32, 48}.
pub fn default_experts() -> Vec<EncoderConfig> {
    [(8, 32), (4, 32), (8, 48), (4, 48)]
        .into_iter()
        .enumerate()
        .map(|(i, (patch_size, width))| EncoderConfig {
            patch_size,
            width,
            depth: 2,
            heads: 4,
            seed: 1000 + i as u64,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// Splits a `[3 × 32 × 32]` image into row-major patches, each flattened channel-first.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(NumericsError::Shape {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: vec![3, IMAGE_SIZE, IMAGE_SIZE],
        }
        .into());
    }
    let side = IMAGE_SIZE / patch;
    let px = image.data();
    let mut out = Vec::with_capacity(3 * IMAGE_SIZE * IMAGE_SIZE);
    for py in 0..side {
        for pxi in 0..side {
            for c in 0..3 {
                for dy in 0..patch {
                    let row = c * IMAGE_SIZE * IMAGE_SIZE + (py * patch + dy) * IMAGE_SIZE + pxi * patch;
                    out.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![side * side, 3 * patch * patch], out)?)
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, index: usize, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let name = format!("vision.{index}");
        let group = ParamGroup::VisionEncoders;
        let in_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(
            store,
            &format!("{name}.patch"),
            group,
            in_dim,
            cfg.width,
            true,
            Linear::default_init(in_dim),
            rng,
        );
        let pos = store.add(
            format!("{name}.pos"),
            group,
            init_tensor(&[cfg.patches(), cfg.width], Init::Normal(0.1), rng),
        );
        let blocks = (0..cfg.depth)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), group, cfg.width, cfg.heads, 4 * cfg.width, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), group, cfg.width);
        Ok(Self {
            cfg,
            patch_embed,
            pos,
            blocks,
            ln_f,
        })
    }

    /// Patch embeddings before positional encoding, `[P × d_v]`.
    pub fn embed_patches(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let patches = patchify(image, self.cfg.patch_size)?;
        let x = g.input(&patches);
        self.patch_embed.forward(g, store, x)
    }

    /// Raw vision features `[P × d_v]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let x = self.embed_patches(g, store, image)?;
        let pos = store.var(g, self.pos);
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, None)?.out;
        }
        self.ln_f.forward(g, store, x)
    }

    /// Convenience forward on a throwaway graph.
    pub fn encode_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.encode(&mut g, store, image)?;
        Ok(g.tensor(v))
    }
}

/// Mean over the patch axis.
pub fn pool(features: &Tensor) -> Vec<f64> {
    let (rows, cols) = (features.rows(), features.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(features.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Throwaway linear classification head used only while pretraining an encoder.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ProbeHead {
    pub fn new(width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: init_tensor(&[classes, width], Init::Normal(0.1), rng).with_requires_grad(true),
            b: Tensor::zeros(&[classes]).with_requires_grad(true),
        }
    }
}

/// Mean cross-entropy of `head` on pooled encoder features over `batch`.
///
/// Returns the loss node, the head leaves, and the per-sample predicted class.
pub fn pretrain_objective(
    g: &mut Graph,
    store: &ParamStore,
    enc: &VisionEncoder,
    head: &ProbeHead,
    batch: &[(&Tensor, usize)],
) -> Result<(Var, [Var; 2], Vec<usize>)> {
    let mut pooled = Vec::with_capacity(batch.len());
    for (image, _) in batch {
        let f = enc.encode(g, store, image)?;
        pooled.push(g.mean_rows(f)?);
    }
    let feats = g.concat_rows(&pooled)?;
    let feats = g.reshape(feats, vec![batch.len(), enc.cfg.width])?;
    let w = g.input(&head.w);
    let b = g.input(&head.b);
    let logits = g.linear(feats, w, Some(b))?;
    let classes = head.w.shape()[0];
    let preds = g
        .value(logits)
        .chunks(classes)
        .map(crate::argmax)
        .collect();
    let targets: Vec<Option<usize>> = batch.iter().map(|(_, c)| Some(*c)).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    Ok((loss, [w, b], preds))
}
