//! Decoder-only language core with image-slot injection and a trailing
//! context-prompt slot.

use carpe_numerics::{AttnMask, Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, CTX, EOS};
use crate::error::{CarpeError, Result};
use crate::nn::{init_tensor, Block, Init, LayerNorm};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Which LM hidden state feeds the vision-integrator queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLayer {
    /// Output of layer `L − 1`.
    Penultimate,
    /// Output of layer `L`.
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(CarpeError::Config(format!("language model needs at least 3 layers, got {}", self.layers)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(CarpeError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab > 256 {
            return Err(CarpeError::Config(format!("vocabulary of {} exceeds 256", self.vocab)));
        }
        Ok(())
    }
}

/// Position map of one sequence: `[image][BOS, prompt…][CTX][answer…]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub image: usize,
    /// BOS plus prompt tokens.
    pub text: usize,
    pub answer: usize,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.image + self.text + 1 + self.answer
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ctx_pos(&self) -> usize {
        self.image + self.text
    }

    /// Next-token targets: the CTX row predicts the first answer token and the
    /// last answer row predicts EOS. Every other row is masked out.
    pub fn targets(&self, answer: &[usize]) -> Vec<Option<usize>> {
        let mut t = vec![None; self.len()];
        for (i, slot) in t[self.ctx_pos()..].iter_mut().enumerate() {
            *slot = Some(answer.get(i).copied().unwrap_or(EOS));
        }
        t
    }

    /// Causal mask whose CTX row cannot see image slots.
    pub fn mask(&self) -> AttnMask {
        let mut m = AttnMask::causal(self.len());
        for j in 0..self.image {
            m.forbid(self.ctx_pos(), j);
        }
        m
    }
}

pub struct ForwardTrace {
    pub h_penult: Var,
    pub h_llm: Var,
    pub layout: Layout,
    /// Attention core node of every layer, for probability inspection.
    pub attn: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub w_head: ParamId,
}

impl LanguageModel {
    pub fn new(store: &mut ParamStore, cfg: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok = store.add("lm.tok", ParamGroup::TokenEmbed, init_tensor(&[cfg.vocab, d], Init::Normal(0.5), rng));
        let pos = store.add("lm.pos", ParamGroup::LmBody, init_tensor(&[cfg.max_len, d], Init::Normal(0.1), rng));
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("lm.block{l}"), ParamGroup::LmBody, d, cfg.heads, cfg.ffn, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "lm.ln_f", ParamGroup::LmBody, d);
        let w_head = store.add(
            "lm.w_head",
            ParamGroup::WHead,
            init_tensor(&[cfg.vocab, d], Init::Normal(1.0 / (d as f64).sqrt()), rng),
        );
        Ok(Self {
            cfg,
            tok,
            pos,
            blocks,
            ln_f,
            w_head,
        })
    }

    /// Token embedding of the CTX marker, the base model's context slot.
    pub fn ctx_token_embed(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let tok = store.var(g, self.tok);
        Ok(g.row(tok, CTX)?)
    }

    /// Runs the LM over `[image][BOS, prompt…][CTX][answer…]`.
    ///
    /// `ctx_embed` is a `[d]` vector placed at the CTX slot. The CTX row never
    /// attends to image slots.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prompt: &[usize],
        answer: &[usize],
        image_embeds: Option<Var>,
        ctx_embed: Var,
    ) -> Result<ForwardTrace> {
        let d = self.cfg.d_model;
        let layout = Layout {
            image: image_embeds.map_or(0, |v| g.shape(v)[0]),
            text: 1 + prompt.len(),
            answer: answer.len(),
        };
        if layout.len() > self.cfg.max_len {
            return Err(CarpeError::Length {
                len: layout.len(),
                max: self.cfg.max_len,
            });
        }
        let tok = store.var(g, self.tok);
        let mut parts = Vec::with_capacity(4);
        if let Some(img) = image_embeds {
            parts.push(img);
        }
        let text_ids: Vec<usize> = std::iter::once(BOS).chain(prompt.iter().copied()).collect();
        parts.push(g.embedding(tok, &text_ids)?);
        parts.push(g.reshape(ctx_embed, vec![1, d])?);
        if !answer.is_empty() {
            parts.push(g.embedding(tok, answer)?);
        }
        let x = g.concat_rows(&parts)?;
        let pos = store.var(g, self.pos);
        let pos = g.slice_rows(pos, 0, layout.len())?;
        let mut x = g.add(x, pos)?;

        let mask = layout.mask();
        let mut attn = Vec::with_capacity(self.blocks.len());
        let mut penult = None;
        for (l, b) in self.blocks.iter().enumerate() {
            if l + 1 == self.blocks.len() {
                penult = Some(x);
            }
            let out = b.forward(g, store, x, Some(&mask))?;
            attn.push(out.att);
            x = out.out;
        }
        let h_penult = self.ln_f.forward(g, store, penult.expect("at least one layer"))?;
        let h_llm = self.ln_f.forward(g, store, x)?;
        Ok(ForwardTrace {
            h_penult,
            h_llm,
            layout,
            attn,
        })
    }

    /// Text-only second pass over `[BOS, prompt…][CTX]`; returns the final-layer
    /// hidden state at the CTX slot.
    pub fn context_pass(&self, g: &mut Graph, store: &ParamStore, prompt: &[usize], ctx_embed: Var) -> Result<Var> {
        let t = self.forward(g, store, prompt, &[], None, ctx_embed)?;
        Ok(g.row(t.h_llm, t.layout.ctx_pos())?)
    }

    pub fn w_head(&self, g: &mut Graph, store: &ParamStore) -> Var {
        store.var(g, self.w_head)
    }
}

/// `Z = H·W_headᵀ`, no bias.
pub fn logits(g: &mut Graph, h: Var, w_head: Var) -> Result<Var> {
    Ok(g.matmul_ex(h, w_head, true)?)
}
