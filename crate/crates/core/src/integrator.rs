//! Vision adapters and the vision-integrator block that produces `H_vision`.

use carpe_numerics::{AttnMask, Graph, NumericsError, Var};
use rand::Rng;

use crate::error::Result;
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};

/// Two-layer per-patch MLP `d_v → hidden → d`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub mlp: Mlp,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Adapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, group, in_dim, hidden, out_dim, zero_out, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn adapt(&self, g: &mut Graph, store: &ParamStore, raw: Var) -> Result<Var> {
        let shape = g.shape(raw);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NumericsError::Shape {
                op: "adapt",
                lhs: shape.to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            }
            .into());
        }
        self.mlp.forward(g, store, raw)
    }
}

#[derive(Debug, Clone)]
pub struct IntegratorBlock {
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

pub struct IntegratorOut {
    pub h_vision: Var,
    pub cross_attn: Vec<Var>,
    pub self_attn: Vec<Var>,
}

/// Cross-attention from LM states into vision features, then masked
/// self-attention, then an MLP, each as a pre-norm residual branch.
///
/// Output projections and the MLP's second layer start at zero, so a freshly
/// built integrator is the identity on its query input.
#[derive(Debug, Clone)]
pub struct VisionIntegrator {
    pub blocks: Vec<IntegratorBlock>,
}

impl VisionIntegrator {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let group = ParamGroup::Integrator;
        let blocks = (0..depth)
            .map(|i| {
                let n = format!("integrator.block{i}");
                IntegratorBlock {
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), group, d),
                    cross: MultiHeadAttention::new(store, &format!("{n}.cross"), group, d, heads, true, rng),
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), group, d),
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self"), group, d, heads, true, rng),
                    ln_mlp: LayerNorm::new(store, &format!("{n}.ln_mlp"), group, d),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), group, d, 4 * d, d, true, rng),
                }
            })
            .collect();
        Self { blocks }
    }

    /// `H_vision` from queries `h: [N × d]` and adapted vision features `[P × d]`.
    ///
    /// `mask` is the `[N × N]` self-attention mask shared with the LM.
    pub fn integrate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        vision_kv: Option<Var>,
        mask: &AttnMask,
    ) -> Result<IntegratorOut> {
        let kv = vision_kv.ok_or_else(|| {
            NumericsError::Precondition("vision integrator needs at least one vision feature row".into())
        })?;
        let mut x = h;
        let mut cross_attn = Vec::new();
        let mut self_attn = Vec::new();
        for b in &self.blocks {
            let q = b.ln_cross.forward(g, store, x)?;
            let c = b.cross.forward(g, store, q, kv, None)?;
            x = g.add(x, c.out)?;
            cross_attn.push(c.att);

            let s_in = b.ln_self.forward(g, store, x)?;
            let s = b.self_attn.forward(g, store, s_in, s_in, Some(mask))?;
            x = g.add(x, s.out)?;
            self_attn.push(s.att);

            let m_in = b.ln_mlp.forward(g, store, x)?;
            let m = b.mlp.forward(g, store, m_in)?;
            x = g.add(x, m)?;
        }
        Ok(IntegratorOut {
            h_vision: x,
            cross_attn,
            self_attn,
        })
    }
}
