//! Parameterized building blocks recorded onto a [`Graph`].

use carpe_numerics::{AttnMask, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Normal(std) => {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
                .expect("shape matches data")
        }
    }
}

/// `y = x·Wᵀ + b` with `W: [out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            group,
            init_tensor(&[out_dim, in_dim], init, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    /// Xavier-style default init.
    pub fn default_init(in_dim: usize) -> Init {
        Init::Normal(1.0 / (in_dim as f64).sqrt())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(g, self.w);
        let b = self.b.map(|b| store.var(g, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
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
        let fc1 = Linear::new(
            store,
            &format!("{name}.fc1"),
            group,
            in_dim,
            hidden,
            true,
            Linear::default_init(in_dim),
            rng,
        );
        let init2 = if zero_out { Init::Zeros } else { Linear::default_init(hidden) };
        let fc2 = Linear::new(store, &format!("{name}.fc2"), group, hidden, out_dim, true, init2, rng);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention layer plus the attention node (for probability inspection).
pub struct AttnOut {
    pub out: Var,
    pub att: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Linear::default_init(dim);
        let mk = |store: &mut ParamStore, part: &str, init, rng: &mut _| {
            Linear::new(store, &format!("{name}.{part}"), group, dim, dim, true, init, rng)
        };
        let q = mk(store, "q", init, rng);
        let k = mk(store, "k", init, rng);
        let v = mk(store, "v", init, rng);
        let o = mk(store, "o", if zero_out { Init::Zeros } else { init }, rng);
        Self { q, k, v, o, heads }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: Option<&AttnMask>,
    ) -> Result<AttnOut> {
        let q = self.q.forward(g, store, x_q)?;
        let k = self.k.forward(g, store, x_kv)?;
        let v = self.v.forward(g, store, x_kv)?;
        let att = g.attention(q, k, v, mask, self.heads)?;
        let out = self.o.forward(g, store, att)?;
        Ok(AttnOut { out, att })
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ffn: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads, false, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), group, dim, ffn, dim, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&AttnMask>) -> Result<AttnOut> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        let out = g.add(x, m)?;
        Ok(AttnOut { out, att: a.att })
    }
}
