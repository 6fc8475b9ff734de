//! The composite model: vision experts and adapters, the language core, and
//! the optional CARPE head (integrator, context prompt/encoder, router).

use std::sync::atomic::{AtomicU64, Ordering};

use carpe_numerics::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_rng, EOS};
use crate::ensemble::{
    ensemble_logits, route_decision, ContextDecision, ContextEncoder, ContextPrompt, EnsembleTrace, Router,
};
use crate::error::{CarpeError, Result};
use crate::integrator::{Adapter, IntegratorOut, VisionIntegrator};
use crate::language::{logits, ForwardTrace, LanguageModel, LmConfig, QueryLayer};
use crate::params::{ParamGroup, ParamStore};
use crate::vision::{default_experts, EncoderConfig, VisionEncoder};

/// CARPE head variant: the base encoder only, or top-1 routing over all experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarpeMode {
    Single,
    Moe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub experts: Vec<EncoderConfig>,
    pub adapter_hidden: usize,
    pub integrator_depth: usize,
    pub query_layer: QueryLayer,
    pub seed: u64,
    /// Set once a CARPE head is attached.
    pub head: Option<CarpeMode>,
}

impl ModelConfig {
    pub fn toy_default(vocab: usize) -> Self {
        Self {
            lm: LmConfig {
                vocab,
                d_model: 64,
                layers: 4,
                heads: 4,
                ffn: 256,
                max_len: 160,
            },
            experts: default_experts(),
            adapter_hidden: 64,
            integrator_depth: 1,
            query_layer: QueryLayer::Penultimate,
            seed: 0,
            head: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        if self.experts.is_empty() {
            return Err(CarpeError::Config("at least one vision expert is required".into()));
        }
        for e in &self.experts {
            e.validate()?;
        }
        if self.integrator_depth == 0 {
            return Err(CarpeError::Config("integrator depth must be at least 1".into()));
        }
        Ok(())
    }
}

const STREAM_LM: u64 = 1;
const STREAM_ADAPTER: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_VISION: u64 = 4;

#[derive(Debug, Clone)]
pub struct CarpeHead {
    pub mode: CarpeMode,
    pub integrator: VisionIntegrator,
    /// Integrator-owned projections of raw vision features, one per routable expert.
    pub kv_adapters: Vec<Adapter>,
    pub prompt: ContextPrompt,
    pub encoder: ContextEncoder,
    pub router: Option<Router>,
}

impl CarpeHead {
    pub fn experts(&self) -> usize {
        self.kv_adapters.len()
    }
}

/// Which logit stream greedy decoding reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stream {
    #[default]
    Ensemble,
    Vision,
    Llm,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replaces `(α, β)` by `(a, 1 − a)`, bypassing the context encoder.
    pub force_alpha: Option<f64>,
    /// Reuses a decision from an earlier pass and skips the context pass.
    pub decision: Option<ContextDecision>,
}

pub struct CarpeOutput {
    pub z: Var,
    pub z_vision: Var,
    pub z_llm: Var,
    pub h_vision: Var,
    pub h_context: Option<Var>,
    pub weights: Var,
    pub router_probs: Option<Var>,
    pub lm: ForwardTrace,
    pub integrator: IntegratorOut,
    pub decision: ContextDecision,
}

pub struct BaseOutput {
    pub z: Var,
    pub lm: ForwardTrace,
}

#[derive(Debug)]
pub struct CarpeModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub experts: Vec<VisionEncoder>,
    pub adapters: Vec<Adapter>,
    pub lm: LanguageModel,
    pub head: Option<CarpeHead>,
    expert_calls: Vec<AtomicU64>,
}

impl Clone for CarpeModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            experts: self.experts.clone(),
            adapters: self.adapters.clone(),
            lm: self.lm.clone(),
            head: self.head.clone(),
            expert_calls: self.expert_calls().into_iter().map(AtomicU64::new).collect(),
        }
    }
}

impl CarpeModel {
    /// Builds the base LVLM (experts, adapters, LM) and, if `cfg.head` is set,
    /// the CARPE head. Initialization is a pure function of `cfg`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.lm.d_model;
        let mut experts = Vec::with_capacity(cfg.experts.len());
        for (i, e) in cfg.experts.iter().enumerate() {
            let mut rng = derive_rng(e.seed, STREAM_VISION);
            experts.push(VisionEncoder::new(&mut store, i, *e, &mut rng)?);
        }
        let mut rng = derive_rng(cfg.seed, STREAM_LM);
        let lm = LanguageModel::new(&mut store, cfg.lm, &mut rng)?;
        let mut rng = derive_rng(cfg.seed, STREAM_ADAPTER);
        let adapters = cfg
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Adapter::new(
                    &mut store,
                    &format!("adapter.{i}"),
                    ParamGroup::Adapter,
                    e.width,
                    cfg.adapter_hidden,
                    d,
                    false,
                    &mut rng,
                )
            })
            .collect();
        let expert_calls = cfg.experts.iter().map(|_| AtomicU64::new(0)).collect();
        let mut model = Self {
            cfg: cfg.clone(),
            store,
            experts,
            adapters,
            lm,
            head: None,
            expert_calls,
        };
        if let Some(mode) = cfg.head {
            model.build_head(mode)?;
        }
        Ok(model)
    }

    /// Adds a freshly initialized CARPE head to a base model.
    pub fn attach_head(&mut self, mode: CarpeMode) -> Result<()> {
        if self.head.is_some() {
            return Err(CarpeError::Config("model already has a CARPE head".into()));
        }
        self.build_head(mode)?;
        self.cfg.head = Some(mode);
        Ok(())
    }

    fn build_head(&mut self, mode: CarpeMode) -> Result<()> {
        let d = self.cfg.lm.d_model;
        let experts = match mode {
            CarpeMode::Single => 1,
            CarpeMode::Moe => self.experts.len(),
        };
        let mut rng = derive_rng(self.cfg.seed, STREAM_HEAD);
        let integrator = VisionIntegrator::new(
            &mut self.store,
            d,
            self.cfg.lm.heads,
            self.cfg.integrator_depth,
            &mut rng,
        );
        let kv_adapters = (0..experts)
            .map(|e| {
                Adapter::new(
                    &mut self.store,
                    &format!("integrator.kv{e}"),
                    ParamGroup::Integrator,
                    self.cfg.experts[e].width,
                    self.cfg.adapter_hidden,
                    d,
                    false,
                    &mut rng,
                )
            })
            .collect();
        let ctx_row = self.store.tensor(self.lm.tok).row(crate::corpus::CTX).to_vec();
        let prompt = ContextPrompt::new(&mut self.store, Tensor::vector(ctx_row));
        let encoder = ContextEncoder::new(&mut self.store, d);
        let router = (experts > 1).then(|| Router::new(&mut self.store, experts, d, &mut rng));
        self.head = Some(CarpeHead {
            mode,
            integrator,
            kv_adapters,
            prompt,
            encoder,
            router,
        });
        Ok(())
    }

    pub fn head(&self) -> Result<&CarpeHead> {
        self.head
            .as_ref()
            .ok_or_else(|| CarpeError::Config("model has no CARPE head".into()))
    }

    /// Per-expert encoder executions since the last reset.
    pub fn expert_calls(&self) -> Vec<u64> {
        self.expert_calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_expert_calls(&self) {
        for c in &self.expert_calls {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Runs expert `index` on `image`, counting the execution.
    pub fn encode(&self, g: &mut Graph, index: usize, image: &Tensor) -> Result<Var> {
        let enc = self
            .experts
            .get(index)
            .ok_or_else(|| CarpeError::Config(format!("no vision expert {index}")))?;
        self.expert_calls[index].fetch_add(1, Ordering::Relaxed);
        enc.encode(g, &self.store, image)
    }

    /// Records `params[i]` as parameter `i`, so later lookups of the stored
    /// parameters resolve to these values instead.
    pub fn bind_params(&self, g: &mut Graph, params: &[Tensor]) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(CarpeError::Config(format!(
                "expected {} parameter tensors, got {}",
                self.store.len(),
                params.len()
            )));
        }
        for (i, t) in params.iter().enumerate() {
            g.param(i, t);
        }
        Ok(())
    }

    /// Base LVLM forward: expert `expert` through its adapter into the LM, with
    /// the CTX token embedding at the context slot. Returns `Z_llm`.
    pub fn base_forward(
        &self,
        g: &mut Graph,
        expert: usize,
        image: &Tensor,
        prompt: &[usize],
        answer: &[usize],
    ) -> Result<BaseOutput> {
        let raw = self.encode(g, expert, image)?;
        let adapted = self.adapters[expert].adapt(g, &self.store, raw)?;
        let ctx = self.lm.ctx_token_embed(g, &self.store)?;
        let lm = self.lm.forward(g, &self.store, prompt, answer, Some(adapted), ctx)?;
        let w = self.lm.w_head(g, &self.store);
        let z = logits(g, lm.h_llm, w)?;
        Ok(BaseOutput { z, lm })
    }

    /// Text-only LM forward with the CTX token embedding at the context slot.
    pub fn text_forward(&self, g: &mut Graph, prompt: &[usize], answer: &[usize]) -> Result<BaseOutput> {
        let ctx = self.lm.ctx_token_embed(g, &self.store)?;
        let lm = self.lm.forward(g, &self.store, prompt, answer, None, ctx)?;
        let w = self.lm.w_head(g, &self.store);
        let z = logits(g, lm.h_llm, w)?;
        Ok(BaseOutput { z, lm })
    }

    /// `H_context` from the text-only pass.
    pub fn context_state(&self, g: &mut Graph, prompt: &[usize]) -> Result<Var> {
        let head = self.head()?;
        let ctx = head.prompt.var(g, &self.store);
        self.lm.context_pass(g, &self.store, prompt, ctx)
    }

    /// `(α, β)` and routing from the text-only context pass alone.
    pub fn context_decision(&self, prompt: &[usize]) -> Result<ContextDecision> {
        let head = self.head()?;
        let mut g = Graph::new();
        let h = self.context_state(&mut g, prompt)?;
        let w = head.encoder.weights(&mut g, &self.store, h)?;
        let (expert_index, gate_prob) = match &head.router {
            Some(r) => {
                let p = r.probs(&mut g, &self.store, h)?;
                route_decision(g.value(p))
            }
            None => (0, 1.0),
        };
        let ab = g.value(w);
        Ok(ContextDecision {
            alpha: ab[0],
            beta: ab[1],
            expert_index,
            gate_prob,
        })
    }

    /// Full CARPE forward: context pass, routing, encode and adapt, LM forward,
    /// vision integration, dual logits and their context-weighted ensemble.
    pub fn carpe_forward(
        &self,
        g: &mut Graph,
        image: &Tensor,
        prompt: &[usize],
        answer: &[usize],
        opts: ForwardOptions,
    ) -> Result<CarpeOutput> {
        let head = self.head()?;
        let store = &self.store;

        let (mut weights, h_context, router_probs, mut decision) = match opts.decision {
            Some(dec) => {
                let w = g.constant(&[2], vec![dec.alpha, dec.beta])?;
                (w, None, None, dec)
            }
            None => {
                let h = self.context_state(g, prompt)?;
                let w = head.encoder.weights(g, store, h)?;
                let (probs, (expert_index, gate_prob)) = match &head.router {
                    Some(r) => {
                        let p = r.probs(g, store, h)?;
                        (Some(p), route_decision(g.value(p)))
                    }
                    None => (None, (0, 1.0)),
                };
                let ab = g.value(w);
                let dec = ContextDecision {
                    alpha: ab[0],
                    beta: ab[1],
                    expert_index,
                    gate_prob,
                };
                (w, Some(h), probs, dec)
            }
        };
        if let Some(a) = opts.force_alpha {
            weights = g.constant(&[2], vec![a, 1.0 - a])?;
            decision.alpha = a;
            decision.beta = 1.0 - a;
        }

        let e = decision.expert_index;
        let raw = self.encode(g, e, image)?;
        let mut adapted = self.adapters[e].adapt(g, store, raw)?;
        let mut kv = head.kv_adapters[e].adapt(g, store, raw)?;
        if let Some(p) = router_probs {
            adapted = g.scale_by(adapted, p, e)?;
            kv = g.scale_by(kv, p, e)?;
        } else if head.router.is_some() {
            adapted = g.scale(adapted, decision.gate_prob)?;
            kv = g.scale(kv, decision.gate_prob)?;
        }

        let ctx = head.prompt.var(g, store);
        let lm = self.lm.forward(g, store, prompt, answer, Some(adapted), ctx)?;
        let query = match self.cfg.query_layer {
            QueryLayer::Penultimate => lm.h_penult,
            QueryLayer::Final => lm.h_llm,
        };
        let mask = lm.layout.mask();
        let integrator = head.integrator.integrate(g, store, query, Some(kv), &mask)?;
        let w = self.lm.w_head(g, store);
        let z_vision = logits(g, integrator.h_vision, w)?;
        let z_llm = logits(g, lm.h_llm, w)?;
        let z = ensemble_logits(g, z_vision, z_llm, weights)?;
        Ok(CarpeOutput {
            z,
            z_vision,
            z_llm,
            h_vision: integrator.h_vision,
            h_context,
            weights,
            router_probs,
            lm,
            integrator,
            decision,
        })
    }

    pub fn trace(&self, g: &Graph, out: &CarpeOutput) -> EnsembleTrace {
        EnsembleTrace {
            alpha: out.decision.alpha,
            beta: out.decision.beta,
            expert_index: out.decision.expert_index,
            gate_prob: out.decision.gate_prob,
            z_vision: g.tensor(out.z_vision),
            z_llm: g.tensor(out.z_llm),
            z: g.tensor(out.z),
        }
    }

    /// Greedy decoding over the chosen logit stream. The context decision is
    /// made once at prefill and reused for every later step.
    pub fn generate(
        &self,
        image: &Tensor,
        prompt: &[usize],
        max_tokens: usize,
        opts: ForwardOptions,
        stream: Stream,
    ) -> Result<(Vec<usize>, ContextDecision)> {
        let mut answer = Vec::new();
        let mut opts = opts;
        let mut first = None;
        for _ in 0..max_tokens.max(1) {
            let mut g = Graph::new();
            let out = self.carpe_forward(&mut g, image, prompt, &answer, opts)?;
            let dec = *first.get_or_insert(out.decision);
            opts.decision = Some(dec);
            let z = match stream {
                Stream::Ensemble => out.z,
                Stream::Vision => out.z_vision,
                Stream::Llm => out.z_llm,
            };
            let next = next_token(&g, z, out.lm.layout.ctx_pos() + answer.len());
            if next == EOS {
                break;
            }
            answer.push(next);
        }
        Ok((answer, first.expect("at least one decoding step")))
    }

    /// Greedy decoding with the base LVLM through expert `expert`.
    pub fn generate_base(&self, expert: usize, image: &Tensor, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        let mut answer = Vec::new();
        for _ in 0..max_tokens.max(1) {
            let mut g = Graph::new();
            let out = self.base_forward(&mut g, expert, image, prompt, &answer)?;
            let next = next_token(&g, out.z, out.lm.layout.ctx_pos() + answer.len());
            if next == EOS {
                break;
            }
            answer.push(next);
        }
        Ok(answer)
    }

    /// Greedy text-only decoding with the base LM.
    pub fn generate_text(&self, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        let mut answer = Vec::new();
        for _ in 0..max_tokens.max(1) {
            let mut g = Graph::new();
            let out = self.text_forward(&mut g, prompt, &answer)?;
            let next = next_token(&g, out.z, out.lm.layout.ctx_pos() + answer.len());
            if next == EOS {
                break;
            }
            answer.push(next);
        }
        Ok(answer)
    }

    /// Copies tensors by name from `store`, which must hold exactly this
    /// model's parameter names, groups and shapes.
    pub fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(CarpeError::Checkpoint(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.store.len(),
                store.len()
            )));
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let entry = self.store.entry(id);
            let src_id = store
                .id(&entry.name)
                .ok_or_else(|| CarpeError::Checkpoint(format!("missing parameter {}", entry.name)))?;
            let src = store.entry(src_id);
            if src.group != entry.group || src.tensor.shape() != entry.tensor.shape() {
                return Err(CarpeError::Checkpoint(format!(
                    "parameter {} differs in group or shape",
                    entry.name
                )));
            }
            let flag = entry.tensor.requires_grad();
            *self.store.tensor_mut(id) = src.tensor.clone().with_requires_grad(flag);
        }
        Ok(())
    }
}

fn next_token(g: &Graph, z: Var, row: usize) -> usize {
    let v = g.shape(z)[1];
    crate::argmax(&g.value(z)[row * v..(row + 1) * v])
}
