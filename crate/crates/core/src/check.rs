//! Finite-difference verification of the whole CARPE model on a tiny instance.

use carpe_numerics::{grad_check, GradCheckConfig, GradReport, Graph, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::derive_rng;
use crate::corpus::IMAGE_SIZE;
use crate::error::Result;
use crate::language::{LmConfig, QueryLayer};
use crate::model::{CarpeMode, CarpeModel, ForwardOptions, ModelConfig};
use crate::vision::EncoderConfig;

/// A CARPE-MoE model with two 4-patch experts, a 2-token prompt and a
/// 1-token answer. Every parameter is jittered away from its initialization
/// so zero-initialized projections carry non-trivial gradients.
pub struct GradcheckInstance {
    pub model: CarpeModel,
    pub image: Tensor,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl GradcheckInstance {
    pub fn new(seed: u64) -> Result<Self> {
        let expert = |i: u64| EncoderConfig {
            patch_size: 16,
            width: 8,
            depth: 1,
            heads: 2,
            seed: seed + i,
        };
        let cfg = ModelConfig {
            lm: LmConfig {
                vocab: 12,
                d_model: 8,
                layers: 3,
                heads: 2,
                ffn: 16,
                max_len: 16,
            },
            experts: vec![expert(0), expert(1)],
            adapter_hidden: 8,
            integrator_depth: 1,
            query_layer: QueryLayer::Penultimate,
            seed,
            head: Some(CarpeMode::Moe),
        };
        let mut model = CarpeModel::new(cfg)?;
        let mut rng = derive_rng(seed, 0x6C);
        let jitter = Normal::new(0.0, 0.2).expect("valid normal");
        for id in model.store.ids().collect::<Vec<_>>() {
            for v in model.store.tensor_mut(id).data_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
        model.store.set_all_trainable(true);
        let pixels = (0..3 * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.gen_range(0.0..1.0)).collect();
        Ok(Self {
            model,
            image: Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], pixels)?,
            prompt: vec![6, 9],
            answer: vec![7],
        })
    }

    /// Answer cross-entropy of the ensembled logits with `params` bound in
    /// store order.
    pub fn loss(&self, g: &mut Graph, params: &[Tensor]) -> Result<carpe_numerics::Var> {
        self.model.bind_params(g, params)?;
        let out = self
            .model
            .carpe_forward(g, &self.image, &self.prompt, &self.answer, ForwardOptions::default())?;
        Ok(g.cross_entropy(out.z, &out.lm.layout.targets(&self.answer))?)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.model.store.entries().iter().map(|e| e.name.clone()).collect()
    }

    pub fn run(&self, cfg: &GradCheckConfig) -> Result<GradReport> {
        let mut params: Vec<Tensor> = self.model.store.entries().iter().map(|e| e.tensor.clone()).collect();
        let report = grad_check(
            |g, p| self.loss(g, p).map_err(|e| carpe_numerics::NumericsError::Precondition(e.to_string())),
            &mut params,
            cfg,
        )?;
        Ok(report)
    }
}
