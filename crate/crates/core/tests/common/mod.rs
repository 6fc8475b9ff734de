#![allow(dead_code)]

use carpe_core::corpus::{derive_rng, IMAGE_SIZE};
use carpe_core::language::{LmConfig, QueryLayer};
use carpe_core::model::{CarpeMode, CarpeModel, ModelConfig};
use carpe_core::vision::EncoderConfig;
use carpe_numerics::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const VOCAB: usize = 83;

pub fn tiny_config(head: Option<CarpeMode>) -> ModelConfig {
    let expert = |patch_size, width, seed| EncoderConfig {
        patch_size,
        width,
        depth: 1,
        heads: 2,
        seed,
    };
    ModelConfig {
        lm: LmConfig {
            vocab: VOCAB,
            d_model: 16,
            layers: 3,
            heads: 2,
            ffn: 32,
            max_len: 160,
        },
        experts: vec![expert(8, 8, 1), expert(16, 12, 2), expert(8, 12, 3), expert(16, 8, 4)],
        adapter_hidden: 16,
        integrator_depth: 1,
        query_layer: QueryLayer::Penultimate,
        seed: 9,
        head,
    }
}

pub fn tiny_model(head: Option<CarpeMode>) -> CarpeModel {
    CarpeModel::new(tiny_config(head)).unwrap()
}

/// Adds Gaussian noise to every parameter, moving zero-initialized ones off zero.
pub fn jitter(model: &mut CarpeModel, seed: u64, std: f64) {
    let mut rng = derive_rng(seed, 77);
    let dist = Normal::new(0.0, std).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.tensor_mut(id).data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
}

pub fn random_image(seed: u64) -> Tensor {
    let mut rng = derive_rng(seed, 3);
    let data = (0..3 * IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, 5);
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

pub fn bits(data: &[f64]) -> Vec<u64> {
    data.iter().map(|v| v.to_bits()).collect()
}

pub fn random_tokens(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = derive_rng(seed, 9);
    (0..n).map(|_| rng.gen_range(5..VOCAB)).collect()
}

/// Dense reference implementations, written as plain loops.
pub mod dense {
    use carpe_numerics::Tensor;

    pub type M = Vec<Vec<f64>>;

    pub fn rows(t: &Tensor) -> M {
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }

    /// `x·Wᵀ + b` with `W: [out × in]`.
    pub fn linear(x: &M, w: &Tensor, b: Option<&Tensor>) -> M {
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|r| {
                (0..out)
                    .map(|o| {
                        let mut s = b.map_or(0.0, |b| b.data()[o]);
                        for i in 0..inp {
                            s += r[i] * w.data()[o * inp + i];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn layer_norm(x: &M, gamma: &Tensor, beta: &Tensor) -> M {
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                r.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma.data()[j] + beta.data()[j])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    /// Multi-head scaled dot-product attention; `allowed(i, j)` gates each score.
    pub fn attention(q: &M, k: &M, v: &M, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> M {
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            for i in 0..q.len() {
                let mut scores = Vec::new();
                for j in 0..k.len() {
                    if allowed(i, j) {
                        let mut s = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            s += q[i][c] * k[j][c];
                        }
                        scores.push((j, s / (dh as f64).sqrt()));
                    }
                }
                let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
                for (j, s) in scores {
                    let p = (s - m).exp() / z;
                    for c in h * dh..(h + 1) * dh {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
        out
    }

    pub fn softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// End-to-end config with the tiny model and a few steps per stage.
pub fn tiny_run_config() -> carpe_core::config::Config {
    let m = tiny_config(None);
    let mut cfg = carpe_core::config::Config::default();
    cfg.model.d_model = m.lm.d_model;
    cfg.model.layers = m.lm.layers;
    cfg.model.heads = m.lm.heads;
    cfg.model.ffn = m.lm.ffn;
    cfg.model.adapter_hidden = m.adapter_hidden;
    cfg.model.experts = m.experts;
    cfg.train.vision_steps = 3;
    cfg.train.vision_samples = 32;
    cfg.train.vision_batch = 8;
    cfg.train.text_steps = 3;
    cfg.train.text_batch = 4;
    cfg.train.caption_steps = 4;
    cfg.train.caption_samples = 16;
    cfg.train.caption_batch = 4;
    cfg.data.train_samples = 24;
    cfg.train.batch_size = 8;
    cfg.train.epochs = Some(2);
    cfg.eval.samples = 16;
    cfg
}
