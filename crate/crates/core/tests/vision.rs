mod common;

use std::collections::HashSet;

use carpe_core::corpus::{derive_rng, Corpus, Mixture, Question, Split, IMAGE_SIZE};
use carpe_core::model::{CarpeModel, ModelConfig};
use carpe_core::params::ParamStore;
use carpe_core::vision::{default_experts, pool, pretrain_objective, ProbeHead, VisionEncoder};
use carpe_core::CarpeError;
use carpe_numerics::{Graph, NumericsError, Tensor};
use common::*;
use sha2::{Digest, Sha256};

fn encoder(patch: usize) -> (ParamStore, VisionEncoder) {
    let mut cfg = default_experts()[0];
    cfg.patch_size = patch;
    let mut store = ParamStore::new();
    let enc = VisionEncoder::new(&mut store, 0, cfg, &mut derive_rng(cfg.seed, 0)).unwrap();
    (store, enc)
}

#[test]
fn zero_image_gives_identical_patch_embeddings() {
    let (store, enc) = encoder(8);
    let mut g = Graph::new();
    let x = enc.embed_patches(&mut g, &store, &Tensor::zeros(&[3, IMAGE_SIZE, IMAGE_SIZE])).unwrap();
    let rows = dense::rows(&g.tensor(x));
    assert_eq!(rows.len(), 16);
    for r in &rows[1..] {
        assert_eq!(bits(r), bits(&rows[0]));
    }
}

#[test]
fn patch_four_gives_sixty_four_rows() {
    let (store, enc) = encoder(4);
    let f = enc.encode_tensor(&store, &random_image(0)).unwrap();
    assert_eq!(f.shape(), &[64, 32]);
}

#[test]
fn encode_is_deterministic_for_a_seed() {
    let digest = || {
        let (store, enc) = encoder(8);
        let f = enc.encode_tensor(&store, &random_image(3)).unwrap();
        let mut h = Sha256::new();
        for v in f.data() {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    };
    assert_eq!(digest(), digest());
}

#[test]
fn wrong_image_shape_is_a_shape_error() {
    let (store, enc) = encoder(8);
    for shape in [[3, 16, 16], [1, 32, 32], [3, 32, 31]] {
        let err = enc.encode_tensor(&store, &Tensor::zeros(&shape));
        assert!(matches!(err, Err(CarpeError::Numerics(NumericsError::Shape { .. }))), "{shape:?}");
    }
}

#[test]
fn pool_of_one_patch_is_identity() {
    let row = vec![0.25, -1.5, 3.0];
    assert_eq!(pool(&Tensor::new(vec![1, 3], row.clone()).unwrap()), row);
}

#[test]
fn pool_of_two_unit_patches_is_half() {
    assert_eq!(pool(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()), vec![0.5, 0.5]);
}

#[test]
fn pool_matches_loop_mean() {
    let m = random_matrix(64, 48, 11);
    let mut want = vec![0.0; 48];
    for c in 0..48 {
        let mut s = 0.0;
        for r in &m {
            s += r[c];
        }
        want[c] = s / 64.0;
    }
    assert!(dense::max_abs_diff(&pool(&tensor(&m)), &want) < 1e-12);
}

fn labelled_batch(n: usize) -> Vec<(Tensor, usize)> {
    let corpus = Corpus::new().unwrap();
    corpus
        .samples(Split::VisionPretrain, 0, n, Mixture::default())
        .unwrap()
        .into_iter()
        .map(|s| match s.question {
            Question::Classify(l) | Question::Caption(l) => (s.image, l.index()),
            q => panic!("unexpected question {q:?}"),
        })
        .collect()
}

#[test]
fn untrained_encoder_loss_is_near_uniform() {
    let data = labelled_batch(64);
    let batch: Vec<_> = data.iter().map(|(i, c)| (i, *c)).collect();
    let (store, enc) = encoder(8);
    let head = ProbeHead::new(32, 20, &mut derive_rng(0, 1));
    let mut g = Graph::new();
    let (loss, _, _) = pretrain_objective(&mut g, &store, &enc, &head, &batch).unwrap();
    let l = g.item(loss);
    assert!((l - 20f64.ln()).abs() < 0.5, "initial loss {l}");
}

#[test]
fn frozen_encoder_reevaluates_to_the_same_loss() {
    let data = labelled_batch(16);
    let batch: Vec<_> = data.iter().map(|(i, c)| (i, *c)).collect();
    let (store, enc) = encoder(4);
    let head = ProbeHead::new(32, 20, &mut derive_rng(0, 1));
    let eval = || {
        let mut g = Graph::new();
        let (loss, _, preds) = pretrain_objective(&mut g, &store, &enc, &head, &batch).unwrap();
        (g.item(loss).to_bits(), preds)
    };
    assert_eq!(eval(), eval());
}

#[test]
fn default_experts_are_pairwise_distinct_and_paired_with_adapters() {
    let experts = default_experts();
    assert_eq!(experts.len(), 4);
    let shapes: HashSet<_> = experts.iter().map(|e| (e.patch_size, e.width)).collect();
    assert_eq!(shapes, HashSet::from([(4, 32), (4, 48), (8, 32), (8, 48)]));
    let seeds: HashSet<_> = experts.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), 4);

    let model = CarpeModel::new(ModelConfig::toy_default(VOCAB)).unwrap();
    assert_eq!(model.adapters.len(), model.experts.len());
}
