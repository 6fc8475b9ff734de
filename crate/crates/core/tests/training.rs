mod common;

use carpe_core::config::Config;
use carpe_core::corpus::{Corpus, Mixture, SceneSample, Split};
use carpe_core::model::{CarpeMode, ForwardOptions};
use carpe_core::params::{ParamGroup, ParamStore};
use carpe_core::train::checkpoint::{NamedTensor, RngState};
use carpe_core::train::optim::AdamState;
use carpe_core::train::pipeline::{carpe_step, prepare_finetune};
use carpe_core::train::{finetune_carpe, pretrain_all, wiseft_merge, AdamHyper, AdamW, Checkpoint, GroupHyper, TrainLog};
use carpe_core::CarpeError;
use carpe_numerics::{Graph, Tensor};
use common::*;
use std::sync::OnceLock;

fn base() -> &'static Checkpoint {
    static BASE: OnceLock<Checkpoint> = OnceLock::new();
    BASE.get_or_init(|| pretrain_all(&tiny_run_config(), &Corpus::new().unwrap(), &mut TrainLog::new()).unwrap().0)
}

fn checkpoint(seed: u64) -> Checkpoint {
    let mut model = tiny_model(Some(CarpeMode::Moe));
    jitter(&mut model, seed, 0.1);
    Checkpoint::from_model(&model, Vec::new(), RngState::capture(&carpe_core::corpus::derive_rng(seed, 0)), 0)
}

const PLAIN: GroupHyper = GroupHyper {
    lr: 0.05,
    weight_decay: 0.0,
};

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = vec![1.5, -2.0, 0.25];
    let mut st = AdamState::default();
    for _ in 0..10 {
        st.update(&mut p, &[0.0; 3], PLAIN, AdamHyper::default());
    }
    assert_eq!(p, vec![1.5, -2.0, 0.25]);
}

#[test]
fn quadratic_converges_to_its_minimum() {
    // f(x) = 2 (x − 3)², minimized at x = 3.
    let mut x = vec![-4.0];
    let mut st = AdamState::default();
    for _ in 0..3000 {
        let g = 4.0 * (x[0] - 3.0);
        st.update(&mut x, &[g], PLAIN, AdamHyper::default());
    }
    assert!((x[0] - 3.0).abs() < 1e-3, "{}", x[0]);
}

fn two_group_store() -> ParamStore {
    let mut s = ParamStore::new();
    s.add("a", ParamGroup::Adapter, Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
    s.add("w", ParamGroup::WHead, Tensor::vector(vec![3.0, 4.0]).with_requires_grad(true));
    s
}

#[test]
fn zero_learning_rate_group_never_moves() {
    let mut s = two_group_store();
    let mut opt = AdamW::new(
        AdamHyper::default(),
        vec![
            (ParamGroup::Adapter, GroupHyper { lr: 0.0, weight_decay: 0.01 }),
            (ParamGroup::WHead, PLAIN),
        ],
    );
    for _ in 0..5 {
        for id in s.ids().collect::<Vec<_>>() {
            s.tensor_mut(id).accumulate_grad(&[0.3, -0.7]).unwrap();
        }
        opt.step(&mut s).unwrap();
    }
    assert_eq!(s.entries()[0].tensor.data(), &[1.0, 2.0]);
    assert_ne!(s.entries()[1].tensor.data(), &[3.0, 4.0]);
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let mut s = two_group_store();
    let mut opt = AdamW::new(AdamHyper::default(), vec![(ParamGroup::Adapter, PLAIN), (ParamGroup::WHead, PLAIN)]);
    s.tensor_mut(s.id("a").unwrap()).accumulate_grad(&[0.1, 0.1]).unwrap();
    s.tensor_mut(s.id("w").unwrap()).accumulate_grad(&[f64::NAN, 0.0]).unwrap();
    let err = opt.step(&mut s).unwrap_err();
    assert!(matches!(&err, CarpeError::Diverged(m) if m.contains('w')), "{err}");
    assert_eq!(s.entries()[0].tensor.data(), &[1.0, 2.0]);
}

#[test]
fn groups_partition_every_parameter() {
    let model = tiny_model(Some(CarpeMode::Moe));
    let total: usize = ParamGroup::ALL.iter().map(|g| model.store.group_count(*g)).sum();
    assert_eq!(total, model.store.entries().iter().map(|e| e.tensor.numel()).sum::<usize>());
    assert!(ParamGroup::ALL.iter().all(|g| model.store.group_count(*g) > 0));
    for g in ParamGroup::ALL {
        assert_eq!(ParamGroup::from_name(g.name()), Some(g));
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ck = checkpoint(1);
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..10], b"CARPE-CKPT");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = checkpoint(2).to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CarpeError::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(CarpeError::Checkpoint(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CarpeError::Checkpoint(_))));
}

#[test]
fn stage_manifest_is_enforced() {
    let ck = base();
    for s in ["stage_a", "stage_b", "stage_c"] {
        assert!(ck.has_stage(s));
    }
    ck.to_model().unwrap();

    let mut skipped = ck.clone();
    skipped.meta.stages.retain(|s| s.stage != "stage_a");
    assert!(matches!(skipped.to_model(), Err(CarpeError::Checkpoint(_))));

    let mut tampered = ck.clone();
    let t = tampered.tensors.iter_mut().find(|t| t.group == ParamGroup::VisionEncoders).unwrap();
    t.tensor.data_mut()[0] += 1.0;
    assert!(matches!(tampered.to_model(), Err(CarpeError::Checkpoint(_))));
}

#[test]
fn merge_endpoints_are_exact_copies() {
    let (a, b) = (checkpoint(3), checkpoint(4));
    assert_eq!(wiseft_merge(&a, &b, 0.0).unwrap().to_bytes().unwrap(), a.to_bytes().unwrap());
    assert_eq!(wiseft_merge(&a, &b, 1.0).unwrap().to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn merge_interpolates_scalars() {
    let scalar = |v: f64| {
        let mut ck = checkpoint(5);
        ck.tensors = vec![NamedTensor {
            name: "x".into(),
            group: ParamGroup::Adapter,
            tensor: Tensor::vector(vec![v]),
        }];
        ck
    };
    let m = wiseft_merge(&scalar(2.0), &scalar(4.0), 0.5).unwrap();
    assert_eq!(m.tensors[0].tensor.data(), &[3.0]);
}

#[test]
fn merge_interpolates_every_tensor() {
    let (a, b) = (checkpoint(6), checkpoint(7));
    let m = wiseft_merge(&a, &b, 0.25).unwrap();
    for ((ta, tb), tm) in a.tensors.iter().zip(&b.tensors).zip(&m.tensors) {
        for ((x, y), z) in ta.tensor.data().iter().zip(tb.tensor.data()).zip(tm.tensor.data()) {
            assert!((0.75 * x + 0.25 * y - z).abs() < 1e-15);
        }
    }
}

#[test]
fn merge_rejects_structure_mismatch() {
    let (a, mut b) = (checkpoint(8), checkpoint(9));
    b.tensors.pop();
    assert!(matches!(wiseft_merge(&a, &b, 0.5), Err(CarpeError::Checkpoint(_))));
    let mut c = checkpoint(9);
    c.tensors[0].name = "renamed".into();
    assert!(matches!(wiseft_merge(&a, &c, 0.5), Err(CarpeError::Checkpoint(_))));
}

#[test]
fn loss_gradient_is_zero_outside_answer_rows() {
    let mut model = tiny_model(Some(CarpeMode::Moe));
    jitter(&mut model, 10, 0.3);
    let answer = [20, 21, 22];
    let mut g = Graph::new();
    let out = model
        .carpe_forward(&mut g, &random_image(10), &random_tokens(5, 10), &answer, ForwardOptions::default())
        .unwrap();
    // Only leaves keep gradients, so re-root the logits.
    let z = g.input(&g.tensor(out.z).with_requires_grad(true));
    let loss = g.cross_entropy(z, &out.lm.layout.targets(&answer)).unwrap();
    g.backward(loss).unwrap();
    let grad = dense::rows(&Tensor::new(g.shape(z).to_vec(), g.grad(z).unwrap().to_vec()).unwrap());
    let ctx = out.lm.layout.ctx_pos();
    for (i, row) in grad.iter().enumerate() {
        if i < ctx {
            assert!(row.iter().all(|&v| v == 0.0), "row {i}");
        } else {
            assert!(row.iter().any(|&v| v != 0.0), "row {i}");
        }
    }
}

#[test]
fn finetune_follows_the_freeze_schedule() {
    let cfg = tiny_run_config();
    let corpus = Corpus::new().unwrap();
    let r = finetune_carpe(base(), &cfg, &corpus, &mut TrainLog::new()).unwrap();
    assert_eq!(r.epochs.len(), 2);
    let (e1, e2) = (&r.epochs[0], &r.epochs[1]);
    assert!(!e1.context_trainable && e2.context_trainable);
    for g in ["context_encoder", "context_prompt"] {
        assert_eq!(e1.group_hashes[g], r.initial_hashes[g], "{g} moved in epoch 1");
        assert_ne!(e2.group_hashes[g], e1.group_hashes[g], "{g} frozen in epoch 2");
    }
    for g in ["vision_encoders", "lm_body", "token_embed"] {
        assert_eq!(r.checkpoint.group_hash(ParamGroup::from_name(g).unwrap()), r.initial_hashes[g]);
        assert_eq!(r.checkpoint.group_hash(ParamGroup::from_name(g).unwrap()), base().group_hash(ParamGroup::from_name(g).unwrap()));
    }
    for g in ["adapter", "w_head", "integrator", "router"] {
        assert_ne!(e1.group_hashes[g], r.initial_hashes[g], "{g} did not train");
    }
    assert!(r.checkpoint.has_stage("finetune"));
    r.checkpoint.to_model().unwrap();
}

#[test]
fn finetune_is_deterministic() {
    let cfg = tiny_run_config();
    let corpus = Corpus::new().unwrap();
    let run = || finetune_carpe(base(), &cfg, &corpus, &mut TrainLog::new()).unwrap().checkpoint.to_bytes().unwrap();
    assert_eq!(run(), run());
}

#[test]
fn finetune_needs_a_complete_base() {
    let cfg = tiny_run_config();
    let mut partial = base().clone();
    partial.meta.stages.retain(|s| s.stage != "stage_c");
    assert!(matches!(prepare_finetune(&partial, &cfg), Err(CarpeError::Checkpoint(_))));
    let finetuned = finetune_carpe(base(), &cfg, &Corpus::new().unwrap(), &mut TrainLog::new()).unwrap();
    assert!(matches!(prepare_finetune(&finetuned.checkpoint, &cfg), Err(CarpeError::Checkpoint(_))));
}

#[test]
fn fixed_batch_is_memorized() {
    let cfg = tiny_run_config();
    let corpus = Corpus::new().unwrap();
    let samples = corpus.samples(Split::Train, 0, 32, Mixture::default()).unwrap();
    let batch: Vec<&SceneSample> = samples.iter().collect();
    let (mut model, mut opt) = prepare_finetune(base(), &cfg).unwrap();
    carpe_core::train::pipeline::set_finetune_trainable(&mut model, true);
    let mut loss = f64::INFINITY;
    for _ in 0..500 {
        loss = carpe_step(&mut model, &mut opt, &batch).unwrap().loss;
    }
    assert!(loss < 0.05, "final loss {loss}");
}

#[test]
fn pretrain_log_and_report_cover_all_stages() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut log = TrainLog::to_file(&path).unwrap();
    let (_, report) = pretrain_all(&tiny_run_config(), &Corpus::new().unwrap(), &mut log).unwrap();
    assert_eq!(report.vision.len(), 4);
    assert!(report.stage_seconds.iter().all(|s| *s >= 0.0));
    let text = std::fs::read_to_string(&path).unwrap();
    for stage in ["stage_a", "stage_b", "stage_c"] {
        assert!(text.contains(stage), "{stage} missing from log");
    }
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn empty_toml_gives_defaults() {
    assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    let cfg = Config::default();
    assert_eq!(Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
}

#[test]
fn overrides_reach_nested_keys() {
    let cfg = Config::from_toml_with_overrides(
        "[train]\nepochs = 5\n",
        &["train.batch_size=7".into(), "model.mode=single".into(), "data.mix=[1, 0]".into()],
    )
    .unwrap();
    assert_eq!(cfg.train.epochs, Some(5));
    assert_eq!(cfg.train.batch_size, 7);
    assert_eq!(cfg.model.mode, CarpeMode::Single);
    assert_eq!(cfg.data.mix, [1, 0]);
    assert_eq!(Config::default().epochs(), 3);
    assert_eq!(cfg.mixture().unwrap(), Mixture::new(1, 0).unwrap());
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let cfg = Config::from_toml_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, Config::default());
    assert_eq!(Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
}

#[test]
fn bad_configs_are_rejected() {
    for src in ["[train]\nbogus = 1\n", "[data]\nmix = [0, 0]\n", "[data]\nmix = [-1, 3]\n", "[train.lr_overrides]\nnope = 0.1\n"] {
        assert!(matches!(Config::from_toml_str(src), Err(CarpeError::Config(_))), "{src}");
    }
    assert!(matches!(
        Config::from_toml_with_overrides("", &["train.nothing=3".into()]),
        Err(CarpeError::Config(_))
    ));
}

#[test]
fn learning_rates_keep_the_one_to_ten_ratio() {
    let cfg = Config::default();
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.train.group_hyper(ParamGroup::Adapter).lr, 2e-4);
    assert_eq!(cfg.train.group_hyper(ParamGroup::Integrator).lr, 2e-3);
    assert_eq!(cfg.train.group_hyper(ParamGroup::ContextPrompt).weight_decay, 0.0);
    assert_eq!(cfg.train.group_hyper(ParamGroup::Router).weight_decay, 0.01);
    let full = cfg.train.clone().with_full_scale_lrs();
    assert_eq!(full.group_hyper(ParamGroup::Adapter).lr, 2e-5);
    assert_eq!(full.group_hyper(ParamGroup::WHead).lr, 2e-4);

    let mut tuned = Config::default();
    tuned.train.lr_overrides.insert("router".into(), 0.5);
    assert_eq!(tuned.train.group_hyper(ParamGroup::Router).lr, 0.5);
}
