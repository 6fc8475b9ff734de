//! Staged pretraining of the base model and CARPE fine-tuning.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use carpe_numerics::Graph;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::corpus::{derive_rng, Corpus, Mixture, Question, SceneSample, Split, TaskKind, NUM_CLASSES};
use crate::ensemble::ContextDecision;
use crate::error::{CarpeError, Result};
use crate::model::{CarpeModel, ForwardOptions};
use crate::params::{ParamGroup, ParamStore};
use crate::train::checkpoint::{Checkpoint, RngState, StageRecord, STAGES};
use crate::train::optim::{AdamHyper, AdamState, AdamW, GroupHyper};
use crate::vision::{pretrain_objective, ProbeHead};

/// Append-only structured training log, optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct TrainLog {
    pub rows: Vec<Value>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            rows: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, row: Value) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

fn stage_record(store: &ParamStore, stage: &str) -> StageRecord {
    let def = STAGES.iter().find(|d| d.name == stage).expect("known stage");
    StageRecord {
        stage: stage.to_string(),
        group_hashes: def
            .groups
            .iter()
            .map(|g| (g.name().to_string(), store.group_hash(*g)))
            .collect(),
    }
}

fn only_trainable(store: &mut ParamStore, groups: &[ParamGroup]) {
    store.set_all_trainable(false);
    for g in groups {
        store.set_trainable(*g, true);
    }
    store.zero_grad();
}

fn uniform_groups(groups: &[ParamGroup], lr: f64) -> Vec<(ParamGroup, GroupHyper)> {
    groups
        .iter()
        .map(|g| (*g, GroupHyper { lr, weight_decay: 0.0 }))
        .collect()
}

/// Endless shuffled pass over `0..n`, reshuffled on every wrap.
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VisionStageMetrics {
    pub expert: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCurve {
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Exact-match caption accuracy of expert 0 on the caption training pool.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub vision: Vec<VisionStageMetrics>,
    pub text: LossCurve,
    pub caption: CaptionMetrics,
    /// Wall-clock seconds of stages A, B and C.
    pub stage_seconds: [f64; 3],
    pub seconds: f64,
}

/// Pretrains the base model: (A) each vision expert as a 20-way classifier,
/// (B) the LM on text-only QA, (C) adapters and `W_head` on image captions.
pub fn pretrain_all(cfg: &Config, corpus: &Corpus, log: &mut TrainLog) -> Result<(Checkpoint, PretrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let t = &cfg.train;
    let mut model = CarpeModel::new(cfg.model_config(corpus.vocab.len()))?;
    let mut stages = Vec::new();

    let mut stage_seconds = [0.0; 3];
    let mut lap = Instant::now();
    let mut tick = |i: usize| {
        stage_seconds[i] = lap.elapsed().as_secs_f64();
        lap = Instant::now();
    };

    let vision = pretrain_vision(&mut model, cfg, corpus, log)?;
    stages.push(stage_record(&model.store, "stage_a"));
    tick(0);

    let text = pretrain_text(&mut model, cfg, corpus, log)?;
    stages.push(stage_record(&model.store, "stage_b"));
    tick(1);

    let caption = pretrain_captions(&mut model, cfg, corpus, log)?;
    stages.push(stage_record(&model.store, "stage_c"));
    tick(2);

    model.store.set_all_trainable(false);
    model.store.zero_grad();
    let rng = derive_rng(t.seed, 0xBA5E);
    let ckpt = Checkpoint::from_model(&model, stages, RngState::capture(&rng), 0);
    let report = PretrainReport {
        vision,
        text,
        caption,
        stage_seconds,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}

fn class_of(s: &SceneSample) -> usize {
    match s.question {
        Question::Caption(l) | Question::Classify(l) => l.index(),
        _ => unreachable!("vision pretraining uses single-object samples"),
    }
}

fn pretrain_vision(
    model: &mut CarpeModel,
    cfg: &Config,
    corpus: &Corpus,
    log: &mut TrainLog,
) -> Result<Vec<VisionStageMetrics>> {
    let t = &cfg.train;
    let samples = corpus.samples(Split::VisionPretrain, cfg.data.seed, t.vision_samples, Mixture::default())?;
    let mut out = Vec::new();
    for e in 0..model.experts.len() {
        only_trainable(&mut model.store, &[ParamGroup::VisionEncoders]);
        let mut opt = AdamW::new(AdamHyper::default(), uniform_groups(&[ParamGroup::VisionEncoders], t.vision_lr));
        let enc = model.experts[e].clone();
        let mut head = ProbeHead::new(enc.cfg.width, NUM_CLASSES, &mut derive_rng(t.seed, 0xA0 + e as u64));
        let mut head_state = [AdamState::default(), AdamState::default()];
        let mut stream = IndexStream::new(samples.len(), derive_rng(t.seed, 0xA100 + e as u64));
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        for step in 0..t.vision_steps {
            let idx = stream.batch(t.vision_batch);
            let batch: Vec<_> = idx.iter().map(|&i| (&samples[i].image, class_of(&samples[i]))).collect();
            let mut g = Graph::new();
            let (loss, [w, b], _) = pretrain_objective(&mut g, &model.store, &enc, &head, &batch)?;
            g.backward(loss)?;
            model.store.accumulate_grads(&g, 1.0)?;
            let hyper = GroupHyper {
                lr: t.vision_head_lr,
                weight_decay: 0.0,
            };
            let (gw, gb) = (g.grad(w).map(<[f64]>::to_vec), g.grad(b).map(<[f64]>::to_vec));
            head_state[0].update(head.w.data_mut(), &gw.unwrap_or_default(), hyper, opt.hyper);
            head_state[1].update(head.b.data_mut(), &gb.unwrap_or_default(), hyper, opt.hyper);
            opt.step(&mut model.store)?;
            let l = g.item(loss);
            if step == 0 {
                first = l;
            }
            last = l;
            if step % 50 == 0 || step + 1 == t.vision_steps {
                log.push(json!({"stage": "stage_a", "expert": e, "step": step, "loss": l}))?;
            }
        }
        let mut correct = 0;
        for chunk in samples.chunks(64) {
            let batch: Vec<_> = chunk.iter().map(|s| (&s.image, class_of(s))).collect();
            let mut g = Graph::new();
            let (_, _, preds) = pretrain_objective(&mut g, &model.store, &enc, &head, &batch)?;
            correct += preds.iter().zip(&batch).filter(|(p, (_, c))| *p == c).count();
        }
        out.push(VisionStageMetrics {
            expert: e,
            initial_loss: first,
            final_loss: last,
            train_accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(out)
}

fn pretrain_text(model: &mut CarpeModel, cfg: &Config, corpus: &Corpus, log: &mut TrainLog) -> Result<LossCurve> {
    let t = &cfg.train;
    let groups = [ParamGroup::TokenEmbed, ParamGroup::LmBody, ParamGroup::WHead];
    only_trainable(&mut model.store, &groups);
    let mut opt = AdamW::new(AdamHyper::default(), uniform_groups(&groups, t.text_lr));
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..t.text_steps {
        let mut total = 0.0;
        for i in 0..t.text_batch {
            let s = corpus.text_qa_sample(cfg.data.seed, (step * t.text_batch + i) as u64)?;
            let mut g = Graph::new();
            let out = model.text_forward(&mut g, &s.prompt, &s.answer)?;
            let loss = g.cross_entropy(out.z, &out.lm.layout.targets(&s.answer))?;
            g.backward_scaled(loss, 1.0 / t.text_batch as f64)?;
            model.store.accumulate_grads(&g, 1.0)?;
            total += g.item(loss);
        }
        opt.step(&mut model.store)?;
        let l = total / t.text_batch as f64;
        if step == 0 {
            first = l;
        }
        last = l;
        if step % 50 == 0 || step + 1 == t.text_steps {
            log.push(json!({"stage": "stage_b", "step": step, "loss": l}))?;
        }
    }
    Ok(LossCurve {
        initial_loss: first,
        final_loss: last,
    })
}

/// Exact-match caption accuracy of the base model through `expert`.
pub fn caption_accuracy(model: &CarpeModel, expert: usize, samples: &[SceneSample]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        let pred = model.generate_base(expert, &s.image, &s.prompt, s.answer.len() + 1)?;
        correct += usize::from(pred == s.answer);
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn pretrain_captions(
    model: &mut CarpeModel,
    cfg: &Config,
    corpus: &Corpus,
    log: &mut TrainLog,
) -> Result<CaptionMetrics> {
    let t = &cfg.train;
    let samples = corpus.samples(Split::Caption, cfg.data.seed, t.caption_samples, Mixture::default())?;
    let probe = &samples[..samples.len().min(128)];
    let accuracy_before = caption_accuracy(model, 0, probe)?;
    let groups = [ParamGroup::Adapter, ParamGroup::WHead];
    only_trainable(&mut model.store, &groups);
    let mut opt = AdamW::new(AdamHyper::default(), uniform_groups(&groups, t.caption_lr));
    let mut stream = IndexStream::new(samples.len(), derive_rng(t.seed, 0xC0));
    let experts = model.experts.len();
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..t.caption_steps {
        let expert = step % experts;
        let mut total = 0.0;
        for i in stream.batch(t.caption_batch) {
            let s = &samples[i];
            let mut g = Graph::new();
            let out = model.base_forward(&mut g, expert, &s.image, &s.prompt, &s.answer)?;
            let loss = g.cross_entropy(out.z, &out.lm.layout.targets(&s.answer))?;
            g.backward_scaled(loss, 1.0 / t.caption_batch as f64)?;
            model.store.accumulate_grads(&g, 1.0)?;
            total += g.item(loss);
        }
        opt.step(&mut model.store)?;
        let l = total / t.caption_batch as f64;
        if step == 0 {
            first = l;
        }
        last = l;
        if step % 50 == 0 || step + 1 == t.caption_steps {
            log.push(json!({"stage": "stage_c", "step": step, "expert": expert, "loss": l}))?;
        }
    }
    model.reset_expert_calls();
    Ok(CaptionMetrics {
        initial_loss: first,
        final_loss: last,
        accuracy_before,
        accuracy_after: caption_accuracy(model, 0, probe)?,
    })
}

/// Groups updated by CARPE fine-tuning.
pub const FINETUNE_GROUPS: [ParamGroup; 6] = [
    ParamGroup::Adapter,
    ParamGroup::WHead,
    ParamGroup::Integrator,
    ParamGroup::ContextEncoder,
    ParamGroup::ContextPrompt,
    ParamGroup::Router,
];

/// Marks the fine-tuning groups trainable; the context encoder and prompt
/// only when `context` is set.
pub fn set_finetune_trainable(model: &mut CarpeModel, context: bool) {
    only_trainable(&mut model.store, &FINETUNE_GROUPS);
    model.store.set_trainable(ParamGroup::ContextEncoder, context);
    model.store.set_trainable(ParamGroup::ContextPrompt, context);
}

/// Loads a pretrained base checkpoint, attaches a fresh CARPE head and builds
/// the optimizer.
pub fn prepare_finetune(base: &Checkpoint, cfg: &Config) -> Result<(CarpeModel, AdamW)> {
    if !base.has_stage("stage_c") {
        return Err(CarpeError::Checkpoint(
            "base checkpoint lacks pretrained vision, language and adapter components".into(),
        ));
    }
    if base.meta.model.head.is_some() {
        return Err(CarpeError::Checkpoint("base checkpoint already carries a CARPE head".into()));
    }
    let mut model = base.to_model()?;
    model.attach_head(cfg.model.mode)?;
    let groups = FINETUNE_GROUPS.iter().map(|g| (*g, cfg.train.group_hyper(*g))).collect();
    Ok((model, AdamW::new(AdamHyper::default(), groups)))
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub decisions: Vec<ContextDecision>,
}

/// One optimizer step on the mean answer-token cross-entropy of `batch`.
pub fn carpe_step(model: &mut CarpeModel, opt: &mut AdamW, batch: &[&SceneSample]) -> Result<StepStats> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut decisions = Vec::with_capacity(batch.len());
    for s in batch {
        let mut g = Graph::new();
        let out = model.carpe_forward(&mut g, &s.image, &s.prompt, &s.answer, ForwardOptions::default())?;
        let loss = g.cross_entropy(out.z, &out.lm.layout.targets(&s.answer))?;
        g.backward_scaled(loss, 1.0 / n)?;
        model.store.accumulate_grads(&g, 1.0)?;
        total += g.item(loss);
        decisions.push(out.decision);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(CarpeError::Diverged(format!("loss became {loss}")));
    }
    opt.step(&mut model.store)?;
    Ok(StepStats { loss, decisions })
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub context_trainable: bool,
    pub expert_usage: Vec<u64>,
    pub mean_alpha: f64,
    pub mean_alpha_by_kind: BTreeMap<String, f64>,
    pub group_hashes: BTreeMap<String, String>,
}

pub struct FinetuneResult {
    pub checkpoint: Checkpoint,
    pub model: CarpeModel,
    pub initial_hashes: BTreeMap<String, String>,
    pub epochs: Vec<EpochReport>,
}

fn all_group_hashes(store: &ParamStore) -> BTreeMap<String, String> {
    ParamGroup::ALL
        .iter()
        .filter(|g| store.group_count(**g) > 0)
        .map(|g| (g.name().to_string(), store.group_hash(*g)))
        .collect()
}

/// CARPE fine-tuning on the mixed classification/reasoning stream. The
/// context encoder and prompt stay frozen for the first
/// `train.freeze_context_epochs` epochs.
pub fn finetune_carpe(base: &Checkpoint, cfg: &Config, corpus: &Corpus, log: &mut TrainLog) -> Result<FinetuneResult> {
    cfg.validate()?;
    let (mut model, mut opt) = prepare_finetune(base, cfg)?;
    let t = &cfg.train;
    let samples = corpus.samples(Split::Train, cfg.data.seed, cfg.data.train_samples, cfg.mixture()?)?;
    let initial_hashes = all_group_hashes(&model.store);
    let mut rng = derive_rng(t.seed, 0xF1E7);
    let experts = model.head()?.experts();
    let mut step = 0usize;
    let mut epochs = Vec::new();
    let epoch_count = cfg.epochs();
    for epoch in 1..=epoch_count {
        let context = epoch > t.freeze_context_epochs;
        set_finetune_trainable(&mut model, context);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut usage = vec![0u64; experts];
        let mut alpha_sum = 0.0;
        let mut by_kind: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let stats = carpe_step(&mut model, &mut opt, &batch)?;
            for (s, d) in batch.iter().zip(&stats.decisions) {
                usage[d.expert_index] += 1;
                alpha_sum += d.alpha;
                let e = by_kind.entry(s.task_kind).or_default();
                e.0 += d.alpha;
                e.1 += 1;
            }
            loss_sum += stats.loss;
            steps += 1;
            let lrs: BTreeMap<&str, f64> = opt
                .groups()
                .iter()
                .filter(|(g, _)| model.store.is_trainable(*g))
                .map(|(g, h)| (g.name(), h.lr))
                .collect();
            log.push(json!({"kind": "step", "step": step, "epoch": epoch, "loss": stats.loss, "lr": lrs}))?;
            step += 1;
        }
        let report = EpochReport {
            epoch,
            steps,
            mean_loss: loss_sum / steps as f64,
            context_trainable: context,
            expert_usage: usage,
            mean_alpha: alpha_sum / samples.len() as f64,
            mean_alpha_by_kind: by_kind
                .into_iter()
                .map(|(k, (sum, n))| (k.name().to_string(), sum / n as f64))
                .collect(),
            group_hashes: all_group_hashes(&model.store),
        };
        log.push(json!({
            "kind": "epoch",
            "epoch": epoch,
            "mean_loss": report.mean_loss,
            "expert_usage": report.expert_usage,
            "mean_alpha": report.mean_alpha,
            "mean_alpha_by_kind": report.mean_alpha_by_kind,
        }))?;
        epochs.push(report);
    }
    model.store.set_all_trainable(false);
    model.store.zero_grad();
    let mut checkpoint = Checkpoint::from_model(&model, base.meta.stages.clone(), RngState::capture(&rng), epoch_count as u32);
    checkpoint.record_stage("finetune")?;
    Ok(FinetuneResult {
        checkpoint,
        model,
        initial_hashes,
        epochs,
    })
}
