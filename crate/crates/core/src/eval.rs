//! Zero-shot evaluation, linear probing and the context-weight report.

use std::collections::{BTreeMap, HashMap};

use carpe_numerics::Graph;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::corpus::{derive_rng, Corpus, Question, SceneSample, Split, TaskKind};
use crate::ensemble::ContextDecision;
use crate::error::{CarpeError, Result};
use crate::model::{CarpeModel, ForwardOptions, Stream};
use crate::vision::pool;

pub const REPORT_FORMAT: u32 = 1;

/// `cfg.eval.samples` samples of `split` drawn with the held-out eval seed.
pub fn eval_samples(corpus: &Corpus, cfg: &Config, split: Split) -> Result<Vec<SceneSample>> {
    corpus.samples(split, cfg.eval.seed, cfg.eval.samples, cfg.mixture()?)
}

/// Lowercases, drops punctuation and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// How answers are decoded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoder {
    /// CARPE greedy decoding over the chosen logit stream.
    Carpe { force_alpha: Option<f64>, stream: Stream },
    /// The base LVLM through one expert. Reported as `α = 0`, `β = 1`.
    Base { expert: usize },
}

impl Default for Decoder {
    fn default() -> Self {
        Decoder::Carpe {
            force_alpha: None,
            stream: Stream::Ensemble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: u64,
    pub task_kind: TaskKind,
    pub prediction: String,
    pub gold: String,
    pub correct: bool,
    pub alpha: f64,
    pub beta: f64,
    pub expert_index: usize,
    pub gate_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub split: String,
    pub n: usize,
    pub accuracy: f64,
    /// Accuracy keyed by the normalized gold answer.
    pub per_class: BTreeMap<String, f64>,
    pub mean_alpha: f64,
    pub mean_beta: f64,
    pub expert_usage: Vec<u64>,
    #[serde(skip)]
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(split: &str, experts: usize, rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CarpeError::Data(format!("evaluation split {split:?} is empty")));
        }
        let n = rows.len();
        let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut usage = vec![0u64; experts];
        let (mut correct, mut sa, mut sb) = (0, 0.0, 0.0);
        for r in &rows {
            let e = per.entry(r.gold.clone()).or_default();
            e.1 += 1;
            if r.correct {
                e.0 += 1;
                correct += 1;
            }
            sa += r.alpha;
            sb += r.beta;
            if r.expert_index < experts {
                usage[r.expert_index] += 1;
            }
        }
        Ok(Self {
            format_version: REPORT_FORMAT,
            split: split.to_string(),
            n,
            accuracy: correct as f64 / n as f64,
            per_class: per.into_iter().map(|(k, (c, t))| (k, c as f64 / t as f64)).collect(),
            mean_alpha: sa / n as f64,
            mean_beta: sb / n as f64,
            expert_usage: usage,
            rows,
        })
    }

    /// One JSON document per sample.
    pub fn rows_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "split {}  n {}  accuracy {:.4}  mean alpha {:.4}  mean beta {:.4}  experts {:?}\n",
            self.split, self.n, self.accuracy, self.mean_alpha, self.mean_beta, self.expert_usage
        );
        for (k, v) in &self.per_class {
            s.push_str(&format!("  {k:<24} {v:.4}\n"));
        }
        s
    }
}

/// Greedy generation and exact match against the normalized gold answer.
pub fn eval_zero_shot(
    model: &CarpeModel,
    corpus: &Corpus,
    split: &str,
    samples: &[SceneSample],
    decoder: Decoder,
    max_tokens: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let (tokens, dec) = match decoder {
            Decoder::Carpe { force_alpha, stream } => {
                let opts = ForwardOptions {
                    force_alpha,
                    decision: None,
                };
                model.generate(&s.image, &s.prompt, max_tokens, opts, stream)?
            }
            Decoder::Base { expert } => {
                let t = model.generate_base(expert, &s.image, &s.prompt, max_tokens)?;
                let dec = ContextDecision {
                    alpha: 0.0,
                    beta: 1.0,
                    expert_index: expert,
                    gate_prob: 1.0,
                };
                (t, dec)
            }
        };
        let prediction = normalize_answer(&corpus.vocab.detokenize(&tokens));
        let gold = normalize_answer(&corpus.vocab.detokenize(&s.answer));
        rows.push(EvalRow {
            sample_id: s.id,
            task_kind: s.task_kind,
            correct: prediction == gold,
            prediction,
            gold,
            alpha: dec.alpha,
            beta: dec.beta,
            expert_index: dec.expert_index,
            gate_prob: dec.gate_prob,
        });
    }
    EvalReport::from_rows(split, model.experts.len(), rows)
}

/// Stratified fold assignment over groups of samples. Samples sharing a group
/// key always land in the same fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: usize,
    fold_of: Vec<usize>,
}

impl FoldPlan {
    pub fn new(labels: &[usize], groups: &[u64], k: usize, folds: usize, seed: u64) -> Result<Self> {
        if labels.len() != groups.len() {
            return Err(CarpeError::Data("labels and groups differ in length".into()));
        }
        if folds < 2 {
            return Err(CarpeError::Data("at least two folds are required".into()));
        }
        let mut group_ids: HashMap<u64, usize> = HashMap::new();
        let mut group_label = Vec::new();
        let mut sample_group = Vec::with_capacity(labels.len());
        for (&y, &key) in labels.iter().zip(groups) {
            if y >= k {
                return Err(CarpeError::Data(format!("label {y} outside {k} classes")));
            }
            let id = *group_ids.entry(key).or_insert_with(|| {
                group_label.push(y);
                group_label.len() - 1
            });
            if group_label[id] != y {
                return Err(CarpeError::Data("one group carries two labels".into()));
            }
            sample_group.push(id);
        }
        let mut rng = derive_rng(seed, 0xF01D);
        let mut group_fold = vec![0; group_label.len()];
        let mut offset = 0;
        for class in 0..k {
            let mut members: Vec<usize> = (0..group_label.len()).filter(|&g| group_label[g] == class).collect();
            if members.len() < folds {
                return Err(CarpeError::Data(format!(
                    "class {class} has {} distinct samples, fewer than {folds} folds",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            for (pos, &g) in members.iter().enumerate() {
                group_fold[g] = (pos + offset) % folds;
            }
            offset += members.len();
        }
        Ok(Self {
            folds,
            fold_of: sample_group.into_iter().map(|g| group_fold[g]).collect(),
        })
    }

    pub fn fold(&self, sample: usize) -> usize {
        self.fold_of[sample]
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }
}

/// Group key that identifies exact duplicate `(vector, label)` pairs.
pub fn feature_key(x: &[f64], y: usize) -> u64 {
    let mut h = Sha256::new();
    h.update((y as u64).to_le_bytes());
    for v in x {
        h.update(v.to_bits().to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

const PROBE_L2: f64 = 1e-4;
const PROBE_MAX_ITERS: usize = 2000;
const PROBE_GRAD_TOL: f64 = 1e-7;

/// Mean held-fold accuracy of a multinomial logistic-regression probe.
pub fn linear_probe(features: &[(Vec<f64>, usize)], k: usize, folds: usize) -> Result<f64> {
    let labels: Vec<usize> = features.iter().map(|(_, y)| *y).collect();
    let keys: Vec<u64> = features.iter().map(|(x, y)| feature_key(x, *y)).collect();
    let plan = FoldPlan::new(&labels, &keys, k, folds, 0)?;
    linear_probe_with_plan(features, k, &plan)
}

pub fn linear_probe_with_plan(features: &[(Vec<f64>, usize)], k: usize, plan: &FoldPlan) -> Result<f64> {
    if features.len() != plan.len() {
        return Err(CarpeError::Data("fold plan does not match the feature set".into()));
    }
    let d = features.first().map_or(0, |(x, _)| x.len());
    if d == 0 || features.iter().any(|(x, _)| x.len() != d) {
        return Err(CarpeError::Data("probe features must be non-empty and of equal width".into()));
    }
    let mut total = 0.0;
    for f in 0..plan.folds {
        let train: Vec<usize> = (0..features.len()).filter(|&i| plan.fold(i) != f).collect();
        let test: Vec<usize> = (0..features.len()).filter(|&i| plan.fold(i) == f).collect();
        let probe = Probe::fit(features, &train, k)?;
        let hits = test.iter().filter(|&&i| probe.predict(&features[i].0) == features[i].1).count();
        total += hits as f64 / test.len() as f64;
    }
    Ok(total / plan.folds as f64)
}

struct Probe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[k × (d + 1)]`, bias last.
    w: Vec<f64>,
    k: usize,
}

impl Probe {
    fn fit(data: &[(Vec<f64>, usize)], idx: &[usize], k: usize) -> Result<Self> {
        let d = data[idx[0]].0.len();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(&data[i].0) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for &i in idx {
            for j in 0..d {
                scale[j] += (data[i].0[j] - mean[j]).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let xs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                let mut x: Vec<f64> = (0..d).map(|j| (data[i].0[j] - mean[j]) * scale[j]).collect();
                x.push(1.0);
                x
            })
            .collect();
        let ys: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();

        let mut w = vec![0.0; k * (d + 1)];
        let (mut loss, mut grad) = objective(&xs, &ys, &w, k);
        let mut step = 1.0;
        for _ in 0..PROBE_MAX_ITERS {
            let gn2: f64 = grad.iter().map(|g| g * g).sum();
            if gn2.sqrt() < PROBE_GRAD_TOL {
                break;
            }
            step *= 2.0;
            loop {
                let cand: Vec<f64> = w.iter().zip(&grad).map(|(w, g)| w - step * g).collect();
                let (l, gr) = objective(&xs, &ys, &cand, k);
                if l <= loss - 0.5 * step * gn2 {
                    w = cand;
                    loss = l;
                    grad = gr;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    return finish(mean, scale, w, k);
                }
            }
        }
        finish(mean, scale, w, k)
    }

    fn predict(&self, x: &[f64]) -> usize {
        let d = x.len();
        let scores: Vec<f64> = (0..self.k)
            .map(|c| {
                let row = &self.w[c * (d + 1)..(c + 1) * (d + 1)];
                let mut s = row[d];
                for j in 0..d {
                    s += row[j] * (x[j] - self.mean[j]) * self.scale[j];
                }
                s
            })
            .collect();
        crate::argmax(&scores)
    }
}

fn finish(mean: Vec<f64>, scale: Vec<f64>, w: Vec<f64>, k: usize) -> Result<Probe> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(CarpeError::Diverged("linear probe weights are not finite".into()));
    }
    Ok(Probe { mean, scale, w, k })
}

/// Mean cross-entropy plus an L2 penalty on non-bias weights, with gradient.
fn objective(xs: &[Vec<f64>], ys: &[usize], w: &[f64], k: usize) -> (f64, Vec<f64>) {
    let dd = xs[0].len();
    let n = xs.len() as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; k];
    for (x, &y) in xs.iter().zip(ys) {
        for c in 0..k {
            z[c] = w[c * dd..(c + 1) * dd].iter().zip(x).map(|(a, b)| a * b).sum();
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += (lse - z[y]) / n;
        for c in 0..k {
            let p = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
            for (g, xv) in grad[c * dd..(c + 1) * dd].iter_mut().zip(x) {
                *g += p * xv / n;
            }
        }
    }
    for c in 0..k {
        for j in 0..dd - 1 {
            let v = w[c * dd + j];
            loss += 0.5 * PROBE_L2 * v * v;
            grad[c * dd + j] += PROBE_L2 * v;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    VisionPooled,
    LlmPooled,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::VisionPooled => "vision_pooled",
            FeatureSource::LlmPooled => "llm_pooled",
        }
    }
}

/// Pooled features per sample. Vision features come from the expert the model
/// would route to (expert 0 without a head); LLM features average `H_llm` over
/// every position before the answer.
/// Vision features all come from one encoder so every row has the same width:
/// the expert the router picks most often on `samples`, lowest index on ties.
pub fn probe_features(model: &CarpeModel, samples: &[SceneSample], source: FeatureSource) -> Result<Vec<Vec<f64>>> {
    let expert = match (source, &model.head) {
        (FeatureSource::VisionPooled, Some(_)) => {
            let mut counts = vec![0usize; model.experts.len()];
            for s in samples {
                counts[model.context_decision(&s.prompt)?.expert_index] += 1;
            }
            let top = counts.iter().copied().max().unwrap_or(0);
            counts.iter().position(|&c| c == top).unwrap_or(0)
        }
        _ => 0,
    };
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            match source {
                FeatureSource::VisionPooled => {
                    let v = model.encode(&mut g, expert, &s.image)?;
                    Ok(pool(&g.tensor(v)))
                }
                FeatureSource::LlmPooled => {
                    let h = match model.head {
                        Some(_) => model.carpe_forward(&mut g, &s.image, &s.prompt, &[], ForwardOptions::default())?.lm.h_llm,
                        None => model.base_forward(&mut g, 0, &s.image, &s.prompt, &[])?.lm.h_llm,
                    };
                    Ok(pool(&g.tensor(h)))
                }
            }
        })
        .collect()
}

/// Classification labels of `samples` mapped to contiguous class indices.
pub fn probe_labels(samples: &[SceneSample]) -> Result<(Vec<usize>, usize)> {
    let mut raw = Vec::with_capacity(samples.len());
    for s in samples {
        match s.question {
            Question::Classify(l) | Question::Caption(l) => raw.push(l.index()),
            _ => return Err(CarpeError::Data(format!("sample {} is not a classification sample", s.id))),
        }
    }
    let mut classes = raw.clone();
    classes.sort_unstable();
    classes.dedup();
    let labels = raw.iter().map(|r| classes.binary_search(r).expect("present")).collect();
    Ok((labels, classes.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub format_version: u32,
    pub split: String,
    pub source: FeatureSource,
    pub n: usize,
    pub classes: usize,
    pub probe_accuracy: f64,
    pub zero_shot_accuracy: f64,
}

/// Probes every source on one fold plan keyed by sample id, next to the
/// zero-shot accuracy on the same samples.
pub fn probe_report(
    model: &CarpeModel,
    corpus: &Corpus,
    split: &str,
    samples: &[SceneSample],
    sources: &[FeatureSource],
    folds: usize,
    seed: u64,
    max_tokens: usize,
) -> Result<Vec<ProbeReport>> {
    let (labels, k) = probe_labels(samples)?;
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let plan = FoldPlan::new(&labels, &ids, k, folds, seed)?;
    let decoder = match model.head {
        Some(_) => Decoder::default(),
        None => Decoder::Base { expert: 0 },
    };
    let zero_shot = eval_zero_shot(model, corpus, split, samples, decoder, max_tokens)?.accuracy;
    sources
        .iter()
        .map(|&source| {
            let feats = probe_features(model, samples, source)?;
            let data: Vec<(Vec<f64>, usize)> = feats.into_iter().zip(labels.iter().copied()).collect();
            Ok(ProbeReport {
                format_version: REPORT_FORMAT,
                split: split.to_string(),
                source,
                n: samples.len(),
                classes: k,
                probe_accuracy: linear_probe_with_plan(&data, k, &plan)?,
                zero_shot_accuracy: zero_shot,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTrace {
    pub sample_id: u64,
    pub task_kind: TaskKind,
    pub alpha: f64,
    pub beta: f64,
    pub expert_index: usize,
    pub gate_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub task_kind: TaskKind,
    pub n: usize,
    pub mean_alpha: f64,
    pub mean_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub format_version: u32,
    pub rows: Vec<ContextRow>,
    #[serde(skip)]
    pub traces: Vec<ContextTrace>,
}

impl ContextReport {
    /// Means per task kind recomputed from per-sample traces.
    pub fn from_traces(traces: Vec<ContextTrace>, kinds: &[TaskKind]) -> Result<Self> {
        let mut rows = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let sel: Vec<&ContextTrace> = traces.iter().filter(|t| t.task_kind == kind).collect();
            if sel.is_empty() {
                return Err(CarpeError::Data(format!("no {} prompts to report", kind.name())));
            }
            let n = sel.len() as f64;
            rows.push(ContextRow {
                task_kind: kind,
                n: sel.len(),
                mean_alpha: sel.iter().map(|t| t.alpha).sum::<f64>() / n,
                mean_beta: sel.iter().map(|t| t.beta).sum::<f64>() / n,
            });
        }
        Ok(Self {
            format_version: REPORT_FORMAT,
            rows,
            traces,
        })
    }

    pub fn row(&self, kind: TaskKind) -> Option<&ContextRow> {
        self.rows.iter().find(|r| r.task_kind == kind)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>8} {:>8}\n", "task", "n", "alpha", "beta");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:>6} {:>8.4} {:>8.4}\n",
                r.task_kind.name(),
                r.n,
                r.mean_alpha,
                r.mean_beta
            ));
        }
        s
    }
}

/// Mean `(α, β)` per task kind over prompt sets, one row per set.
pub fn report_context_weights(model: &CarpeModel, sets: &[(TaskKind, &[SceneSample])]) -> Result<ContextReport> {
    let mut traces = Vec::new();
    let mut kinds = Vec::new();
    for (kind, samples) in sets {
        if samples.is_empty() {
            return Err(CarpeError::Data(format!("prompt set for {} is empty", kind.name())));
        }
        kinds.push(*kind);
        for s in samples.iter() {
            let d = model.context_decision(&s.prompt)?;
            traces.push(ContextTrace {
                sample_id: s.id,
                task_kind: *kind,
                alpha: d.alpha,
                beta: d.beta,
                expert_index: d.expert_index,
                gate_prob: d.gate_prob,
            });
        }
    }
    ContextReport::from_traces(traces, &kinds)
}
