//! Procedural shape-world corpus: scenes, prompts, vocabulary and the
//! classification/reasoning mixture.
//!
//! Every sample is a pure function of `(seed, split, index)`, so streams can
//! be regenerated or produced out of order without changing content.

mod scene;
mod templates;
mod vocab;

use std::collections::BTreeMap;

use carpe_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use scene::{
    render, Color, Label, SceneObject, SceneSpec, Shape, Size, CELL, GRID, IMAGE_SIZE, MAX_OBJECTS,
    NUM_CLASSES, OOD_LABELS,
};
pub use templates::{TemplateBank, TemplateMode, CLOSED_TEMPLATES, OPEN_TEMPLATES};
pub use vocab::{split_words, Vocab, BOS, CTX, EOS, IMG, PAD};

use crate::error::{CarpeError, Result};

/// ChaCha8 generator on its own stream of `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Reasoning,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Reasoning => "reasoning",
        }
    }
}

/// Independent sample streams. Training and the in-distribution splits never
/// contain [`OOD_LABELS`]; `EvalOod` contains only them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    EvalId,
    EvalOod,
    EvalReasoning,
    Caption,
    TextQa,
    VisionPretrain,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::EvalId => 2,
            Split::EvalOod => 3,
            Split::EvalReasoning => 4,
            Split::Caption => 5,
            Split::TextQa => 6,
            Split::VisionPretrain => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalId => "eval_id",
            Split::EvalOod => "eval_ood",
            Split::EvalReasoning => "eval_reasoning",
            Split::Caption => "caption",
            Split::TextQa => "text_qa",
            Split::VisionPretrain => "vision_pretrain",
        }
    }

    pub fn from_name(name: &str) -> Option<Split> {
        [
            Split::Train,
            Split::EvalId,
            Split::EvalOod,
            Split::EvalReasoning,
            Split::Caption,
            Split::TextQa,
            Split::VisionPretrain,
        ]
        .into_iter()
        .find(|s| s.name() == name)
    }
}

/// What a sample asks; answers are recomputable from this and the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    Classify(Label),
    Count(Shape),
    LeftOf(Label, Label),
    ColorOf(Shape),
    Caption(Label),
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: u64,
    pub split: Split,
    pub spec: SceneSpec,
    pub image: Tensor,
    pub prompt_text: String,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub task_kind: TaskKind,
    pub template_mode: TemplateMode,
    /// Flat classification-template index for classification samples.
    pub template_id: Option<usize>,
    pub question: Question,
}

/// Text-only question whose answer is derivable from the prompt itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Deterministic block interleave of classification and reasoning samples.
///
/// Each block of `classification + reasoning` consecutive indices holds
/// exactly `classification` classification slots at seeded positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mixture {
    pub classification: usize,
    pub reasoning: usize,
}

const MIX_STREAM: u64 = 0xB10C << 40;

impl Mixture {
    pub fn new(classification: i64, reasoning: i64) -> Result<Self> {
        if classification < 0 || reasoning < 0 || classification + reasoning == 0 {
            return Err(CarpeError::Config(format!(
                "mixing ratio ({classification}, {reasoning}) needs non-negative parts with a positive total"
            )));
        }
        Ok(Self {
            classification: classification as usize,
            reasoning: reasoning as usize,
        })
    }

    pub fn kind_at(&self, seed: u64, index: u64) -> TaskKind {
        let total = (self.classification + self.reasoning) as u64;
        let block = index / total;
        let pos = (index % total) as usize;
        let mut slots: Vec<usize> = (0..total as usize).collect();
        slots.shuffle(&mut derive_rng(seed, MIX_STREAM + block));
        if slots[pos] < self.classification {
            TaskKind::Classification
        } else {
            TaskKind::Reasoning
        }
    }
}

impl Default for Mixture {
    fn default() -> Self {
        Self {
            classification: 1,
            reasoning: 7,
        }
    }
}

/// Template bank plus the vocabulary derived from it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub bank: TemplateBank,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn new() -> Result<Self> {
        let bank = TemplateBank::builtin()?;
        let vocab = Self::build_vocab(&bank);
        Ok(Self { bank, vocab })
    }

    fn build_vocab(bank: &TemplateBank) -> Vocab {
        let mut texts: Vec<String> = Vec::new();
        let strip = |t: &str| {
            ["{labels}", "{shapes}", "{shape}", "{a}", "{b}", "{label}", "{objects}", "{col}"]
                .iter()
                .fold(t.to_string(), |acc, p| acc.replace(p, " "))
        };
        for t in bank
            .classification_open
            .iter()
            .chain(&bank.classification_closed)
            .chain([
                &bank.count,
                &bank.relation,
                &bank.color,
                &bank.caption_prompt,
                &bank.caption_answer,
                &bank.scene_description,
                &bank.scene_object,
            ])
        {
            texts.push(strip(t));
        }
        texts.extend(bank.answer_words.iter().cloned());
        texts.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        for s in Shape::ALL {
            texts.push(s.name().to_string());
            texts.push(s.plural().to_string());
        }
        texts.push(", . ? :".to_string());
        Vocab::from_texts(texts.iter().map(String::as_str))
    }

    /// Uniform draw over the 20 classification templates.
    pub fn sample_template(&self, rng: &mut impl Rng) -> (usize, TemplateMode) {
        let idx = rng.gen_range(0..self.bank.classification_count());
        (idx, self.bank.classification(idx).1)
    }

    /// Renders classification template `idx`; closed-world templates list every
    /// class label once, in shuffled order.
    pub fn classification_prompt(&self, idx: usize, rng: &mut impl Rng) -> String {
        let (t, mode) = self.bank.classification(idx);
        match mode {
            TemplateMode::Open => t.to_string(),
            TemplateMode::Closed => {
                let mut labels = Label::all();
                labels.shuffle(rng);
                let list = labels.iter().map(|l| l.text()).collect::<Vec<_>>().join(", ");
                t.replace("{labels}", &list)
            }
        }
    }

    fn sample_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
        derive_rng(seed, (split.tag() << 48) | index)
    }

    fn random_background(rng: &mut impl Rng) -> f64 {
        0.3 + 0.05 * rng.gen_range(0..5) as f64
    }

    fn random_size(rng: &mut impl Rng) -> Size {
        if rng.gen_bool(0.5) {
            Size::Small
        } else {
            Size::Large
        }
    }

    fn single_object_scene(rng: &mut impl Rng, label: Label) -> SceneSpec {
        SceneSpec {
            objects: vec![SceneObject {
                shape: label.shape,
                color: label.color,
                row: rng.gen_range(0..GRID),
                col: rng.gen_range(0..GRID),
                size: Self::random_size(rng),
            }],
            background: Self::random_background(rng),
        }
    }

    /// `count` objects in distinct cells with distinct in-distribution labels.
    fn multi_object_scene(rng: &mut impl Rng, count: usize) -> SceneSpec {
        let mut cells: Vec<(usize, usize)> = (0..GRID).flat_map(|r| (0..GRID).map(move |c| (r, c))).collect();
        cells.shuffle(rng);
        let mut labels = Label::in_distribution();
        labels.shuffle(rng);
        let objects = (0..count)
            .map(|i| SceneObject {
                shape: labels[i].shape,
                color: labels[i].color,
                row: cells[i].0,
                col: cells[i].1,
                size: Self::random_size(rng),
            })
            .collect();
        SceneSpec {
            objects,
            background: Self::random_background(rng),
        }
    }

    fn finish(
        &self,
        rng: &mut ChaCha8Rng,
        id: u64,
        split: Split,
        spec: SceneSpec,
        prompt_text: String,
        question: Question,
        task_kind: TaskKind,
        template: Option<(usize, TemplateMode)>,
    ) -> Result<SceneSample> {
        let image = render(&spec, rng.gen())?;
        let answer_text = answer_for(&self.bank, &spec, question);
        Ok(SceneSample {
            id,
            split,
            image,
            prompt: self.vocab.tokenize(&prompt_text)?,
            answer: self.vocab.tokenize(&answer_text)?,
            prompt_text,
            task_kind,
            template_mode: template.map_or(TemplateMode::Open, |t| t.1),
            template_id: template.map(|t| t.0),
            question,
            spec,
        })
    }

    fn classification_from(
        &self,
        rng: &mut ChaCha8Rng,
        id: u64,
        split: Split,
        labels: &[Label],
    ) -> Result<SceneSample> {
        let label = *labels.choose(rng).expect("non-empty label set");
        let spec = Self::single_object_scene(rng, label);
        let (idx, mode) = self.sample_template(rng);
        let prompt = self.classification_prompt(idx, rng);
        self.finish(
            rng,
            id,
            split,
            spec,
            prompt,
            Question::Classify(label),
            TaskKind::Classification,
            Some((idx, mode)),
        )
    }

    /// Counting, left-of relation, or color query over a 1–3 object scene.
    pub fn gen_reasoning_sample(&self, rng: &mut ChaCha8Rng, id: u64, split: Split) -> Result<SceneSample> {
        let (spec, question) = loop {
            match rng.gen_range(0..3) {
                0 => {
                    let n = rng.gen_range(1..=MAX_OBJECTS);
                    let spec = Self::multi_object_scene(rng, n);
                    let shape = if rng.gen_bool(0.75) {
                        spec.objects.choose(rng).unwrap().shape
                    } else {
                        *Shape::ALL.choose(rng).unwrap()
                    };
                    break (spec, Question::Count(shape));
                }
                1 => {
                    let n = rng.gen_range(2..=MAX_OBJECTS);
                    let spec = Self::multi_object_scene(rng, n);
                    let pair: Vec<&SceneObject> = spec.objects.choose_multiple(rng, 2).collect();
                    let q = Question::LeftOf(pair[0].label(), pair[1].label());
                    break (spec, q);
                }
                _ => {
                    let n = rng.gen_range(1..=MAX_OBJECTS);
                    let spec = Self::multi_object_scene(rng, n);
                    let o = *spec.objects.choose(rng).unwrap();
                    if spec.count_shape(o.shape) == 1 {
                        break (spec, Question::ColorOf(o.shape));
                    }
                }
            }
        };
        let prompt = question_text(&self.bank, question);
        self.finish(rng, id, split, spec, prompt, question, TaskKind::Reasoning, None)
    }

    /// Sample `index` of a split. `Train` follows `mixture`; evaluation splits are
    /// single-kind; `Caption` and `VisionPretrain` hold single-object scenes.
    pub fn sample(&self, split: Split, seed: u64, index: u64, mixture: Mixture) -> Result<SceneSample> {
        let mut rng = Self::sample_rng(seed, split, index);
        match split {
            Split::Train => match mixture.kind_at(seed, index) {
                TaskKind::Classification => {
                    self.classification_from(&mut rng, index, split, &Label::in_distribution())
                }
                TaskKind::Reasoning => self.gen_reasoning_sample(&mut rng, index, split),
            },
            Split::EvalId => self.classification_from(&mut rng, index, split, &Label::in_distribution()),
            Split::EvalOod => self.classification_from(&mut rng, index, split, &OOD_LABELS),
            Split::EvalReasoning => self.gen_reasoning_sample(&mut rng, index, split),
            Split::Caption | Split::VisionPretrain | Split::TextQa => {
                let label = *Label::in_distribution().choose(&mut rng).unwrap();
                let spec = Self::single_object_scene(&mut rng, label);
                let prompt = self.bank.caption_prompt.clone();
                self.finish(
                    &mut rng,
                    index,
                    split,
                    spec,
                    prompt,
                    Question::Caption(label),
                    TaskKind::Classification,
                    None,
                )
            }
        }
    }

    pub fn samples(&self, split: Split, seed: u64, n: usize, mixture: Mixture) -> Result<Vec<SceneSample>> {
        (0..n as u64).map(|i| self.sample(split, seed, i, mixture)).collect()
    }

    /// Prefixes the prompt with a textual scene description, making the answer
    /// derivable from text alone.
    pub fn text_variant(&self, sample: &SceneSample) -> Result<TextSample> {
        let objects = sample
            .spec
            .objects
            .iter()
            .map(|o| {
                self.bank
                    .scene_object
                    .replace("{label}", &o.label().text())
                    .replace("{col}", &o.col.to_string())
            })
            .collect::<Vec<_>>()
            .join(", ");
        let text = format!(
            "{} {}",
            self.bank.scene_description.replace("{objects}", &objects),
            sample.prompt_text
        );
        Ok(TextSample {
            prompt: self.vocab.tokenize(&text)?,
            answer: sample.answer.clone(),
        })
    }

    /// Text-only pretraining sample: a caption, classification or reasoning
    /// question in equal parts, each preceded by its scene description.
    pub fn text_qa_sample(&self, seed: u64, index: u64) -> Result<TextSample> {
        let mut rng = Self::sample_rng(seed, Split::TextQa, index);
        let sample = match index % 3 {
            0 => self.sample(Split::Caption, seed ^ 0x7E47, index, Mixture::default())?,
            1 => self.classification_from(&mut rng, index, Split::TextQa, &Label::in_distribution())?,
            _ => self.gen_reasoning_sample(&mut rng, index, Split::TextQa)?,
        };
        self.text_variant(&sample)
    }
}

pub fn question_text(bank: &TemplateBank, q: Question) -> String {
    match q {
        Question::Count(shape) => bank.count.replace("{shapes}", shape.plural()),
        Question::LeftOf(a, b) => bank.relation.replace("{a}", &a.text()).replace("{b}", &b.text()),
        Question::ColorOf(shape) => bank.color.replace("{shape}", shape.name()),
        Question::Caption(_) => bank.caption_prompt.clone(),
        Question::Classify(_) => String::new(),
    }
}

/// Gold answer text computed from the scene.
pub fn answer_for(bank: &TemplateBank, spec: &SceneSpec, q: Question) -> String {
    match q {
        Question::Classify(l) => l.text(),
        Question::Caption(l) => bank.caption_answer.replace("{label}", &l.text()),
        Question::Count(shape) => spec.count_shape(shape).to_string(),
        Question::LeftOf(a, b) => {
            let col = |l: Label| spec.objects.iter().find(|o| o.label() == l).map(|o| o.col);
            if col(a) < col(b) { "yes" } else { "no" }.to_string()
        }
        Question::ColorOf(shape) => spec
            .objects
            .iter()
            .find(|o| o.shape == shape)
            .map_or("no", |o| o.color.name())
            .to_string(),
    }
}

/// Corpus manifest written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub mixture: (usize, usize),
    pub splits: BTreeMap<String, usize>,
    pub template_bank_sha256: String,
    pub vocab_size: usize,
}

impl CorpusManifest {
    pub fn new(corpus: &Corpus, seed: u64, mixture: Mixture, splits: &[(Split, usize)]) -> Self {
        Self {
            format_version: 1,
            seed,
            mixture: (mixture.classification, mixture.reasoning),
            splits: splits.iter().map(|(s, n)| (s.name().to_string(), *n)).collect(),
            template_bank_sha256: TemplateBank::source_hash(),
            vocab_size: corpus.vocab.len(),
        }
    }
}
