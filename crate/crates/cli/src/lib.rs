//! The `carpe` command line: every subcommand reads a TOML config plus
//! `--set section.key=value` overrides and writes JSON reports.

use std::fs;
use std::path::{Path, PathBuf};

use carpe_core::check::GradcheckInstance;
use carpe_core::config::Config;
use carpe_core::corpus::{Corpus, CorpusManifest, Split, TaskKind};
use carpe_core::eval::{
    eval_samples, eval_zero_shot, probe_report, report_context_weights, Decoder, FeatureSource,
};
use carpe_core::model::Stream;
use carpe_core::train::{finetune_carpe, pretrain_all, wiseft_merge, Checkpoint, TrainLog};
use carpe_core::{CarpeError, Result};
use carpe_numerics::GradCheckConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "carpe", version, about = "Train and evaluate toy context-aware vision-language ensembles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the base model (vision experts, language model, adapters).
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// JSONL training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Attach a CARPE head to a base checkpoint and fine-tune it.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Zero-shot evaluation by greedy decoding.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "eval_ood")]
        split: String,
        /// Fix the ensemble weights to (a, 1 - a).
        #[arg(long)]
        force_alpha: Option<f64>,
        /// Decode with the base model through this expert instead of CARPE.
        #[arg(long, conflicts_with = "force_alpha")]
        base_expert: Option<usize>,
        /// Summary report destination.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-sample JSONL rows.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Linear probes on pooled vision and LLM features next to zero-shot accuracy.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "eval_ood")]
        split: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean context weights per task kind.
    CtxReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Interpolate two checkpoints: (1 - coeff) * a + coeff * b.
    Merge {
        #[arg(long)]
        coeff: f64,
        a: PathBuf,
        b: PathBuf,
        out: PathBuf,
    },
    /// Finite-difference check of the full model on a tiny instance.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the corpus manifest and sample listing.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs it. Returns the exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let source = match &common.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    Config::from_toml_with_overrides(&source, &common.overrides)
}

fn open_log(path: &Option<PathBuf>) -> Result<TrainLog> {
    match path {
        Some(p) => TrainLog::to_file(p),
        None => Ok(TrainLog::new()),
    }
}

fn write_json(path: &Option<PathBuf>, value: &serde_json::Value) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    Split::from_name(name).ok_or_else(|| CarpeError::Config(format!("unknown split {name:?}")))
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Pretrain { out, log } => {
            let corpus = Corpus::new()?;
            let mut log = open_log(&log)?;
            let (ckpt, report) = pretrain_all(&cfg, &corpus, &mut log)?;
            ckpt.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {} (sha256 {})", out.display(), ckpt.content_hash()?);
        }
        Command::Finetune { base, out, log } => {
            let corpus = Corpus::new()?;
            let base = Checkpoint::load(&base)?;
            let mut log = open_log(&log)?;
            let result = finetune_carpe(&base, &cfg, &corpus, &mut log)?;
            result.checkpoint.save(&out)?;
            for e in &result.epochs {
                println!(
                    "epoch {}  steps {}  loss {:.4}  mean alpha {:.4}  experts {:?}",
                    e.epoch, e.steps, e.mean_loss, e.mean_alpha, e.expert_usage
                );
            }
            println!("wrote {} (sha256 {})", out.display(), result.checkpoint.content_hash()?);
        }
        Command::Eval {
            ckpt,
            split,
            force_alpha,
            base_expert,
            report,
            rows,
        } => {
            let corpus = Corpus::new()?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let samples = eval_samples(&corpus, &cfg, parse_split(&split)?)?;
            let decoder = match base_expert {
                Some(expert) => Decoder::Base { expert },
                None if model.head.is_none() => Decoder::Base { expert: 0 },
                None => Decoder::Carpe {
                    force_alpha: force_alpha.or(cfg.eval.force_alpha),
                    stream: Stream::Ensemble,
                },
            };
            let r = eval_zero_shot(&model, &corpus, &split, &samples, decoder, cfg.eval.max_tokens)?;
            let mut doc = serde_json::to_value(&r)?;
            doc["checkpoint_sha256"] = json!(ck.content_hash()?);
            doc["eval_seed"] = json!(cfg.eval.seed);
            write_json(&report, &doc)?;
            if let Some(p) = rows {
                fs::write(p, r.rows_jsonl()?)?;
            }
            print!("{}", r.summary());
        }
        Command::Probe { ckpt, split, report } => {
            let corpus = Corpus::new()?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let samples = eval_samples(&corpus, &cfg, parse_split(&split)?)?;
            let reports = probe_report(
                &model,
                &corpus,
                &split,
                &samples,
                &[FeatureSource::VisionPooled, FeatureSource::LlmPooled],
                cfg.eval.probe_folds,
                cfg.eval.seed,
                cfg.eval.max_tokens,
            )?;
            write_json(&report, &serde_json::to_value(&reports)?)?;
            for r in &reports {
                println!(
                    "{:<14} probe {:.4}  zero-shot {:.4}  n {}  classes {}",
                    r.source.name(),
                    r.probe_accuracy,
                    r.zero_shot_accuracy,
                    r.n,
                    r.classes
                );
            }
        }
        Command::CtxReport { ckpt, report, rows } => {
            let corpus = Corpus::new()?;
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let cls = eval_samples(&corpus, &cfg, Split::EvalId)?;
            let rsn = eval_samples(&corpus, &cfg, Split::EvalReasoning)?;
            let r = report_context_weights(
                &model,
                &[(TaskKind::Classification, &cls), (TaskKind::Reasoning, &rsn)],
            )?;
            write_json(&report, &serde_json::to_value(&r)?)?;
            if let Some(p) = rows {
                let mut out = String::new();
                for t in &r.traces {
                    out.push_str(&serde_json::to_string(t)?);
                    out.push('\n');
                }
                fs::write(p, out)?;
            }
            print!("{}", r.table());
        }
        Command::Merge { coeff, a, b, out } => {
            let merged = wiseft_merge(&Checkpoint::load(&a)?, &Checkpoint::load(&b)?, coeff)?;
            merged.save(&out)?;
            println!("wrote {} (sha256 {})", out.display(), merged.content_hash()?);
        }
        Command::Gradcheck { tol, eps, seed } => {
            let inst = GradcheckInstance::new(seed)?;
            let report = inst.run(&GradCheckConfig {
                eps,
                tol,
                ..GradCheckConfig::default()
            })?;
            let names = inst.param_names();
            for c in &report.per_param {
                println!("{:<40} {:>4} coords  max rel err {:.3e}", names[c.index], c.coords_checked, c.max_rel_error);
            }
            println!("max relative error {:.3e} (tol {tol:e})", report.max_rel_error);
            if !report.pass {
                return Err(CarpeError::Data(format!(
                    "gradient check failed: {:.3e} >= {tol:e}",
                    report.max_rel_error
                )));
            }
        }
        Command::GenCorpus { out } => gen_corpus(&cfg, &out)?,
    }
    Ok(())
}

fn gen_corpus(cfg: &Config, out: &Path) -> Result<()> {
    let corpus = Corpus::new()?;
    let mixture = cfg.mixture()?;
    fs::create_dir_all(out)?;
    let splits = [
        (Split::Train, cfg.data.seed, cfg.data.train_samples),
        (Split::EvalId, cfg.eval.seed, cfg.eval.samples),
        (Split::EvalOod, cfg.eval.seed, cfg.eval.samples),
        (Split::EvalReasoning, cfg.eval.seed, cfg.eval.samples),
    ];
    for (split, seed, n) in splits {
        let mut rows = String::new();
        for s in corpus.samples(split, seed, n, mixture)? {
            rows.push_str(&serde_json::to_string(&json!({
                "id": s.id,
                "task_kind": s.task_kind,
                "template_mode": s.template_mode,
                "template_id": s.template_id,
                "question": s.question,
                "prompt": s.prompt_text,
                "answer": corpus.vocab.detokenize(&s.answer),
                "scene": s.spec,
            }))?);
            rows.push('\n');
        }
        fs::write(out.join(format!("{}.jsonl", split.name())), rows)?;
    }
    let counts: Vec<(Split, usize)> = splits.iter().map(|(s, _, n)| (*s, *n)).collect();
    let manifest = CorpusManifest::new(&corpus, cfg.data.seed, mixture, &counts);
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} splits to {}", splits.len(), out.display());
    Ok(())
}
