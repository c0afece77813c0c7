//! Workflows shared by the subcommands: warm start, train-and-evaluate,
//! SFT/DFT comparison, rejection-sampling comparison and sweeps. Every run
//! directory gets its effective config first and a manifest last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{LabError, Result};
use crate::evalreport::{
    comparison_report, evaluate, files, lowest_bin_tokens, token_histogram, uniform_edges, ComparisonReport,
    EvalOptions, EvalResult, ProbHistogram,
};
use crate::losses::LossSpec;
use crate::model::Model;
use crate::rft::{self, FilterStats};
use crate::tasks::{self, Demonstration, Splits};
use crate::training::{train_from, EvalHook, TrainOutcome};

use super::config::LabConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LEARNING_CURVE: &str = "learning_curve.csv";
pub const LOW_TOKENS: &str = "low_tokens.json";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
/// Threshold of the lowest default histogram bin.
pub const LOW_P: f64 = 0.05;

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LabError::file(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| LabError::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::file(path, e))
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| LabError::file(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| LabError::file(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let meta = e.metadata().map_err(|err| LabError::file(&path, err))?;
        if meta.is_dir() {
            collect(root, &path, out)?;
        } else if path != root.join(MANIFEST) {
            let rel = path.strip_prefix(root).unwrap_or(&path);
            out.push(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                bytes: meta.len(),
            });
        }
    }
    Ok(())
}

/// Lists every file under `dir` with its size in `manifest.json`.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut entries = Vec::new();
    collect(dir, dir, &mut entries)?;
    write_json(&dir.join(MANIFEST), &entries)
}

pub fn prepare_data(cfg: &LabConfig) -> Result<Splits> {
    tasks::generate_dataset(&cfg.task, cfg.data.n_train, cfg.data.n_eval_in, cfg.data.n_eval_ood)
}

pub fn write_data(dir: &Path, splits: &Splits) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
    tasks::write_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    tasks::write_jsonl(&dir.join("eval_in.jsonl"), &splits.eval_in)?;
    tasks::write_jsonl(&dir.join("eval_ood.jsonl"), &splits.eval_ood)
}

/// The shared starting model: a brief SFT run, or the initialization when
/// the warm start is disabled.
pub fn warm_base(cfg: &LabConfig, train: &[Demonstration]) -> Result<Model> {
    let init = Model::new(cfg.train.model.clone())?;
    if cfg.warm_start.steps == 0 {
        return Ok(init);
    }
    Ok(train_from(init, &cfg.warm_start_run(), train, &mut [])?.model)
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub model: Model,
    pub metrics_csv: String,
    pub eval_in: EvalResult,
    pub eval_ood: EvalResult,
    pub histogram: ProbHistogram,
    pub low_tokens: Vec<(String, usize)>,
}

fn curve_hook<'a>(cfg: &'a LabConfig, splits: &'a Splits) -> EvalHook<'a> {
    let n = cfg.eval.curve_prompts;
    let opts = EvalOptions {
        k: cfg.eval.curve_k,
        ..cfg.eval_options()
    };
    Box::new(move |_, model: &Model| {
        let mut out = Vec::new();
        for (name, set) in [("in_dist_acc", &splits.eval_in), ("ood_acc", &splits.eval_ood)] {
            let set = &set[..n.min(set.len())];
            if !set.is_empty() {
                out.push((name.to_string(), evaluate(model, set, name, &opts)?.avg_at_k));
            }
        }
        Ok(out)
    })
}

/// Pivots hook output into `step,in_dist_acc,ood_acc`.
pub fn learning_curve_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("step,in_dist_acc,ood_acc\n");
    let mut steps: Vec<usize> = outcome.evals.iter().map(|e| e.step).collect();
    steps.dedup();
    for step in steps {
        let get = |name: &str| {
            outcome
                .evals
                .iter()
                .find(|e| e.step == step && e.name == name)
                .map_or_else(|| "NA".to_string(), |e| e.value.to_string())
        };
        let _ = writeln!(s, "{step},{},{}", get("in_dist_acc"), get("ood_acc"));
    }
    s
}

/// Trains `base` on `train_set` with `cfg.train`, then writes evaluations of
/// both splits and the token-probability histogram over `splits.train`.
pub fn train_and_evaluate(
    cfg: &LabConfig,
    base: Model,
    train_set: &[Demonstration],
    splits: &Splits,
    dir: &Path,
) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.train.output_dir = Some(dir.to_path_buf());
    write_json(&dir.join(files::CONFIG), &cfg)?;

    let outcome = {
        let mut hooks = [curve_hook(&cfg, splits)];
        train_from(base, &cfg.train, train_set, &mut hooks)?
    };
    write_text(&dir.join(LEARNING_CURVE), &learning_curve_csv(&outcome))?;

    let opts = cfg.eval_options();
    let eval_in = evaluate(&outcome.model, &splits.eval_in, "in-dist", &opts)?;
    let eval_ood = evaluate(&outcome.model, &splits.eval_ood, "ood", &opts)?;
    write_json(&dir.join(files::EVAL_IN), &eval_in)?;
    write_json(&dir.join(files::EVAL_OOD), &eval_ood)?;

    let scanned = &splits.train[..cfg.histogram.max_items.unwrap_or(usize::MAX).min(splits.train.len())];
    let tag = cfg.train.loss.kind.name();
    let histogram = token_histogram(&outcome.model, scanned, &uniform_edges(cfg.histogram.bins), tag)?;
    let low_tokens = lowest_bin_tokens(&outcome.model, scanned, LOW_P)?;
    write_json(&dir.join(files::HISTOGRAM), &histogram)?;
    write_json(&dir.join(LOW_TOKENS), &low_tokens)?;
    write_manifest(dir)?;

    Ok(RunSummary {
        dir: dir.to_path_buf(),
        model: outcome.model,
        metrics_csv: crate::training::metrics_csv(&outcome.metrics),
        eval_in,
        eval_ood,
        histogram,
        low_tokens,
    })
}

fn with_loss(cfg: &LabConfig, loss: LossSpec) -> LabConfig {
    let mut c = cfg.clone();
    c.train.loss = loss;
    c
}

pub fn write_report(dir: &Path, runs: &[PathBuf]) -> Result<ComparisonReport> {
    let report = comparison_report(runs);
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

pub struct Comparison {
    pub splits: Splits,
    pub base: Model,
    pub sft: RunSummary,
    pub dft: RunSummary,
}

/// SFT and DFT fine-tuning from the same starting model on the same data.
pub fn compare(cfg: &LabConfig, dir: &Path) -> Result<Comparison> {
    write_json(&dir.join(files::CONFIG), cfg)?;
    let splits = prepare_data(cfg)?;
    write_data(&dir.join("data"), &splits)?;
    let base = warm_base(cfg, &splits.train)?;
    crate::model::checkpoint::save(&base, &dir.join(BASE_CHECKPOINT))?;
    let sft = train_and_evaluate(&with_loss(cfg, LossSpec::sft()), base.clone(), &splits.train, &splits, &dir.join("sft"))?;
    let dft = train_and_evaluate(&with_loss(cfg, LossSpec::dft()), base.clone(), &splits.train, &splits, &dir.join("dft"))?;
    write_report(dir, &[sft.dir.clone(), dft.dir.clone()])?;
    write_manifest(dir)?;
    Ok(Comparison { splits, base, sft, dft })
}

pub struct RftComparison {
    pub stats: FilterStats,
    pub rft: RunSummary,
    pub dft: RunSummary,
}

/// Self-samples from `base`, keeps verified completions and retrains on them
/// with the SFT loss (the rejection-sampling baseline) and with DFT.
pub fn rft_compare(cfg: &LabConfig, base: &Model, splits: &Splits, dir: &Path) -> Result<RftComparison> {
    write_json(&dir.join(files::CONFIG), cfg)?;
    let count = cfg.rft.prompt_count.unwrap_or(splits.train.len()).min(splits.train.len());
    let prompts = &splits.train[..count];
    let (kept, stats) = rft::sample_and_filter(base, prompts, rft::task_verifier, &cfg.rft)?;
    rft::write_outputs(&dir.join("filtered"), &kept, &stats)?;
    if kept.is_empty() {
        write_manifest(dir)?;
        return Err(LabError::EmptyFilteredSet);
    }
    let rft_run = train_and_evaluate(&with_loss(cfg, LossSpec::sft()), base.clone(), &kept, splits, &dir.join("rft-sft"))?;
    let dft_run = train_and_evaluate(&with_loss(cfg, LossSpec::dft()), base.clone(), &kept, splits, &dir.join("rft-dft"))?;
    write_report(dir, &[rft_run.dir.clone(), dft_run.dir.clone()])?;
    write_manifest(dir)?;
    Ok(RftComparison {
        stats,
        rft: rft_run,
        dft: dft_run,
    })
}

/// One run per (loss, learning rate, batch size) from the shared starting
/// model, plus a comparison report.
pub fn sweep(cfg: &LabConfig, losses: &[LossSpec], base: &Model, splits: &Splits, dir: &Path) -> Result<ComparisonReport> {
    write_json(&dir.join(files::CONFIG), cfg)?;
    let mut runs = Vec::new();
    for loss in losses {
        for &lr in &cfg.sweep.learning_rates {
            for &bs in &cfg.sweep.batch_sizes {
                let mut c = with_loss(cfg, loss.clone());
                c.train.learning_rate = lr;
                c.train.batch_size = bs;
                c.validate()?;
                let name = format!("{}-lr{lr:e}-bs{bs}", loss.kind.name().to_lowercase());
                let run = train_and_evaluate(&c, base.clone(), &splits.train, splits, &dir.join(name))?;
                runs.push(run.dir);
            }
        }
    }
    let report = write_report(dir, &runs)?;
    write_manifest(dir)?;
    Ok(report)
}

/// Learning curves and histograms for both losses, the sweep tables and the
/// rejection-sampling comparison, under one directory.
pub fn reproduce(cfg: &LabConfig, dir: &Path) -> Result<()> {
    let cmp = compare(cfg, &dir.join("compare"))?;
    for (tag, run) in [("sft", &cmp.sft), ("dft", &cmp.dft)] {
        fs::copy(run.dir.join(LEARNING_CURVE), dir.join(format!("learning_curve_{tag}.csv")))
            .map_err(|e| LabError::file(&run.dir, e))?;
        fs::copy(run.dir.join(files::HISTOGRAM), dir.join(format!("histogram_{tag}.json")))
            .map_err(|e| LabError::file(&run.dir, e))?;
    }
    sweep(cfg, &[LossSpec::sft(), LossSpec::dft()], &cmp.base, &cmp.splits, &dir.join("sweep"))?;
    rft_compare(cfg, &cmp.base, &cmp.splits, &dir.join("rft"))?;
    write_manifest(dir)?;
    Ok(())
}

