//! Sampled accuracy (avg@k), teacher-forced token-probability histograms and
//! run-comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{sample_batch, Decoding, Model, SampleRequest, TeacherForcedBatch};
use crate::seed::derive_indexed;
use crate::tasks::{verify, Demonstration, TaskKind};

/// Streams decoded together during evaluation.
const EVAL_CHUNK: usize = 512;

pub const DEFAULT_BINS: usize = 20;

/// File names read from and written to run directories.
pub mod files {
    pub const CONFIG: &str = "effective_config.json";
    pub const METRICS: &str = "metrics.csv";
    pub const EVAL_IN: &str = "eval_in.json";
    pub const EVAL_OOD: &str = "eval_ood.json";
    pub const HISTOGRAM: &str = "histogram.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    pub split: String,
    pub k: usize,
    /// `None` for greedy decoding.
    pub temperature: Option<f64>,
    pub avg_at_k: f64,
    /// `correct[prompt][draw]`.
    pub correct: Vec<Vec<bool>>,
}

impl EvalResult {
    pub fn recompute_avg(&self) -> f64 {
        let total: usize = self.correct.iter().map(Vec::len).sum();
        let hits = self.correct.iter().flatten().filter(|&&c| c).count();
        hits as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub decoding: Decoding,
    pub max_new_tokens: usize,
    pub seed: u64,
}

/// Draws `k` completions per prompt and scores each with the task verifier.
/// Draw `j` of prompt `i` is seeded from `(seed, i, j)`, so results do not
/// depend on batching.
pub fn evaluate(model: &Model, eval_set: &[Demonstration], split: &str, opts: &EvalOptions) -> Result<EvalResult> {
    if opts.k == 0 {
        return Err(LabError::InvalidConfig("k must be >= 1".into()));
    }
    let task = match eval_set.first() {
        Some(d) => d.task,
        None => return Err(LabError::InvalidInput("empty evaluation set".into())),
    };
    if eval_set.iter().any(|d| d.task != task) {
        return Err(LabError::InvalidInput("evaluation set mixes tasks".into()));
    }
    let mut requests = Vec::with_capacity(eval_set.len() * opts.k);
    for (i, d) in eval_set.iter().enumerate() {
        let prompt_seed = derive_indexed(opts.seed, "eval-prompt", i as u64);
        for j in 0..opts.k {
            requests.push(SampleRequest {
                prompt: d.prompt_ids.clone(),
                seed: derive_indexed(prompt_seed, "eval-draw", j as u64),
            });
        }
    }
    let mut flat = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(EVAL_CHUNK) {
        let outs = sample_batch(model, chunk, opts.max_new_tokens, opts.decoding)?;
        for (req, out) in chunk.iter().zip(outs) {
            flat.push(verify(task, &req.prompt, &out));
        }
    }
    let correct: Vec<Vec<bool>> = flat.chunks(opts.k).map(<[bool]>::to_vec).collect();
    let mut result = EvalResult {
        task,
        split: split.to_string(),
        k: opts.k,
        temperature: match opts.decoding {
            Decoding::Greedy => None,
            Decoding::Temperature(t) => Some(t),
        },
        avg_at_k: 0.0,
        correct,
    };
    result.avg_at_k = result.recompute_avg();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbHistogram {
    pub model_tag: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
    pub total: usize,
}

impl ProbHistogram {
    pub fn lowest(&self) -> usize {
        self.counts[0]
    }

    pub fn highest(&self) -> usize {
        self.counts[self.counts.len() - 1]
    }
}

/// `n` equal-width bins over [0, 1].
pub fn uniform_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

fn check_edges(edges: &[f64]) -> Result<()> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(LabError::InvalidConfig(
            "bin edges must ascend strictly from 0 to 1".into(),
        ))
    }
}

/// Bin index for `p`: bins are `[e_i, e_{i+1})`, the last one closed.
pub fn bin_index(edges: &[f64], p: f64) -> usize {
    let last = edges.len() - 2;
    edges[1..=last].partition_point(|&e| e <= p).min(last)
}

/// Teacher-forced probabilities of every response token, per demonstration.
pub fn response_token_probs(model: &Model, demos: &[Demonstration]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(demos.len());
    for chunk in demos.chunks(64) {
        let batch = TeacherForcedBatch::new(&Demonstration::pairs(chunk))?;
        out.extend(model.teacher_forced_probs(&batch)?);
    }
    Ok(out)
}

pub fn histogram_from_probs(probs: &[Vec<f64>], edges: &[f64], model_tag: &str) -> Result<ProbHistogram> {
    check_edges(edges)?;
    let mut counts = vec![0usize; edges.len() - 1];
    for &p in probs.iter().flatten() {
        counts[bin_index(edges, p)] += 1;
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    Ok(ProbHistogram {
        model_tag: model_tag.to_string(),
        edges: edges.to_vec(),
        counts,
        fractions,
        total,
    })
}

pub fn token_histogram(model: &Model, demos: &[Demonstration], edges: &[f64], model_tag: &str) -> Result<ProbHistogram> {
    if demos.is_empty() {
        return Err(LabError::InvalidInput("empty dataset".into()));
    }
    check_edges(edges)?;
    histogram_from_probs(&response_token_probs(model, demos)?, edges, model_tag)
}

/// Response tokens with teacher-forced `p_t < threshold`, counted per token
/// symbol and sorted by count (descending), then symbol.
pub fn lowest_bin_tokens(model: &Model, demos: &[Demonstration], threshold: f64) -> Result<Vec<(String, usize)>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LabError::InvalidConfig(format!("threshold {threshold} not in [0, 1]")));
    }
    let probs = response_token_probs(model, demos)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (d, ps) in demos.iter().zip(&probs) {
        let table = d.task.vocabulary().table();
        for (&tok, &p) in d.response_ids.iter().zip(ps) {
            if p < threshold {
                *counts.entry(table[tok].1.clone()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// One row of the comparison table. `None` marks a value the run directory
/// did not provide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub loss_kind: Option<String>,
    pub in_dist_acc: Option<f64>,
    pub ood_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub hist_lowest: Option<usize>,
    pub hist_highest: Option<usize>,
    pub hist_total: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub errors: Vec<(String, String)>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "run",
    "loss_kind",
    "in_dist_acc",
    "ood_acc",
    "final_train_loss",
    "hist_lowest",
    "hist_highest",
    "hist_total",
];

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(serde_json::from_str(&s).map_err(|e| {
            LabError::InvalidInput(format!("{}: {e}", path.display()))
        })?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(LabError::file(path, e)),
    }
}

fn final_loss(metrics_csv: &str) -> Result<Option<f64>> {
    let mut lines = metrics_csv.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|h| h == "loss")
        .ok_or_else(|| LabError::InvalidInput("metrics.csv has no loss column".into()))?;
    match lines.filter(|l| !l.is_empty()).last() {
        None => Ok(None),
        Some(row) => row
            .split(',')
            .nth(col)
            .and_then(|v| v.parse().ok())
            .map(Some)
            .ok_or_else(|| LabError::InvalidInput("malformed metrics row".into())),
    }
}

fn report_row(dir: &Path) -> Result<ReportRow> {
    let config: serde_json::Value = read_json(&dir.join(files::CONFIG))?
        .ok_or_else(|| LabError::InvalidInput(format!("missing {}", files::CONFIG)))?;
    let metrics_path = dir.join(files::METRICS);
    let metrics = std::fs::read_to_string(&metrics_path).map_err(|e| LabError::file(&metrics_path, e))?;
    let loss_kind = config
        .pointer("/train/loss/kind")
        .or_else(|| config.pointer("/loss/kind"))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    let eval_in: Option<EvalResult> = read_json(&dir.join(files::EVAL_IN))?;
    let eval_ood: Option<EvalResult> = read_json(&dir.join(files::EVAL_OOD))?;
    let hist: Option<ProbHistogram> = read_json(&dir.join(files::HISTOGRAM))?;
    Ok(ReportRow {
        run: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        loss_kind,
        in_dist_acc: eval_in.map(|e| e.avg_at_k),
        ood_acc: eval_ood.map(|e| e.avg_at_k),
        final_train_loss: final_loss(&metrics)?,
        hist_lowest: hist.as_ref().map(ProbHistogram::lowest),
        hist_highest: hist.as_ref().map(ProbHistogram::highest),
        hist_total: hist.as_ref().map(|h| h.total),
    })
}

/// Builds a table with one row per readable run directory; unreadable ones
/// are listed under `errors`.
pub fn comparison_report(run_dirs: &[PathBuf]) -> ComparisonReport {
    let mut report = ComparisonReport::default();
    for dir in run_dirs {
        match report_row(dir) {
            Ok(row) => report.rows.push(row),
            Err(e) => report.errors.push((dir.display().to_string(), e.to_string())),
        }
    }
    report
}

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "NA".to_string(), T::to_string)
}

impl ComparisonReport {
    /// CSV in `REPORT_COLUMNS` order; missing values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.run,
                cell(&r.loss_kind),
                cell(&r.in_dist_acc),
                cell(&r.ood_acc),
                cell(&r.final_train_loss),
                cell(&r.hist_lowest),
                cell(&r.hist_highest),
                cell(&r.hist_total)
            );
        }
        s
    }
}
