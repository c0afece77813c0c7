//! Mini-batch training with AdamW and a warmup + cosine learning-rate
//! schedule. Loss is taken on response tokens only.
//!
//! Output files (when `output_dir` is set):
//!
//! - `metrics.csv` / `metrics.jsonl`: one row per step with columns
//!   `step,lr,loss,mean_p,seconds`. `seconds` is `NA` (JSON `null`) unless
//!   `record_wall_clock` is enabled, so that reruns produce identical files.
//! - `timing.csv`: `step,seconds` wall-clock timings, always written.
//! - `evals.csv`: `step,name,value` rows from evaluation hooks.
//! - `checkpoint-step{N}.ckpt` every `eval_every` steps and `final.ckpt`.
//! - `last-good.ckpt` when a run aborts on a non-finite loss or gradient.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{LabError, Result};
use crate::losses::{self, LossSpec};
use crate::model::{checkpoint, Model, ModelConfig, TeacherForcedBatch};
use crate::seed;
use crate::tasks::Demonstration;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    1
}
fn default_warmup() -> f64 {
    0.1
}
fn default_wd() -> f64 {
    0.01
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub loss: LossSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Overrides `epochs` when set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Steps between evaluations and checkpoints; 0 disables both.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl RunConfig {
    pub fn new(model: ModelConfig, loss: LossSpec) -> Self {
        Self {
            model,
            loss,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            max_steps: None,
            warmup_ratio: default_warmup(),
            schedule: Schedule::Cosine,
            weight_decay: default_wd(),
            grad_clip_norm: default_clip(),
            seed: 0,
            eval_every: 0,
            output_dir: None,
            record_wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must be in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_train.div_ceil(self.batch_size))
    }

    pub fn lr_schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule::new(self.learning_rate, self.warmup_ratio, total_steps, self.schedule)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub kind: Schedule,
}

impl LrSchedule {
    /// Warmup length is `round(warmup_ratio · total_steps)`.
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize, kind: Schedule) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps,
            kind,
        }
    }

    /// Linear ramp from 0 to `peak` over the warmup, then cosine decay to 0
    /// at `total_steps` (or flat at `peak` for the constant schedule).
    /// Update number `s` (1-based) uses `lr_at(s)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            Schedule::Constant => self.peak,
            Schedule::Cosine => {
                let span = self.total_steps - self.warmup_steps;
                if span == 0 {
                    return self.peak;
                }
                let progress = (step - self.warmup_steps) as f64 / span as f64;
                self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// `lr_at` for a run over `n_train` items.
pub fn lr_at(config: &RunConfig, n_train: usize, step: usize) -> f64 {
    config.lr_schedule(config.total_steps(n_train)).lr_at(step)
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update (β1 = 0.9, β2 = 0.999, ε = 1e-8) with bias correction
/// and decoupled weight decay `p ← p − lr·wd·p`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::Shape {
            op: "adamw_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite {
            what: format!("gradient entry {i}"),
            step: state.step as usize + 1,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * weight_decay * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean teacher-forced probability of the batch's response tokens,
    /// measured before the update.
    pub mean_p: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Called with `(step, model)` every `eval_every` steps and after the last
/// step; returns named scalar results.
pub type EvalHook<'a> = Box<dyn FnMut(usize, &Model) -> Result<Vec<(String, f64)>> + 'a>;

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<TrainMetrics>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn metrics_csv(metrics: &[TrainMetrics]) -> String {
    let mut s = String::from("step,lr,loss,mean_p,seconds\n");
    for m in metrics {
        let secs = m.seconds.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", m.step, m.lr, m.loss, m.mean_p, secs);
    }
    s
}

struct Outputs {
    dir: PathBuf,
    metrics_csv: std::io::BufWriter<std::fs::File>,
    metrics_jsonl: std::io::BufWriter<std::fs::File>,
    timing: std::io::BufWriter<std::fs::File>,
    evals: std::io::BufWriter<std::fs::File>,
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| LabError::file(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
        let mut out = Self {
            dir: dir.to_path_buf(),
            metrics_csv: create(&dir.join("metrics.csv"))?,
            metrics_jsonl: create(&dir.join("metrics.jsonl"))?,
            timing: create(&dir.join("timing.csv"))?,
            evals: create(&dir.join("evals.csv"))?,
        };
        out.metrics_csv.write_all(b"step,lr,loss,mean_p,seconds\n")?;
        out.timing.write_all(b"step,seconds\n")?;
        out.evals.write_all(b"step,name,value\n")?;
        Ok(out)
    }

    fn metric(&mut self, m: &TrainMetrics, wall: f64) -> Result<()> {
        let row = metrics_csv(std::slice::from_ref(m));
        let row = row.split_once('\n').map_or("", |(_, r)| r);
        self.metrics_csv.write_all(row.as_bytes())?;
        serde_json::to_writer(&mut self.metrics_jsonl, m)?;
        self.metrics_jsonl.write_all(b"\n")?;
        writeln!(self.timing, "{},{}", m.step, wall)?;
        Ok(())
    }

    fn eval(&mut self, e: &EvalRecord) -> Result<()> {
        writeln!(self.evals, "{},{},{}", e.step, e.name, e.value)?;
        Ok(())
    }

    fn checkpoint(&self, model: &Model, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        checkpoint::save(model, &path)?;
        Ok(path)
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics_csv.flush()?;
        self.metrics_jsonl.flush()?;
        self.timing.flush()?;
        self.evals.flush()?;
        Ok(())
    }
}

/// Per-step loss and gradient on one batch, accumulated into `model`'s
/// gradient buffers. Returns `(loss, mean_p)`.
pub fn batch_gradient(
    model: &mut Model,
    reference: Option<&Model>,
    spec: &LossSpec,
    batch: &TeacherForcedBatch,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lp = model.batch_log_probs_bound(&mut g, &bound, batch)?;
    let ref_lp = match (spec.needs_reference(), reference) {
        (true, Some(r)) => Some(r.batch_log_prob_values(batch)?),
        (true, None) => {
            return Err(LabError::InvalidInput("IW_SFT needs a reference model".into()))
        }
        _ => None,
    };
    let loss = losses::loss(&mut g, lp, &batch.mask, spec, ref_lp.as_deref())?;
    let value = g.scalar(loss);
    let (mut psum, mut count) = (0.0, 0usize);
    for (l, &m) in g.value(lp).iter().zip(&batch.mask) {
        if m {
            psum += l.exp();
            count += 1;
        }
    }
    if !value.is_finite() {
        return Ok((value, psum / count as f64));
    }
    g.backward(loss)?;
    model.zero_grad();
    model.accumulate_grads(&g, &bound);
    Ok((value, psum / count as f64))
}

/// Trains a freshly initialized model.
pub fn train_run(config: &RunConfig, train: &[Demonstration], hooks: &mut [EvalHook<'_>]) -> Result<TrainOutcome> {
    let model = Model::new(config.model.clone())?;
    train_from(model, config, train, hooks)
}

/// Trains `model` in place of a fresh initialization. The IW_SFT reference
/// policy is a frozen copy of `model` as passed in.
pub fn train_from(
    mut model: Model,
    config: &RunConfig,
    train: &[Demonstration],
    hooks: &mut [EvalHook<'_>],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(LabError::InvalidInput("training set is empty".into()));
    }
    if model.config() != &config.model {
        let mut expected = config.model.clone();
        expected.seed = model.config().seed;
        if model.config() != &expected {
            return Err(LabError::InvalidConfig(
                "model architecture differs from run config".into(),
            ));
        }
    }
    let total = config.total_steps(train.len());
    let schedule = config.lr_schedule(total);
    let reference = config.loss.needs_reference().then(|| model.clone());
    let mut outputs = match &config.output_dir {
        Some(dir) => Some(Outputs::open(dir)?),
        None => None,
    };
    let mut state = AdamState::new(model.num_parameters());
    let mut metrics = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();

    let per_epoch = train.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=total {
        let started = Instant::now();
        let within = (step - 1) % per_epoch;
        if within == 0 {
            let epoch = ((step - 1) / per_epoch) as u64;
            order = (0..train.len()).collect();
            order.shuffle(&mut seed::rng_for(seed::derive_indexed(config.seed, "train-shuffle", epoch), "order"));
        }
        let idx = &order[within * config.batch_size..((within + 1) * config.batch_size).min(train.len())];
        let pairs: Vec<(&[usize], &[usize])> = idx
            .iter()
            .map(|&i| (train[i].prompt_ids.as_slice(), train[i].response_ids.as_slice()))
            .collect();
        let batch = TeacherForcedBatch::new(&pairs)?;

        let (loss, mean_p) = batch_gradient(&mut model, reference.as_ref(), &config.loss, &batch)?;
        if !loss.is_finite() {
            return Err(abort(&outputs, &model, format!("loss {loss}"), step));
        }
        let mut grads = model.flat_grad();
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(abort(&outputs, &model, "gradient".into(), step));
        }
        if let Some(c) = config.grad_clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = schedule.lr_at(step);
        let mut values = model.flat_values();
        adamw_step(&mut values, &grads, &mut state, lr, config.weight_decay)?;
        model.set_flat_values(&values)?;

        let wall = started.elapsed().as_secs_f64();
        let m = TrainMetrics {
            step,
            lr,
            loss,
            mean_p,
            seconds: config.record_wall_clock.then_some(wall),
        };
        if let Some(o) = outputs.as_mut() {
            o.metric(&m, wall)?;
        }
        metrics.push(m);

        let eval_now = config.eval_every > 0 && step % config.eval_every == 0;
        if eval_now || step == total {
            run_hooks(hooks, step, &model, &mut evals, outputs.as_mut())?;
        }
        if eval_now && step != total {
            if let Some(o) = outputs.as_ref() {
                checkpoints.push(o.checkpoint(&model, &format!("checkpoint-step{step}.ckpt"))?);
            }
        }
    }
    if total == 0 {
        run_hooks(hooks, 0, &model, &mut evals, outputs.as_mut())?;
    }
    if let Some(o) = outputs.as_mut() {
        checkpoints.push(o.checkpoint(&model, "final.ckpt")?);
        o.flush()?;
    }
    model.zero_grad();
    Ok(TrainOutcome {
        model,
        metrics,
        evals,
        checkpoints,
    })
}

fn run_hooks(
    hooks: &mut [EvalHook<'_>],
    step: usize,
    model: &Model,
    evals: &mut Vec<EvalRecord>,
    mut outputs: Option<&mut Outputs>,
) -> Result<()> {
    for hook in hooks.iter_mut() {
        for (name, value) in hook(step, model)? {
            let rec = EvalRecord { step, name, value };
            if let Some(o) = outputs.as_deref_mut() {
                o.eval(&rec)?;
            }
            evals.push(rec);
        }
    }
    Ok(())
}

/// Saves the pre-step model as `last-good.ckpt` and builds the abort error.
fn abort(outputs: &Option<Outputs>, model: &Model, what: String, step: usize) -> LabError {
    if let Some(o) = outputs {
        // a failed save must not mask the original error
        let _ = o.checkpoint(model, "last-good.ckpt");
    }
    LabError::NonFinite { what, step }
}
