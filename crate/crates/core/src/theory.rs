//! Exact and Monte-Carlo oracles for the policy-gradient reading of SFT.
//!
//! Gradients are flat vectors in the model's canonical parameter order.
//! "SFT direction" means the gradient of the SFT loss, `−∇log π(y⋆|x)`.
//!
//! Enumeration uses fixed-length responses: every `y ∈ V^T` is scored by its
//! teacher-forced probability, with no early stop at EOS.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{softmax_row, PROB_FLOOR};
use crate::autodiff::Graph;
use crate::error::{LabError, Result};
use crate::losses::{sft_loss, Reduction};
use crate::model::{Decoder, Model, TeacherForcedBatch};
use crate::tasks::Demonstration;
use crate::seed::{derive_indexed, derive_seed};

pub const DEFAULT_MAX_SEQUENCES: usize = 10_000;
const SAMPLE_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationBudget {
    pub vocab_size: usize,
    pub horizon: usize,
    pub max_sequences: usize,
}

impl EnumerationBudget {
    pub fn new(vocab_size: usize, horizon: usize) -> Self {
        Self {
            vocab_size,
            horizon,
            max_sequences: DEFAULT_MAX_SEQUENCES,
        }
    }

    /// `V^T`, or an error when it exceeds the cap.
    pub fn sequence_count(&self) -> Result<usize> {
        let over = || LabError::BudgetExceeded {
            vocab: self.vocab_size,
            horizon: self.horizon,
            cap: self.max_sequences,
        };
        let exp = u32::try_from(self.horizon).map_err(|_| over())?;
        match self.vocab_size.checked_pow(exp) {
            Some(n) if n <= self.max_sequences => Ok(n),
            _ => Err(over()),
        }
    }

    /// All sequences in lexicographic order.
    pub fn sequences(&self) -> Result<Vec<Vec<usize>>> {
        let n = self.sequence_count()?;
        Ok((0..n)
            .map(|mut i| {
                let mut y = vec![0; self.horizon];
                for slot in y.iter_mut().rev() {
                    *slot = i % self.vocab_size;
                    i /= self.vocab_size;
                }
                y
            })
            .collect())
    }
}

/// One distinct sampled response and its share of an estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSample {
    pub sequence: Vec<usize>,
    pub count: usize,
    pub probability: f64,
    pub reward: f64,
    /// Per-draw contribution (before averaging over draws).
    pub contribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Mean Euclidean norm of the per-draw score `∇log π(y|x)`.
    pub mean_score_norm: f64,
    pub samples: Vec<EstimatorSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub p_star: f64,
    pub n_samples: usize,
    pub hits: usize,
    pub var_sft_implicit: f64,
    pub var_dft: f64,
    pub empirical_ratio: Option<f64>,
    pub analytic_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScan {
    pub tokens: usize,
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub over_100: usize,
    /// `(demonstration index, response position)` of tokens with `w_t > 100`.
    pub flagged: Vec<(usize, usize)>,
}

/// `(log π(y|x), ∇log π(y|x))` for one response.
pub fn score(model: &Model, prompt: &[usize], y: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lp = model.token_log_probs(&mut g, &bound, prompt, y)?;
    let total = g.sum(lp);
    g.backward(total)?;
    Ok((g.scalar(total), model.graph_flat_grad(&g, &bound)))
}

/// Gradient of the summed SFT loss `−log π(y⋆|x)` by reverse-mode autodiff.
pub fn sft_gradient(model: &Model, prompt: &[usize], y_star: &[usize]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lp = model.token_log_probs(&mut g, &bound, prompt, y_star)?;
    let loss = sft_loss(&mut g, lp, &vec![true; y_star.len()], Reduction::Sum)?;
    g.backward(loss)?;
    Ok(model.graph_flat_grad(&g, &bound))
}

/// Order-fixed pairwise summation of equal-length vectors.
pub fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

fn check_budget(model: &Model, budget: &EnumerationBudget) -> Result<()> {
    if budget.vocab_size != model.config().vocab_size {
        return Err(LabError::InvalidInput(format!(
            "budget vocabulary {} differs from model vocabulary {}",
            budget.vocab_size,
            model.config().vocab_size
        )));
    }
    if budget.horizon == 0 {
        return Err(LabError::InvalidInput("horizon must be >= 1".into()));
    }
    budget.sequence_count().map(|_| ())
}

/// `Σ_y π(y|x) · (1[y=y⋆] / π(y|x)) · (−∇log π(y|x))` over every `y ∈ V^T`,
/// evaluated term by term. Equals the SFT gradient on `(x, y⋆)`.
pub fn exact_policy_expectation(
    model: &Model,
    prompt: &[usize],
    y_star: &[usize],
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    check_budget(model, budget)?;
    if y_star.len() != budget.horizon {
        return Err(LabError::InvalidInput(format!(
            "y_star has length {}, horizon is {}",
            y_star.len(),
            budget.horizon
        )));
    }
    let mut terms = Vec::new();
    for y in budget.sequences()? {
        let (logp, grad) = score(model, prompt, &y)?;
        let pi = logp.exp();
        let reward = if y == y_star { 1.0 } else { 0.0 };
        let weight = pi * (reward / pi.max(PROB_FLOOR));
        terms.push(grad.into_iter().map(|v| -weight * v).collect());
    }
    Ok(pairwise_sum(terms))
}

/// `E_y[∇log π(y|x)]` by enumeration; zero by the score-function identity.
pub fn exact_score_expectation(model: &Model, prompt: &[usize], budget: &EnumerationBudget) -> Result<Vec<f64>> {
    check_budget(model, budget)?;
    let mut terms = Vec::new();
    for y in budget.sequences()? {
        let (logp, grad) = score(model, prompt, &y)?;
        let pi = logp.exp();
        terms.push(grad.into_iter().map(|v| pi * v).collect());
    }
    Ok(pairwise_sum(terms))
}

/// Draws `n` fixed-length responses by ancestral sampling at temperature 1.
/// Draw `i` uses its own generator seeded from `(seed, i)`.
pub fn sample_responses(model: &Model, prompt: &[usize], horizon: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let c = model.config();
    if prompt.is_empty() || horizon == 0 || prompt.len() + horizon > c.context_length {
        return Err(LabError::InvalidInput(format!(
            "prompt length {} with horizon {horizon} does not fit context {}",
            prompt.len(),
            c.context_length
        )));
    }
    let v = c.vocab_size;
    let mut out = Vec::with_capacity(n);
    let mut probs = vec![0.0; v];
    let mut start = 0;
    while start < n {
        let m = SAMPLE_CHUNK.min(n - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + m)
            .map(|i| ChaCha8Rng::seed_from_u64(derive_indexed(seed, "theory-sample", i as u64)))
            .collect();
        let mut dec = Decoder::new(model, m);
        let mut logits = Vec::new();
        for &tok in prompt {
            let feeds: Vec<(usize, usize)> = (0..m).map(|s| (s, tok)).collect();
            logits = dec.step(&feeds)?;
        }
        let mut ys = vec![Vec::with_capacity(horizon); m];
        for t in 0..horizon {
            for (s, y) in ys.iter_mut().enumerate() {
                softmax_row(&logits[s * v..(s + 1) * v], &mut probs);
                y.push(categorical(&probs, rngs[s].random()));
            }
            if t + 1 < horizon {
                let feeds: Vec<(usize, usize)> = ys.iter().enumerate().map(|(s, y)| (s, y[t])).collect();
                logits = dec.step(&feeds)?;
            }
        }
        out.extend(ys);
        start += m;
    }
    Ok(out)
}

/// Inverse-CDF draw for `u ∈ [0, 1)`.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Monte-Carlo estimate of `E_y[f(y)]` where each draw's vector is
/// `coef(y, π(y)) · ∇log π(y|x)`. Scores are computed once per distinct `y`.
fn estimate(
    model: &Model,
    prompt: &[usize],
    horizon: usize,
    n: usize,
    seed: u64,
    coef: &dyn Fn(&[usize], f64) -> (f64, f64),
) -> Result<GradientEstimate> {
    if n == 0 {
        return Err(LabError::InvalidInput("n_samples must be >= 1".into()));
    }
    let draws = sample_responses(model, prompt, horizon, n, seed)?;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for y in draws {
        *counts.entry(y).or_default() += 1;
    }
    let dim = model.num_parameters();
    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    let mut norm_total = 0.0;
    let mut samples = Vec::with_capacity(counts.len());
    for (y, count) in counts {
        let (logp, grad) = score(model, prompt, &y)?;
        let pi = logp.exp();
        let (reward, c) = coef(&y, pi);
        let k = count as f64;
        norm_total += k * grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let contribution: Vec<f64> = grad.iter().map(|g| c * g).collect();
        for ((s, q), v) in sum.iter_mut().zip(&mut sumsq).zip(&contribution) {
            *s += k * v;
            *q += k * v * v;
        }
        samples.push(EstimatorSample {
            sequence: y,
            count,
            probability: pi,
            reward,
            contribution,
        });
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std_error = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            if n < 2 {
                0.0
            } else {
                ((q - nf * m * m).max(0.0) / (nf - 1.0) / nf).sqrt()
            }
        })
        .collect();
    Ok(GradientEstimate {
        n_samples: n,
        mean,
        std_error,
        mean_score_norm: norm_total / nf,
        samples,
    })
}

/// Sequence-level policy gradient `mean_i r(x, y_i) · ∇log π(y_i|x)` with
/// `y_i ~ π(·|x)` of length `horizon`.
pub fn policy_gradient_estimate(
    model: &Model,
    prompt: &[usize],
    horizon: usize,
    reward_fn: &dyn Fn(&[usize]) -> f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    estimate(model, prompt, horizon, n_samples, seed, &|y, _| {
        let r = reward_fn(y);
        (r, r)
    })
}

/// On-policy estimate of the SFT gradient:
/// `mean_i (1[y_i=y⋆] / π(y_i|x)) · (−∇log π(y_i|x))`.
pub fn importance_corrected_estimate(
    model: &Model,
    prompt: &[usize],
    y_star: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    estimate(model, prompt, y_star.len(), n_samples, seed, &|y, pi| {
        let r = if y == y_star { 1.0 } else { 0.0 };
        (r, -r / pi.max(PROB_FLOOR))
    })
}

fn mean_coordinate_variance(est: &GradientEstimate) -> f64 {
    let n = est.n_samples as f64;
    if est.n_samples < 2 {
        return 0.0;
    }
    let dim = est.mean.len() as f64;
    est.std_error.iter().map(|se| se * se * n).sum::<f64>() / dim
}

/// Compares two single-token estimators of the SFT direction:
/// A = `(1[y=y⋆]/π(y)) · (−∇log π(y))` and B = `1[y=y⋆] · (−∇log π(y))`.
/// Variances are per coordinate, averaged over coordinates. For the two-point
/// distributions involved, `Var(A)/Var(B) = 1/p⋆²`.
///
/// A is exactly `B/p⋆` draw by draw, so each estimator gets its own draws;
/// otherwise the empirical ratio would equal the closed form identically.
pub fn variance_probe(model: &Model, prompt: &[usize], y_star: usize, n_samples: usize, seed: u64) -> Result<VarianceReport> {
    let ys = [y_star];
    let seed_a = derive_seed(seed, "variance-probe-a");
    let seed_b = derive_seed(seed, "variance-probe-b");
    let a = importance_corrected_estimate(model, prompt, &ys, n_samples, seed_a)?;
    let b = estimate(model, prompt, 1, n_samples, seed_b, &|y, _| {
        let r = if y == ys { 1.0 } else { 0.0 };
        (r, -r)
    })?;
    let p_star = score(model, prompt, &ys)?.0.exp();
    let hits = a.samples.iter().filter(|s| s.reward == 1.0).map(|s| s.count).sum();
    let var_a = mean_coordinate_variance(&a);
    let var_b = mean_coordinate_variance(&b);
    Ok(VarianceReport {
        p_star,
        n_samples,
        hits,
        var_sft_implicit: var_a,
        var_dft: var_b,
        empirical_ratio: (var_b > 0.0).then(|| var_a / var_b),
        analytic_ratio: 1.0 / (p_star * p_star),
    })
}

/// Copy of `model` whose next-token distribution puts probability `p` on
/// `token` and spreads the rest evenly, for every context. Zeroes the output
/// projection and sets the head bias.
pub fn with_target_probability(model: &Model, token: usize, p: f64) -> Result<Model> {
    let v = model.config().vocab_size;
    if token >= v {
        return Err(LabError::UnknownTokenId(token));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(LabError::InvalidInput(format!("target probability {p} not in (0, 1]")));
    }
    let logit = if p == 1.0 {
        1e3
    } else {
        (p * (v - 1) as f64 / (1.0 - p)).ln()
    };
    let mut m = model.clone();
    m.zero_output_head();
    let bias = m.parameter_mut("head.b").expect("head bias exists");
    bias.values_mut()[token] = logit;
    Ok(m)
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Distribution of the implicit weight `w_t = 1/p_t` over every response
/// token, with `p_t` floored at 1e-12.
pub fn implicit_reward_scan(model: &Model, demos: &[Demonstration]) -> Result<RewardScan> {
    if demos.is_empty() {
        return Err(LabError::InvalidInput("empty dataset".into()));
    }
    let mut ws = Vec::new();
    let mut flagged = Vec::new();
    for chunk_start in (0..demos.len()).step_by(64) {
        let chunk = &demos[chunk_start..(chunk_start + 64).min(demos.len())];
        let batch = TeacherForcedBatch::new(&Demonstration::pairs(chunk))?;
        for (i, probs) in model.teacher_forced_probs(&batch)?.into_iter().enumerate() {
            for (t, p) in probs.into_iter().enumerate() {
                let w = 1.0 / p.max(PROB_FLOOR);
                if w > 100.0 {
                    flagged.push((chunk_start + i, t));
                }
                ws.push(w);
            }
        }
    }
    ws.sort_by(f64::total_cmp);
    Ok(RewardScan {
        tokens: ws.len(),
        min: ws[0],
        p50: quantile(&ws, 0.5),
        p90: quantile(&ws, 0.9),
        p99: quantile(&ws, 0.99),
        max: ws[ws.len() - 1],
        over_100: flagged.len(),
        flagged,
    })
}
