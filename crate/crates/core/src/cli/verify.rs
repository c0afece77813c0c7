//! Runtime self-check: the gradient identities and optimizer arithmetic the
//! rest of the lab relies on, each checked against an exact value.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::losses::{dft_token_loss, focal_loss, iw_sft_loss, sft_loss, Reduction};
use crate::model::{Model, ModelConfig};
use crate::theory::{
    exact_policy_expectation, exact_score_expectation, sft_gradient, variance_probe, with_target_probability,
    EnumerationBudget,
};
use crate::training::{adamw_step, AdamState, LrSchedule, Schedule};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_model(v: usize, seed: u64) -> Result<Model> {
    let mut m = Model::new(ModelConfig {
        vocab_size: v,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_length: 8,
        seed,
    })?;
    // Larger weights keep the policy away from uniform.
    for (_, t) in m.parameters_mut() {
        if t.shape().len() == 2 {
            t.values_mut().iter_mut().for_each(|x| *x *= 12.0);
        }
    }
    Ok(m)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs(a, b) / scale
}

/// Gradient of a scalar built from the response log-probabilities.
fn grad_of(
    model: &Model,
    prompt: &[usize],
    response: &[usize],
    build: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lp = model.token_log_probs(&mut g, &bound, prompt, response)?;
    let loss = build(&mut g, lp)?;
    let value = g.scalar(loss);
    g.backward(loss)?;
    Ok((value, model.graph_flat_grad(&g, &bound)))
}

fn score_mean() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let m = random_model(3, seed)?;
        let e = exact_score_expectation(&m, &[0, 2], &EnumerationBudget::new(3, 3))?;
        worst = worst.max(e.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    Ok(Check {
        name: "score-function mean is zero (V=3, T=3)",
        passed: worst <= 1e-10,
        detail: format!("max |E[grad log pi]| = {worst:.2e}"),
    })
}

fn collapse() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for v in [2, 3] {
        for t in 1..=4 {
            let m = random_model(v, 10 * v as u64 + t as u64)?;
            let y: Vec<usize> = (0..t).map(|i| (i * 7 + 1) % v).collect();
            let exact = exact_policy_expectation(&m, &[0], &y, &EnumerationBudget::new(v, t))?;
            let auto = sft_gradient(&m, &[0], &y)?;
            worst = worst.max(max_abs(&exact, &auto));
        }
    }
    Ok(Check {
        name: "importance-weighted expectation equals the SFT gradient",
        passed: worst <= 1e-10,
        detail: format!("max abs diff = {worst:.2e}"),
    })
}

/// DFT gradient against `Σ_t p_t ∇(−log p_t)` and the full `p(−log p)`
/// gradient against DFT plus the removed `(−log p) ∇p` term.
fn dft_identities() -> Result<(Check, Check)> {
    let mut worst_id: f64 = 0.0;
    let mut worst_sg: f64 = 0.0;
    for seed in 0..5 {
        let m = random_model(5, 100 + seed)?;
        let (prompt, response) = ([1, 3], [4, 0, 2]);
        let lp = m.token_log_prob_values(&prompt, &response)?;
        let (_, dft) = grad_of(&m, &prompt, &response, |g, lp| dft_token_loss(g, lp, &[true; 3], Reduction::Sum))?;
        let mut reference = vec![0.0; dft.len()];
        let mut removed = vec![0.0; dft.len()];
        for t in 0..3 {
            let mut mask = [false; 3];
            mask[t] = true;
            let (_, gt) = grad_of(&m, &prompt, &response, |g, lp| sft_loss(g, lp, &mask, Reduction::Sum))?;
            let p = lp[t].exp();
            for ((r, x), &gv) in reference.iter_mut().zip(removed.iter_mut()).zip(&gt) {
                *r += p * gv;
                // gv = −∇log p_t, so (−log p)·∇p = (−log p)·p·(−gv).
                *x += -lp[t] * p * -gv;
            }
        }
        worst_id = worst_id.max(max_rel(&dft, &reference));
        let (_, full) = grad_of(&m, &prompt, &response, |g, lp| {
            let p = g.exp(lp);
            let nlp = g.scale(lp, -1.0);
            let prod = g.mul(p, nlp)?;
            Ok(g.sum(prod))
        })?;
        let rebuilt: Vec<f64> = dft.iter().zip(&removed).map(|(a, b)| a + b).collect();
        worst_sg = worst_sg.max(max_rel(&rebuilt, &full));
    }
    Ok((
        Check {
            name: "DFT gradient equals the probability-scaled SFT gradient",
            passed: worst_id <= 1e-10,
            detail: format!("max rel diff = {worst_id:.2e}"),
        },
        Check {
            name: "stop-gradient removes exactly the (-log p) grad p term",
            passed: worst_sg <= 1e-10,
            detail: format!("max rel diff = {worst_sg:.2e}"),
        },
    ))
}

fn variance() -> Result<Check> {
    let base = random_model(4, 7)?;
    let m = with_target_probability(&base, 2, 0.1)?;
    let r = variance_probe(&m, &[0], 2, 100_000, 3)?;
    let ratio = r.empirical_ratio.unwrap_or(f64::INFINITY);
    let factor = ratio / r.analytic_ratio;
    Ok(Check {
        name: "implicit-reward estimator variance ratio is 1/p*^2 (p*=0.1)",
        passed: (0.5..=2.0).contains(&factor),
        detail: format!("empirical {ratio:.3}, analytic {:.3}, hits {}", r.analytic_ratio, r.hits),
    })
}

fn degeneracies() -> Result<Check> {
    let m = random_model(6, 21)?;
    let (prompt, response) = ([1, 2, 3], [5, 4, 0, 1]);
    let mask = [true; 4];
    let reference = m.token_log_prob_values(&prompt, &response)?;
    let (sv, sg) = grad_of(&m, &prompt, &response, |g, lp| sft_loss(g, lp, &mask, Reduction::Mean))?;
    let (fv, fg) = grad_of(&m, &prompt, &response, |g, lp| focal_loss(g, lp, &mask, 0.0, Reduction::Mean))?;
    let (iv, ig) = grad_of(&m, &prompt, &response, |g, lp| {
        iw_sft_loss(g, lp, &reference, &mask, 4.0, Reduction::Mean)
    })?;
    let worst = [(sv - fv).abs(), (sv - iv).abs(), max_abs(&sg, &fg), max_abs(&sg, &ig)]
        .into_iter()
        .fold(0.0, f64::max);
    Ok(Check {
        name: "focal(gamma=0) and IW-SFT(p_ref=p) reduce to SFT",
        passed: worst <= 1e-12,
        detail: format!("max diff = {worst:.2e}"),
    })
}

fn schedule_and_optimizer() -> Check {
    let s = LrSchedule::new(1e-3, 0.1, 100, Schedule::Cosine);
    let mid = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * 45.0 / 90.0).cos());
    let lr_ok = (s.lr_at(10) - 1e-3).abs() <= 1e-15 && s.lr_at(100).abs() <= 1e-15 && (s.lr_at(55) - mid).abs() <= 1e-15;
    let mut p = [0.0];
    let mut state = AdamState::new(1);
    let adam_ok = adamw_step(&mut p, &[1.0], &mut state, 0.1, 0.0).is_ok()
        && (p[0] - -0.1 / (1.0 + 1e-8)).abs() <= 1e-9;
    Check {
        name: "cosine warm-up schedule and AdamW step match closed forms",
        passed: lr_ok && adam_ok,
        detail: format!("lr(55) = {:.6e}, one AdamW step = {:.11}", s.lr_at(55), p[0]),
    }
}

pub fn run_checks() -> Result<Vec<Check>> {
    let (identity, separation) = dft_identities()?;
    Ok(vec![
        identity,
        collapse()?,
        separation,
        variance()?,
        score_mean()?,
        degeneracies()?,
        schedule_and_optimizer(),
    ])
}
