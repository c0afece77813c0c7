//! Acceptance suite: one PASS/FAIL line per criterion. Exact oracles for the
//! gradient identities, pinned-seed directional checks for the training
//! runs. Exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use dftlab::autodiff::{Graph, Var};
use dftlab::cli::config::LabConfig;
use dftlab::cli::pipeline::{self, Comparison, RftComparison};
use dftlab::losses::{dft_token_loss, focal_loss, iw_sft_loss, sft_loss, Reduction};
use dftlab::model::{Model, ModelConfig};
use dftlab::seed::rng_for;
use dftlab::theory::{
    exact_policy_expectation, exact_score_expectation, sft_gradient, variance_probe, with_target_probability,
    EnumerationBudget,
};
use dftlab::training::{adamw_step, AdamState, LrSchedule, Schedule};
use dftlab::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    id: usize,
    passed: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn print(&self) {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        println!("{tag} criterion {}: {}", self.id, self.summary);
        for d in &self.details {
            println!("    {d}");
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Largest coordinate error relative to the largest reference coordinate.
fn norm_rel(a: &[f64], reference: &[f64]) -> f64 {
    common::max_abs_diff(a, reference) / max_abs(reference).max(1e-300)
}

/// Random small model with weights scaled up so the policy is not uniform.
fn random_model(rng: &mut ChaCha8Rng, vocab: usize, d: usize, layers: usize, seed: u64) -> Model {
    let mut m = Model::new(ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        context_length: 12,
        seed,
    })
    .unwrap();
    let scale = rng.random_range(4.0..10.0);
    for (_, t) in m.parameters_mut() {
        if t.shape().len() == 2 {
            t.values_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    m
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let p = rng.random_range(1..=4);
    let r = rng.random_range(1..=5);
    (
        (0..p).map(|_| rng.random_range(0..vocab)).collect(),
        (0..r).map(|_| rng.random_range(0..vocab)).collect(),
    )
}

/// Gradient with respect to all parameters of a scalar built from the
/// response log-probabilities.
fn param_grad(model: &Model, prompt: &[usize], response: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let lp = model.token_log_probs(&mut g, &bound, prompt, response).unwrap();
    let loss = build(&mut g, lp);
    g.backward(loss).unwrap();
    model.graph_flat_grad(&g, &bound)
}

/// `∇(−log p_t)` for every response position, from single-token SFT losses.
fn per_token_sft_grads(model: &Model, prompt: &[usize], response: &[usize]) -> Vec<Vec<f64>> {
    (0..response.len())
        .map(|t| {
            let mut mask = vec![false; response.len()];
            mask[t] = true;
            param_grad(model, prompt, response, &|g, lp| sft_loss(g, lp, &mask, Reduction::Sum).unwrap())
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = rng_for(1, "acceptance-c1");
    let (mut worst_ref, mut worst_fd): (f64, f64) = (0.0, 0.0);
    for i in 0..20 {
        let vocab = rng.random_range(3..=8);
        let d = [8, 16, 32][i % 3];
        let layers = 1 + i % 2;
        let model = random_model(&mut rng, vocab, d, layers, 100 + i as u64);
        let (prompt, response) = random_pair(&mut rng, vocab);
        let t = response.len() as f64;
        let mask = vec![true; response.len()];

        let dft = param_grad(&model, &prompt, &response, &|g, lp| dft_token_loss(g, lp, &mask, Reduction::Mean).unwrap());
        let lp0 = model.token_log_prob_values(&prompt, &response).unwrap();
        let p0: Vec<f64> = lp0.iter().map(|l| l.exp()).collect();
        let mut reference = vec![0.0; dft.len()];
        for (gt, &p) in per_token_sft_grads(&model, &prompt, &response).iter().zip(&p0) {
            for (r, v) in reference.iter_mut().zip(gt) {
                *r += p * v / t;
            }
        }
        worst_ref = worst_ref.max(norm_rel(&dft, &reference));

        // Central differences of the surrogate with weights frozen at p_t(θ0).
        let base = model.flat_values();
        let mut probe = model.clone();
        let surrogate = |m: &Model| -> f64 {
            let lp = m.token_log_prob_values(&prompt, &response).unwrap();
            lp.iter().zip(&p0).map(|(l, p)| -p * l).sum::<f64>() / t
        };
        let mut coords: Vec<usize> = (0..base.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(400);
        let (mut fd, mut an) = (Vec::new(), Vec::new());
        for &c in &coords {
            let mut v = base.clone();
            v[c] = base[c] + common::FD_STEP;
            probe.set_flat_values(&v).unwrap();
            let plus = surrogate(&probe);
            v[c] = base[c] - common::FD_STEP;
            probe.set_flat_values(&v).unwrap();
            let minus = surrogate(&probe);
            fd.push((plus - minus) / (2.0 * common::FD_STEP));
            an.push(dft[c]);
        }
        worst_fd = worst_fd.max(common::max_abs_diff(&fd, &an) / max_abs(&dft));
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        passed: worst_ref <= 1e-10 && worst_fd <= 1e-5 && secs < 60.0,
        summary: format!(
            "DFT gradient vs p-scaled SFT gradient rel {worst_ref:.2e} (<= 1e-10), vs central differences rel {worst_fd:.2e} (<= 1e-5), {secs:.1}s"
        ),
        details: vec![],
    }
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut rng = rng_for(2, "acceptance-c2");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for v in [2, 3] {
        for t in 1..=4 {
            for k in 0..5 {
                let model = random_model(&mut rng, v, 8, 1, 1000 + 37 * cases + k);
                let prompt: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..v)).collect();
                let y: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
                let exact = exact_policy_expectation(&model, &prompt, &y, &EnumerationBudget::new(v, t)).unwrap();
                let auto = sft_gradient(&model, &prompt, &y).unwrap();
                worst = worst.max(common::max_abs_diff(&exact, &auto));
                cases += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        passed: worst <= 1e-10 && secs < 120.0,
        summary: format!("exact importance-weighted expectation vs SFT gradient, {cases} cases, max abs {worst:.2e} (<= 1e-10), {secs:.1}s"),
        details: vec![],
    }
}

fn criterion_3() -> Outcome {
    let mut rng = rng_for(3, "acceptance-c3");
    let mut worst: f64 = 0.0;
    let mut smallest_removed = f64::INFINITY;
    for i in 0..20 {
        let vocab = rng.random_range(3..=8);
        let model = random_model(&mut rng, vocab, 8, 1, 2000 + i);
        let (prompt, response) = random_pair(&mut rng, vocab);
        let mask = vec![true; response.len()];
        let measured = param_grad(&model, &prompt, &response, &|g, lp| dft_token_loss(g, lp, &mask, Reduction::Sum).unwrap());
        let full = param_grad(&model, &prompt, &response, &|g, lp| {
            let p = g.exp(lp);
            let neg = g.scale(lp, -1.0);
            let prod = g.mul(p, neg).unwrap();
            g.sum(prod)
        });
        // Removed term: Σ_t (−log p_t)·∇p_t, with ∇p_t = p_t·∇log p_t = −p_t·∇(−log p_t).
        let lp = model.token_log_prob_values(&prompt, &response).unwrap();
        let mut removed = vec![0.0; measured.len()];
        for (gt, &l) in per_token_sft_grads(&model, &prompt, &response).iter().zip(&lp) {
            let p = l.exp();
            for (r, v) in removed.iter_mut().zip(gt) {
                *r += -l * -p * v;
            }
        }
        let predicted: Vec<f64> = measured.iter().zip(&removed).map(|(a, b)| a + b).collect();
        worst = worst.max(norm_rel(&predicted, &full));
        smallest_removed = smallest_removed.min(max_abs(&removed) / max_abs(&full));
    }
    Outcome {
        id: 3,
        passed: worst <= 1e-10,
        summary: format!("sg(p)(-log p) gradient + removed term vs p(-log p) gradient, rel {worst:.2e} (<= 1e-10)"),
        details: vec![format!("smallest removed-term share of the full gradient: {smallest_removed:.3}")],
    }
}

fn criterion_4() -> Outcome {
    let base = Model::new(ModelConfig {
        vocab_size: 5,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_length: 4,
        seed: 44,
    })
    .unwrap();
    let mut passed = true;
    let mut details = Vec::new();
    for p_star in [0.05, 0.1, 0.5] {
        let model = with_target_probability(&base, 3, p_star).unwrap();
        let logits = model.logits(&[vec![1]]).unwrap();
        let row = &logits.values()[..5];
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        let p = row[3].exp() / z;
        let analytic = 1.0 / (p * p);
        let r = variance_probe(&model, &[1], 3, 100_000, 4).unwrap();
        let empirical = r.empirical_ratio.unwrap_or(f64::NAN);
        let ok = empirical / analytic >= 0.5 && empirical / analytic <= 2.0 && (r.analytic_ratio - analytic).abs() <= 1e-9 * analytic;
        passed &= ok;
        details.push(format!("p*={p_star}: empirical {empirical:.2}, closed form {analytic:.2}, hits {}", r.hits));
    }
    Outcome {
        id: 4,
        passed,
        summary: "Var(implicit-reward SFT estimator)/Var(indicator estimator) within 2x of 1/p*^2 at n=100k".into(),
        details,
    }
}

fn criterion_5() -> Outcome {
    let mut rng = rng_for(5, "acceptance-c5");
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let model = random_model(&mut rng, 3, 8, 1, 3000 + k);
        let e = exact_score_expectation(&model, &[2, 0], &EnumerationBudget::new(3, 3)).unwrap();
        worst = worst.max(max_abs(&e));
    }
    Outcome {
        id: 5,
        passed: worst <= 1e-10,
        summary: format!("E_y[grad log pi(y|x)] by enumeration at V=3, T=3: max |.| {worst:.2e} (<= 1e-10)"),
        details: vec![],
    }
}

fn leaf_loss(lp: &[f64], shape: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::param(shape.to_vec(), lp.to_vec()).unwrap());
    let y = build(&mut g, x);
    g.backward(y).unwrap();
    (g.scalar(y), g.grad(x).unwrap().to_vec())
}

fn criterion_6() -> Outcome {
    let mut rng = rng_for(6, "acceptance-c6");
    let (mut focal_gap, mut iw_gap): (f64, f64) = (0.0, 0.0);
    for i in 0..50 {
        let (b, t) = (rng.random_range(1..=4), rng.random_range(1..=7));
        let lp: Vec<f64> = (0..b * t).map(|_| -rng.random_range(1e-3..6.0)).collect();
        let mut mask: Vec<bool> = (0..b * t).map(|_| rng.random_bool(0.7)).collect();
        for r in 0..b {
            mask[r * t + rng.random_range(0..t)] = true;
        }
        let red = if i % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
        let shape = [b, t];
        let (sv, sg) = leaf_loss(&lp, &shape, &|g, x| sft_loss(g, x, &mask, red).unwrap());
        let (fv, fg) = leaf_loss(&lp, &shape, &|g, x| focal_loss(g, x, &mask, 0.0, red).unwrap());
        let (iv, ig) = leaf_loss(&lp, &shape, &|g, x| iw_sft_loss(g, x, &lp, &mask, 4.0, red).unwrap());
        focal_gap = focal_gap.max((sv - fv).abs()).max(common::max_abs_diff(&sg, &fg));
        iw_gap = iw_gap.max((sv - iv).abs()).max(common::max_abs_diff(&sg, &ig));
    }
    Outcome {
        id: 6,
        passed: focal_gap <= 1e-12 && iw_gap <= 1e-12,
        summary: format!("focal(gamma=0) vs SFT {focal_gap:.2e}, IW-SFT(p_ref=p) vs SFT {iw_gap:.2e} (<= 1e-12, values and gradients)"),
        details: vec![],
    }
}

fn criterion_7() -> Outcome {
    let s = LrSchedule::new(1e-3, 0.1, 1000, Schedule::Cosine);
    // Hand-computed: progress 225/900 = 1/4, lr = 1e-3 · (1 + cos(π/4)) / 2.
    let mid = 0.000_853_553_390_593_273_8;
    let lr_ok = s.lr_at(100) == 1e-3 && s.lr_at(1000).abs() <= 1e-18 && (s.lr_at(325) - mid).abs() <= 1e-15;

    // Hand-computed AdamW on one scalar: m̂ = v̂ = 1 after one step.
    let mut p = [0.0];
    let mut st = AdamState::new(1);
    adamw_step(&mut p, &[1.0], &mut st, 0.1, 0.0).unwrap();
    let one_step = -0.1 / (1.0 + 1e-8);
    let mut adam_ok = (p[0] - one_step).abs() <= 1e-9;

    // Two steps with decoupled decay, recomputed from the definition.
    let (lr, wd) = (0.05, 0.1);
    let grads = [[0.3, -1.2], [-0.7, 0.4]];
    let mut q = [0.5, -2.0];
    let mut st = AdamState::new(2);
    let mut expect = q;
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for (k, g) in grads.iter().enumerate() {
        adamw_step(&mut q, g, &mut st, lr, wd).unwrap();
        let step = (k + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(step));
            let vh = v[i] / (1.0 - 0.999f64.powi(step));
            expect[i] -= lr * (mh / (vh.sqrt() + 1e-8) + wd * expect[i]);
        }
    }
    adam_ok &= common::max_abs_diff(&q, &expect) <= 1e-9;
    Outcome {
        id: 7,
        passed: lr_ok && adam_ok,
        summary: format!(
            "lr_at warm-up end {:e}, final {:e}, mid-decay {:.16e} (hand {mid:.16e}); AdamW one step {:.11} (hand {one_step:.11})",
            s.lr_at(100),
            s.lr_at(1000),
            s.lr_at(325),
            p[0]
        ),
        details: vec![],
    }
}

fn seed_config(seed: u64) -> LabConfig {
    LabConfig::load(None, &[format!("seed={seed}")]).unwrap()
}

struct SeedRuns {
    seed: u64,
    cmp: Comparison,
    rft: Result<RftComparison, String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_8(runs: &[SeedRuns], secs: f64) -> Outcome {
    let mut details = Vec::new();
    for r in runs {
        let (s, d) = (&r.cmp.sft, &r.cmp.dft);
        let dir_ok = d.eval_ood.avg_at_k >= s.eval_ood.avg_at_k;
        details.push(format!(
            "seed {}: in-dist SFT {:.4} DFT {:.4} | OOD SFT {:.4} DFT {:.4} | directional {}",
            r.seed,
            s.eval_in.avg_at_k,
            d.eval_in.avg_at_k,
            s.eval_ood.avg_at_k,
            d.eval_ood.avg_at_k,
            if dir_ok { "holds" } else { "violated" }
        ));
    }
    let ood_sft = mean(runs.iter().map(|r| r.cmp.sft.eval_ood.avg_at_k));
    let ood_dft = mean(runs.iter().map(|r| r.cmp.dft.eval_ood.avg_at_k));
    let in_sft = mean(runs.iter().map(|r| r.cmp.sft.eval_in.avg_at_k));
    let in_dft = mean(runs.iter().map(|r| r.cmp.dft.eval_in.avg_at_k));
    if ood_sft == 0.0 && ood_dft == 0.0 {
        details.push("OOD accuracy is 0 for both losses, so the OOD comparison holds only as 0 >= 0".into());
    }
    Outcome {
        id: 8,
        passed: ood_dft >= ood_sft && (in_dft - in_sft).abs() <= 0.05 && secs <= 1800.0,
        summary: format!(
            "mean OOD avg@16 DFT {ood_dft:.4} >= SFT {ood_sft:.4}; mean in-dist DFT {in_dft:.4} vs SFT {in_sft:.4} (|diff| {:.4} <= 0.05); {secs:.0}s (<= 1800)",
            (in_dft - in_sft).abs()
        ),
        details,
    }
}

fn criterion_9(runs: &[SeedRuns]) -> Outcome {
    let mut passed = true;
    let mut details = Vec::new();
    for r in runs {
        let (s, d) = (&r.cmp.sft.histogram, &r.cmp.dft.histogram);
        let ok = d.lowest() > s.lowest() && d.highest() >= s.highest();
        passed &= ok;
        details.push(format!(
            "seed {}: p<0.05 SFT {} DFT {} | p>0.95 SFT {} DFT {} | of {} tokens",
            r.seed,
            s.lowest(),
            d.lowest(),
            s.highest(),
            d.highest(),
            s.total
        ));
        let low: Vec<String> = r.cmp.dft.low_tokens.iter().take(5).map(|(t, n)| format!("{t}:{n}")).collect();
        details.push(format!("seed {}: DFT low-probability tokens {}", r.seed, low.join(" ")));
    }
    Outcome {
        id: 9,
        passed,
        summary: "DFT has strictly more training tokens below p=0.05 and no fewer above p=0.95 than SFT at every seed".into(),
        details,
    }
}

fn criterion_10(runs: &[SeedRuns]) -> Outcome {
    let mut details = Vec::new();
    let mut completed = true;
    let (mut rft_ood, mut dft_ood) = (Vec::new(), Vec::new());
    for r in runs {
        match &r.rft {
            Ok(c) => {
                completed &= c.stats.keep_rate > 0.0;
                rft_ood.push(c.rft.eval_ood.avg_at_k);
                dft_ood.push(c.dft.eval_ood.avg_at_k);
                details.push(format!(
                    "seed {}: keep rate {:.4} ({} kept after dedupe) | in-dist RFT {:.4} DFT {:.4} | OOD RFT {:.4} DFT {:.4} | directional {}",
                    r.seed,
                    c.stats.keep_rate,
                    c.stats.retained,
                    c.rft.eval_in.avg_at_k,
                    c.dft.eval_in.avg_at_k,
                    c.rft.eval_ood.avg_at_k,
                    c.dft.eval_ood.avg_at_k,
                    if c.dft.eval_ood.avg_at_k >= c.rft.eval_ood.avg_at_k { "holds" } else { "violated" }
                ));
            }
            Err(e) => {
                completed = false;
                details.push(format!("seed {}: pipeline failed: {e}", r.seed));
            }
        }
    }
    let (m_rft, m_dft) = if completed {
        (mean(rft_ood.iter().copied()), mean(dft_ood.iter().copied()))
    } else {
        (f64::NAN, f64::NAN)
    };
    if completed && m_rft == 0.0 && m_dft == 0.0 {
        details.push("OOD accuracy is 0 for both losses, so the OOD comparison holds only as 0 >= 0".into());
    }
    Outcome {
        id: 10,
        passed: completed && m_dft >= m_rft,
        summary: format!("self-sample (n=4, T=1.0) -> verify -> retrain completes with keep rate > 0; mean OOD offline DFT {m_dft:.4} >= RFT {m_rft:.4}"),
        details,
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn criterion_11(first: &Path, second: &Path) -> Outcome {
    let files = [
        "compare/sft/metrics.csv",
        "compare/dft/metrics.csv",
        "rft/rft-sft/metrics.csv",
        "rft/rft-dft/metrics.csv",
        "compare/report.csv",
    ];
    let mut passed = true;
    let mut details = Vec::new();
    for f in files {
        let (a, b) = (read(&first.join(f)), read(&second.join(f)));
        let same = !a.is_empty() && a == b;
        passed &= same;
        details.push(format!("{f}: {} bytes, {}", a.len(), if same { "identical" } else { "DIFFERENT" }));
    }
    Outcome {
        id: 11,
        passed,
        summary: "repeating the seed-0 acceptance run yields byte-identical metrics CSVs".into(),
        details,
    }
}

fn run_seed(seed: u64, root: &Path) -> SeedRuns {
    let cfg = seed_config(seed);
    let cmp = pipeline::compare(&cfg, &root.join("compare")).expect("SFT/DFT comparison");
    let rft = pipeline::rft_compare(&cfg, &cmp.base, &cmp.splits, &root.join("rft")).map_err(|e| e.to_string());
    SeedRuns { seed, cmp, rft }
}

fn main() {
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(), criterion_7()];
    for o in &outcomes {
        o.print();
    }

    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let runs: Vec<SeedRuns> = SEEDS.iter().map(|&s| run_seed(s, &tmp.path().join(format!("seed{s}")))).collect();
    let secs = started.elapsed().as_secs_f64();
    let rerun = tmp.path().join("seed0-again");
    run_seed(0, &rerun);
    let late = [
        criterion_8(&runs, secs),
        criterion_9(&runs),
        criterion_10(&runs),
        criterion_11(&tmp.path().join("seed0"), &rerun),
    ];
    for o in &late {
        o.print();
    }
    outcomes.extend(late);

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
