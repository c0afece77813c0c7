//! Test-only oracles. Nothing here calls into the reverse pass.
#![allow(dead_code)]

use dftlab::autodiff::{Graph, Var};
use dftlab::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

/// Central finite differences of `f` with respect to every entry of every input.
pub fn central_differences(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for i in 0..inputs[t].len() {
            let orig = work[t].values()[i];
            work[t].values_mut()[i] = orig + step;
            let plus = f(&work);
            work[t].values_mut()[i] = orig - step;
            let minus = f(&work);
            work[t].values_mut()[i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds an output (any shape) from input vars.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Evaluates `build` forward only, with the inputs recorded as constants.
pub fn eval_output(build: &Builder<'_>, inputs: &[Tensor]) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.constant(t.shape().to_vec(), t.values().to_vec()).unwrap())
        .collect();
    let y = build(&mut g, &vars).unwrap();
    g.value(y).to_vec()
}

/// Analytic gradients of `weights · build(inputs)`.
pub fn analytic_gradients(build: &Builder<'_>, weights: &[f64], inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut p = t.clone();
            p.set_requires_grad(true);
            g.leaf(&p)
        })
        .collect();
    let y = build(&mut g, &vars).unwrap();
    let y = g.reshape(y, vec![weights.len()]).unwrap();
    let c = g.constant(vec![weights.len()], weights.to_vec()).unwrap();
    let p = g.mul(y, c).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect()
}

/// Central differences of `weights · build(inputs)`. Outputs are differenced
/// entry by entry before projecting, which keeps round-off proportional to
/// each output rather than to the projected sum.
pub fn numeric_gradients(build: &Builder<'_>, weights: &[f64], inputs: &[Tensor], step: f64) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for i in 0..inputs[t].len() {
            let orig = work[t].values()[i];
            work[t].values_mut()[i] = orig + step;
            let plus = eval_output(build, &work);
            work[t].values_mut()[i] = orig - step;
            let minus = eval_output(build, &work);
            work[t].values_mut()[i] = orig;
            g[i] = plus
                .iter()
                .zip(&minus)
                .zip(weights)
                .map(|((p, m), w)| w * (p - m))
                .sum::<f64>()
                / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Largest relative error between analytic and central-difference gradients
/// of `weights · build(inputs)` over all inputs.
pub fn gradcheck(weights: &[f64], build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let analytic = analytic_gradients(build, weights, inputs);
    let numeric = numeric_gradients(build, weights, inputs, FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_relative_error(a, n, REL_FLOOR))
        .fold(0.0, f64::max)
}
