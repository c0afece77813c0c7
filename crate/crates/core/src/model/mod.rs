//! Small decoder-only transformer: learned absolute positions, pre-norm
//! residual blocks, GELU MLP, untied output head.

mod batch;
pub mod checkpoint;
mod decode;

use std::rc::Rc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::MASK_VALUE;
use crate::autodiff::{Graph, Var};
use crate::error::{LabError, Result};
use crate::seed;
use crate::tensor::Tensor;

pub use batch::TeacherForcedBatch;
pub use decode::{sample, sample_batch, Decoder, Decoding, SampleRequest};

/// Reserved token ids shared by every task vocabulary.
pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;

const INIT_STD: f64 = 0.02;
const PARAMS_PER_LAYER: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_length: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.context_length == 0 {
            return bad("d_model, n_layers, n_heads and context_length must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count:
    /// `V·d + T·d + L·(12·d² + 13·d) + 2·d + d·V + V`.
    pub fn parameter_count(&self) -> usize {
        let (v, d, t, l) = (self.vocab_size, self.d_model, self.context_length, self.n_layers);
        v * d + t * d + l * (12 * d * d + 13 * d) + 2 * d + d * v + v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Canonical parameter layout: `(name, shape, init)` in the order used for
/// checkpoints and for flattened gradients.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, t) = (c.vocab_size, c.d_model, c.context_length);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![t, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, 4 * d], Init::Normal),
            (p("mlp.b1"), vec![4 * d], Init::Zeros),
            (p("mlp.w2"), vec![4 * d, d], Init::Normal),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], Init::Ones),
        ("ln_f.bias".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, v], Init::Normal),
        ("head.b".to_string(), vec![v], Init::Zeros),
    ]);
    out
}

// Offsets into the canonical layout.
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const FIRST_LAYER: usize = 2;
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Fresh model: weights ~ N(0, 0.02²), biases zero, norm gains one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng_for(config.seed, "model-init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            params.push(Tensor::param(shape, values)?);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Assembles a model from named tensors; names and shapes must follow the
    /// canonical layout.
    pub fn from_parameters(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(LabError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((ename, eshape, _), (name, mut t)) in expected.into_iter().zip(named) {
            if ename != name || eshape != t.shape() {
                return Err(LabError::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(LabError::Checkpoint(format!("parameter {name} has non-finite values")));
            }
            t.set_requires_grad(true);
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Sets the output projection and bias to zero, making every next-token
    /// distribution uniform.
    pub fn zero_output_head(&mut self) {
        for name in ["head.w", "head.b"] {
            if let Some(t) = self.parameter_mut(name) {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the graph gradients of bound parameters into each parameter's
    /// gradient buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.grad(v) {
                p.accumulate_grad(grad);
            }
        }
    }

    /// Gradients recorded in `g` for bound parameters, flattened in canonical
    /// order, without touching the parameters' own buffers.
    pub fn graph_flat_grad(&self, g: &Graph, bound: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (p, &v) in self.params.iter().zip(bound) {
            match g.grad(v) {
                Some(grad) => out.extend_from_slice(grad),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }

    /// Concatenated gradients in canonical order.
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for p in &self.params {
            match p.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, p.len())),
            }
        }
        out
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.values().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(LabError::InvalidInput(format!(
                "expected {} values, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.len();
            p.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Records every parameter as a graph leaf. With `trainable = false` the
    /// leaves are constants and no gradient flows into them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p)
                } else {
                    g.constant(p.shape().to_vec(), p.values().to_vec())
                        .expect("parameter shapes are valid")
                }
            })
            .collect()
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.config.vocab_size) {
            Some(&bad) => Err(LabError::IndexOutOfRange {
                op: "forward",
                index: bad,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Records the forward pass for `ids` (row-major `batch × len`) and returns
    /// logits of shape `[batch, len, vocab]`.
    pub fn forward_bound(&self, g: &mut Graph, p: &[Var], ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let c = &self.config;
        if len == 0 || batch == 0 || ids.len() != batch * len {
            return Err(LabError::InvalidInput(format!(
                "forward expects {batch}×{len} ids, got {}",
                ids.len()
            )));
        }
        if len > c.context_length {
            return Err(LabError::InvalidInput(format!(
                "sequence length {len} exceeds context length {}",
                c.context_length
            )));
        }
        self.check_ids(ids)?;
        let (d, h, dh) = (c.d_model, c.n_heads, c.head_dim());

        let tok = g.embedding(p[TOK_EMB], ids)?;
        let tok = g.reshape(tok, vec![batch, len, d])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(p[POS_EMB], &positions)?;
        let mut x = g.add(tok, pos)?;

        let mask: Rc<[bool]> = (0..len * len).map(|i| i % len > i / len).collect();
        let att_scale = 1.0 / (dh as f64).sqrt();

        for l in 0..c.n_layers {
            let w = |s: usize| p[FIRST_LAYER + l * PARAMS_PER_LAYER + s];
            let hn = norm_affine(g, x, w(slot::LN1_G), w(slot::LN1_B))?;
            let heads = |g: &mut Graph, wt: Var, b: Var| -> Result<Var> {
                let y = g.matmul(hn, wt)?;
                let y = g.add(y, b)?;
                let y = g.reshape(y, vec![batch, len, h, dh])?;
                g.transpose(y, 1, 2)
            };
            let q = heads(g, w(slot::WQ), w(slot::BQ))?;
            let k = heads(g, w(slot::WK), w(slot::BK))?;
            let v = heads(g, w(slot::WV), w(slot::BV))?;
            let kt = g.transpose(k, 2, 3)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, att_scale);
            let scores = g.mask_fill(scores, &[len, len], mask.clone(), MASK_VALUE)?;
            let att = g.softmax(scores)?;
            let o = g.matmul(att, v)?;
            let o = g.transpose(o, 1, 2)?;
            let o = g.reshape(o, vec![batch, len, d])?;
            let o = g.matmul(o, w(slot::WO))?;
            let o = g.add(o, w(slot::BO))?;
            x = g.add(x, o)?;

            let hn = norm_affine(g, x, w(slot::LN2_G), w(slot::LN2_B))?;
            let m = g.matmul(hn, w(slot::W1))?;
            let m = g.add(m, w(slot::B1))?;
            let m = g.gelu(m);
            let m = g.matmul(m, w(slot::W2))?;
            let m = g.add(m, w(slot::B2))?;
            x = g.add(x, m)?;
        }
        let n = self.params.len();
        let xf = norm_affine(g, x, p[n - 4], p[n - 3])?;
        let logits = g.matmul(xf, p[n - 2])?;
        g.add(logits, p[n - 1])
    }

    /// Binds trainable parameters and records the forward pass.
    pub fn forward(&self, g: &mut Graph, ids: &[usize], batch: usize, len: usize) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(g, true);
        let logits = self.forward_bound(g, &bound, ids, batch, len)?;
        Ok((logits, bound))
    }

    /// Logits for equal-length sequences, without recording gradients.
    pub fn logits(&self, sequences: &[Vec<usize>]) -> Result<Tensor> {
        let len = sequences.first().map_or(0, Vec::len);
        if sequences.iter().any(|s| s.len() != len) {
            return Err(LabError::InvalidInput("sequences must share one length".into()));
        }
        let ids: Vec<usize> = sequences.concat();
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = self.forward_bound(&mut g, &bound, &ids, sequences.len(), len)?;
        Ok(g.tensor(logits))
    }

    /// Per-token `log π(y_t | y_<t, x)` for a padded batch, shape `[rows, cols]`.
    pub fn batch_log_probs_bound(&self, g: &mut Graph, bound: &[Var], batch: &TeacherForcedBatch) -> Result<Var> {
        let logits = self.forward_bound(g, bound, &batch.inputs, batch.rows, batch.cols)?;
        let lp = g.log_softmax(logits)?;
        g.gather(lp, &batch.targets)
    }

    /// Records `log π(y⋆_t | y⋆_<t, x)` for every response token; shape `[|response|]`.
    pub fn token_log_probs(&self, g: &mut Graph, bound: &[Var], prompt: &[usize], response: &[usize]) -> Result<Var> {
        self.check_pair(prompt, response)?;
        let batch = TeacherForcedBatch::new(&[(prompt, response)])?;
        let lp = self.batch_log_probs_bound(g, bound, &batch)?;
        if prompt.len() == 1 {
            return g.reshape(lp, vec![response.len()]);
        }
        // Response targets occupy the trailing |response| positions; pick them
        // out with a constant one-hot selector.
        let (rows, start) = (response.len(), prompt.len() - 1);
        let column = g.reshape(lp, vec![batch.cols, 1])?;
        let mut sel = vec![0.0; rows * batch.cols];
        for r in 0..rows {
            sel[r * batch.cols + start + r] = 1.0;
        }
        let sel = g.constant(vec![rows, batch.cols], sel)?;
        let out = g.matmul(sel, column)?;
        g.reshape(out, vec![rows])
    }

    /// Numeric per-token log-probabilities for one demonstration.
    pub fn token_log_prob_values(&self, prompt: &[usize], response: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let lp = self.token_log_probs(&mut g, &bound, prompt, response)?;
        Ok(g.value(lp).to_vec())
    }

    fn check_pair(&self, prompt: &[usize], response: &[usize]) -> Result<()> {
        if response.is_empty() {
            return Err(LabError::InvalidInput("empty response".into()));
        }
        if prompt.is_empty() {
            return Err(LabError::InvalidInput("empty prompt".into()));
        }
        if prompt.len() + response.len() > self.config.context_length {
            return Err(LabError::InvalidInput(format!(
                "prompt + response length {} exceeds context length {}",
                prompt.len() + response.len(),
                self.config.context_length
            )));
        }
        self.check_ids(prompt)?;
        self.check_ids(response)
    }

    /// Teacher-forced `log p` at every batch position, `[rows × cols]`.
    pub fn batch_log_prob_values(&self, batch: &TeacherForcedBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let lp = self.batch_log_probs_bound(&mut g, &bound, batch)?;
        Ok(g.value(lp).to_vec())
    }

    /// Teacher-forced probabilities of all unmasked targets in a batch,
    /// returned row by row.
    pub fn teacher_forced_probs(&self, batch: &TeacherForcedBatch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let lp = self.batch_log_probs_bound(&mut g, &bound, batch)?;
        let vals = g.value(lp);
        Ok((0..batch.rows)
            .map(|r| {
                (0..batch.cols)
                    .filter(|&c| batch.mask[r * batch.cols + c])
                    .map(|c| vals[r * batch.cols + c].exp())
                    .collect()
            })
            .collect())
    }
}

fn norm_affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_length: 16,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { d_model: 10, n_heads: 4, ..tiny(5) }.validate().is_err());
        assert!(ModelConfig { vocab_size: 1, ..tiny(5) }.validate().is_err());
        assert!(tiny(5).validate().is_ok());
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [tiny(5), ModelConfig::default(), ModelConfig { n_layers: 1, ..tiny(17) }] {
            let m = Model::new(cfg.clone()).unwrap();
            assert_eq!(m.num_parameters(), cfg.parameter_count());
        }
    }

    #[test]
    fn uniform_head_gives_log_half() {
        let mut m = Model::new(tiny(2)).unwrap();
        m.zero_output_head();
        let lp = m.token_log_prob_values(&[0, 1], &[1, 0, 1]).unwrap();
        for v in lp {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn token_log_probs_rejects_bad_input() {
        let m = Model::new(tiny(4)).unwrap();
        assert!(m.token_log_prob_values(&[0], &[]).is_err());
        assert!(m.token_log_prob_values(&[0, 9], &[1]).is_err());
        assert!(m.token_log_prob_values(&[0; 10], &[1; 7]).is_err());
    }

    #[test]
    fn identical_rows_identical_logits() {
        let m = Model::new(tiny(6)).unwrap();
        let t = m.logits(&[vec![2, 3, 4], vec![2, 3, 4]]).unwrap();
        let v = t.values();
        let half = v.len() / 2;
        assert_eq!(&v[..half], &v[half..]);
    }
}
