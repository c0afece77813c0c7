//! Inference-only decoding with per-layer key/value caches. Uses the same
//! kernels as the recorded forward pass, so logits agree with the graph to
//! rounding error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{gelu, layer_norm_row, matmul_into, softmax_row};
use crate::error::{LabError, Result};

use super::{slot, Model, EOS_ID, FIRST_LAYER, PARAMS_PER_LAYER, POS_EMB, TOK_EMB};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

impl Decoding {
    /// `0` selects greedy decoding; otherwise the temperature must be
    /// positive and finite.
    pub fn from_temperature(t: f64) -> Result<Self> {
        if t == 0.0 {
            Ok(Self::Greedy)
        } else if t.is_finite() && t > 0.0 {
            Ok(Self::Temperature(t))
        } else {
            Err(LabError::InvalidConfig(format!("temperature must be >= 0, got {t}")))
        }
    }
}

/// Serialized as a temperature, with 0 meaning greedy.
impl Serialize for Decoding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decoding::Greedy => s.serialize_f64(0.0),
            Decoding::Temperature(t) => s.serialize_f64(*t),
        }
    }
}

impl<'de> Deserialize<'de> for Decoding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let t = f64::deserialize(d)?;
        Decoding::from_temperature(t).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRequest {
    pub prompt: Vec<usize>,
    pub seed: u64,
}

struct Stream {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

/// Incremental decoder over any number of independent streams.
pub struct Decoder<'m> {
    model: &'m Model,
    streams: Vec<Stream>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, streams: usize) -> Self {
        let layers = model.config.n_layers;
        let streams = (0..streams)
            .map(|_| Stream {
                keys: vec![Vec::new(); layers],
                values: vec![Vec::new(); layers],
                len: 0,
            })
            .collect();
        Self { model, streams }
    }

    pub fn stream_len(&self, stream: usize) -> usize {
        self.streams[stream].len
    }

    /// Feeds one token to each listed stream and returns next-token logits,
    /// `feeds.len() × vocab` row-major.
    pub fn step(&mut self, feeds: &[(usize, usize)]) -> Result<Vec<f64>> {
        let c = &self.model.config;
        let (d, v, h, dh) = (c.d_model, c.vocab_size, c.n_heads, c.head_dim());
        let n = feeds.len();
        let p = &self.model.params;
        for &(s, tok) in feeds {
            if tok >= v {
                return Err(LabError::IndexOutOfRange {
                    op: "decode",
                    index: tok,
                    size: v,
                });
            }
            if self.streams[s].len >= c.context_length {
                return Err(LabError::InvalidInput(format!(
                    "stream {s} is at the context length {}",
                    c.context_length
                )));
            }
        }

        let tok_emb = p[TOK_EMB].values();
        let pos_emb = p[POS_EMB].values();
        let mut x = vec![0.0; n * d];
        for (i, &(s, tok)) in feeds.iter().enumerate() {
            let pos = self.streams[s].len;
            for j in 0..d {
                x[i * d + j] = tok_emb[tok * d + j] + pos_emb[pos * d + j];
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut hbuf = vec![0.0; n * d];
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut val = vec![0.0; n * d];
        let mut att_out = vec![0.0; n * d];
        let mut proj = vec![0.0; n * d];
        let mut mid = vec![0.0; n * 4 * d];
        for l in 0..c.n_layers {
            let w = |s: usize| p[FIRST_LAYER + l * PARAMS_PER_LAYER + s].values();
            norm_affine(&x, d, w(slot::LN1_G), w(slot::LN1_B), &mut hbuf);
            linear(&hbuf, n, d, d, w(slot::WQ), w(slot::BQ), &mut q);
            linear(&hbuf, n, d, d, w(slot::WK), w(slot::BK), &mut k);
            linear(&hbuf, n, d, d, w(slot::WV), w(slot::BV), &mut val);

            for (i, &(s, _)) in feeds.iter().enumerate() {
                let st = &mut self.streams[s];
                st.keys[l].extend_from_slice(&k[i * d..(i + 1) * d]);
                st.values[l].extend_from_slice(&val[i * d..(i + 1) * d]);
                let ctx = st.len + 1;
                let mut scores = vec![0.0; ctx];
                let mut probs = vec![0.0; ctx];
                for head in 0..h {
                    let qh = &q[i * d + head * dh..i * d + (head + 1) * dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kh = &st.keys[l][j * d + head * dh..j * d + (head + 1) * dh];
                        let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                        *sc = dot * scale;
                    }
                    softmax_row(&scores, &mut probs);
                    let out = &mut att_out[i * d + head * dh..i * d + (head + 1) * dh];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (j, &pj) in probs.iter().enumerate() {
                        let vh = &st.values[l][j * d + head * dh..j * d + (head + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += pj * vv;
                        }
                    }
                }
            }
            linear(&att_out, n, d, d, w(slot::WO), w(slot::BO), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            norm_affine(&x, d, w(slot::LN2_G), w(slot::LN2_B), &mut hbuf);
            linear(&hbuf, n, d, 4 * d, w(slot::W1), w(slot::B1), &mut mid);
            mid.iter_mut().for_each(|m| *m = gelu(*m));
            linear(&mid, n, 4 * d, d, w(slot::W2), w(slot::B2), &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        for &(s, _) in feeds {
            self.streams[s].len += 1;
        }

        let np = p.len();
        norm_affine(&x, d, p[np - 4].values(), p[np - 3].values(), &mut hbuf);
        let mut logits = vec![0.0; n * v];
        linear(&hbuf, n, d, v, p[np - 2].values(), p[np - 1].values(), &mut logits);
        Ok(logits)
    }

    /// Teacher-forced logits at every position of one sequence, `len × vocab`.
    pub fn sequence_logits(model: &Model, seq: &[usize]) -> Result<Vec<f64>> {
        let mut dec = Decoder::new(model, 1);
        let mut out = Vec::with_capacity(seq.len() * model.config.vocab_size);
        for &t in seq {
            out.extend(dec.step(&[(0, t)])?);
        }
        Ok(out)
    }
}

fn norm_affine(x: &[f64], d: usize, gain: &[f64], bias: &[f64], out: &mut [f64]) {
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        layer_norm_row(row, o);
        for j in 0..d {
            o[j] = o[j] * gain[j] + bias[j];
        }
    }
}

fn linear(x: &[f64], n: usize, k: usize, m: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    matmul_into(n, k, m, x, w, out);
    for row in out.chunks_exact_mut(m) {
        row.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
    }
}

fn draw(logits: &[f64], decoding: Decoding, rng: &mut ChaCha8Rng, scratch: &mut [f64]) -> usize {
    match decoding {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            best
        }
        Decoding::Temperature(t) => {
            for (s, &l) in scratch.iter_mut().zip(logits) {
                *s = l / t;
            }
            let scaled = scratch.to_vec();
            softmax_row(&scaled, scratch);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in scratch.iter().enumerate() {
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
    }
}

/// Continues every prompt until EOS, `max_new` generated tokens, or the
/// context length. Each request has its own seeded generator, so results do
/// not depend on how requests are grouped. Returned continuations include the
/// EOS token when one was produced.
pub fn sample_batch(
    model: &Model,
    requests: &[SampleRequest],
    max_new: usize,
    decoding: Decoding,
) -> Result<Vec<Vec<usize>>> {
    let c = &model.config;
    for r in requests {
        if r.prompt.is_empty() {
            return Err(LabError::InvalidInput("empty prompt".into()));
        }
        if r.prompt.len() > c.context_length {
            return Err(LabError::InvalidInput(format!(
                "prompt length {} exceeds context length {}",
                r.prompt.len(),
                c.context_length
            )));
        }
    }
    let mut dec = Decoder::new(model, requests.len());
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); requests.len()];
    // next token to feed for each live stream
    let mut pending: Vec<Option<usize>> = requests.iter().map(|r| Some(r.prompt[0])).collect();
    if max_new == 0 {
        return Ok(out);
    }
    let mut scratch = vec![0.0; c.vocab_size];
    loop {
        let feeds: Vec<(usize, usize)> = pending
            .iter()
            .enumerate()
            .filter_map(|(s, t)| t.map(|t| (s, t)))
            .collect();
        if feeds.is_empty() {
            break;
        }
        let logits = dec.step(&feeds)?;
        for (i, &(s, _)) in feeds.iter().enumerate() {
            let fed = dec.stream_len(s);
            let prompt = &requests[s].prompt;
            if fed < prompt.len() {
                pending[s] = Some(prompt[fed]);
                continue;
            }
            let row = &logits[i * c.vocab_size..(i + 1) * c.vocab_size];
            let tok = draw(row, decoding, &mut rngs[s], &mut scratch);
            out[s].push(tok);
            let full = prompt.len() + out[s].len() >= c.context_length;
            pending[s] = if tok == EOS_ID || out[s].len() >= max_new || full {
                None
            } else {
                Some(tok)
            };
        }
    }
    Ok(out)
}

pub fn sample(model: &Model, prompt: &[usize], max_new: usize, decoding: Decoding, seed: u64) -> Result<Vec<usize>> {
    let req = SampleRequest {
        prompt: prompt.to_vec(),
        seed,
    };
    Ok(sample_batch(model, &[req], max_new, decoding)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(vocab: usize) -> Model {
        Model::new(ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_length: 12,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn cached_logits_match_graph() {
        let m = model(7);
        let seq = vec![2, 5, 3, 6, 1, 0, 4];
        let cached = Decoder::sequence_logits(&m, &seq).unwrap();
        let graph = m.logits(&[seq]).unwrap();
        for (a, b) in cached.iter().zip(graph.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn respects_limits() {
        let m = model(5);
        let out = sample(&m, &[2, 3], 4, Decoding::Temperature(1.0), 0).unwrap();
        assert!(out.len() <= 4);
        if out.len() < 4 {
            assert_eq!(*out.last().unwrap(), EOS_ID);
        }
        let out = sample(&m, &[2; 10], 100, Decoding::Temperature(1.0), 0).unwrap();
        assert!(out.len() <= 2);
        assert!(sample(&m, &[], 3, Decoding::Greedy, 0).is_err());
    }

    #[test]
    fn batching_does_not_change_draws() {
        let m = model(6);
        let reqs: Vec<SampleRequest> = (0..4)
            .map(|i| SampleRequest {
                prompt: vec![2 + i % 3; 1 + i],
                seed: 100 + i as u64,
            })
            .collect();
        let together = sample_batch(&m, &reqs, 6, Decoding::Temperature(1.0)).unwrap();
        for (r, t) in reqs.iter().zip(&together) {
            assert_eq!(&sample(&m, &r.prompt, 6, Decoding::Temperature(1.0), r.seed).unwrap(), t);
        }
    }

    #[test]
    fn temperature_validation() {
        assert_eq!(Decoding::from_temperature(0.0).unwrap(), Decoding::Greedy);
        assert!(Decoding::from_temperature(-1.0).is_err());
        assert!(Decoding::from_temperature(f64::NAN).is_err());
    }
}
