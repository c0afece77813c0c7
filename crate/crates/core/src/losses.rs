//! Per-token training objectives over teacher-forced log-probabilities.
//!
//! Every loss has the form `Σ_t c_t · w_t · (−log p_t)` where `c_t` is the
//! reduction coefficient of an unmasked token and `w_t` the token weight:
//!
//! | kind           | `w_t`                          | weight differentiable |
//! |----------------|--------------------------------|-----------------------|
//! | `SFT`          | 1                              | n/a                   |
//! | `DFT_TOKEN`    | `sg(p_t)`                      | no                    |
//! | `DFT_SEQUENCE` | `sg(∏_s p_s)` per sequence     | no                    |
//! | `FOCAL`        | `(1 − p_t)^γ`                  | yes                   |
//! | `IW_SFT`       | `sg(min(p_t / p_ref_t, clip))` | no                    |
//!
//! Log-probabilities are either a vector `[T]` (one sequence) or a padded
//! batch `[B, T]`; the mask has the same number of entries.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::PROB_FLOOR;
use crate::autodiff::{Graph, Var};
use crate::error::{LabError, Result};

pub const DEFAULT_IW_CLIP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Sft,
    DftToken,
    DftSequence,
    Focal,
    IwSft,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sft => "SFT",
            Self::DftToken => "DFT_TOKEN",
            Self::DftSequence => "DFT_SEQUENCE",
            Self::Focal => "FOCAL",
            Self::IwSft => "IW_SFT",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let all = [Self::Sft, Self::DftToken, Self::DftSequence, Self::Focal, Self::IwSft];
        all.into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::InvalidConfig(format!("unknown loss kind {s:?}")))
    }
}

/// Mean: average over unmasked tokens of each sequence, then over sequences.
/// Sum: total over unmasked tokens of each sequence, then averaged over
/// sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    #[default]
    #[serde(rename = "mean-over-tokens", alias = "mean")]
    Mean,
    #[serde(rename = "sum-over-tokens", alias = "sum")]
    Sum,
}

/// Loss selection as stored in run configurations. IW_SFT reference
/// log-probabilities are supplied per batch at call time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iw_clip: Option<f64>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: None,
            reduction: Reduction::Mean,
            iw_clip: None,
        }
    }

    pub fn sft() -> Self {
        Self::new(LossKind::Sft)
    }

    pub fn dft() -> Self {
        Self::new(LossKind::DftToken)
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma: Some(gamma),
            ..Self::new(LossKind::Focal)
        }
    }

    pub fn iw_sft(clip: f64) -> Self {
        Self {
            iw_clip: Some(clip),
            ..Self::new(LossKind::IwSft)
        }
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidConfig(m.to_string()));
        match (self.kind, self.gamma) {
            (LossKind::Focal, None) => return bad("FOCAL requires gamma"),
            (LossKind::Focal, Some(g)) if !(g.is_finite() && g >= 0.0) => {
                return bad("gamma must be finite and >= 0")
            }
            (k, Some(_)) if k != LossKind::Focal => return bad("gamma is only valid for FOCAL"),
            _ => {}
        }
        match (self.kind, self.iw_clip) {
            (LossKind::IwSft, Some(c)) if !(c.is_finite() && c > 0.0) => {
                bad("iw_clip must be finite and > 0")
            }
            (k, Some(_)) if k != LossKind::IwSft => bad("iw_clip is only valid for IW_SFT"),
            _ => Ok(()),
        }
    }

    pub fn clip(&self) -> f64 {
        self.iw_clip.unwrap_or(DEFAULT_IW_CLIP)
    }

    pub fn needs_reference(&self) -> bool {
        self.kind == LossKind::IwSft
    }
}

/// Per-token view of one demonstration under a loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostics {
    pub p: Vec<f64>,
    /// Implicit importance weight `1/p_t` (with `p_t` floored at 1e-12).
    pub w: Vec<f64>,
    pub effective_weight: Vec<f64>,
    pub indicator_reward: Vec<f64>,
}

fn layout(g: &Graph, lp: Var, mask: &[bool]) -> Result<(usize, usize)> {
    let (rows, cols) = match *g.shape(lp) {
        [n] => (1, n),
        [r, c] => (r, c),
        ref s => {
            return Err(LabError::InvalidInput(format!(
                "log-probabilities must be [T] or [B, T], got {s:?}"
            )))
        }
    };
    if mask.len() != rows * cols {
        return Err(LabError::Shape {
            op: "loss mask",
            lhs: g.shape(lp).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    for r in 0..rows {
        if !mask[r * cols..(r + 1) * cols].iter().any(|&m| m) {
            return Err(LabError::InvalidInput(format!(
                "sequence {r} has no unmasked tokens"
            )));
        }
    }
    Ok((rows, cols))
}

/// Reduction coefficients `c_t`, zero on masked tokens.
fn coefficients(mask: &[bool], rows: usize, cols: usize, reduction: Reduction) -> Vec<f64> {
    let mut c = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &mask[r * cols..(r + 1) * cols];
        let n = row.iter().filter(|&&m| m).count() as f64;
        let per = match reduction {
            Reduction::Mean => 1.0 / (n * rows as f64),
            Reduction::Sum => 1.0 / rows as f64,
        };
        for (t, &m) in row.iter().enumerate() {
            if m {
                c[r * cols + t] = per;
            }
        }
    }
    c
}

/// `Σ c_t · w_t · (−log p_t)`; `weight = None` means `w_t = 1`.
fn weighted_nll(g: &mut Graph, lp: Var, weight: Option<Var>, coef: Vec<f64>) -> Result<Var> {
    let shape = g.shape(lp).to_vec();
    let nll = g.scale(lp, -1.0);
    let term = match weight {
        Some(w) => g.mul(w, nll)?,
        None => nll,
    };
    let c = g.constant(shape, coef)?;
    let weighted = g.mul(c, term)?;
    Ok(g.sum(weighted))
}

pub fn sft_loss(g: &mut Graph, lp: Var, mask: &[bool], reduction: Reduction) -> Result<Var> {
    let (rows, cols) = layout(g, lp, mask)?;
    weighted_nll(g, lp, None, coefficients(mask, rows, cols, reduction))
}

pub fn dft_token_loss(g: &mut Graph, lp: Var, mask: &[bool], reduction: Reduction) -> Result<Var> {
    let (rows, cols) = layout(g, lp, mask)?;
    let p = g.exp(lp);
    let w = g.stop_gradient(p);
    weighted_nll(g, lp, Some(w), coefficients(mask, rows, cols, reduction))
}

/// Sequence weights `∏ p_t` over unmasked tokens, computed as `exp(Σ log p_t)`.
/// Products below the smallest subnormal flush to zero.
pub fn sequence_weights(log_probs: &[f64], mask: &[bool], cols: usize) -> Vec<f64> {
    log_probs
        .chunks(cols)
        .zip(mask.chunks(cols))
        .map(|(lp, m)| {
            let s: f64 = lp.iter().zip(m).filter(|(_, &m)| m).map(|(l, _)| l).sum();
            s.exp()
        })
        .collect()
}

pub fn dft_sequence_loss(g: &mut Graph, lp: Var, mask: &[bool], reduction: Reduction) -> Result<Var> {
    let (rows, cols) = layout(g, lp, mask)?;
    let weights = sequence_weights(g.value(lp), mask, cols);
    let mut coef = coefficients(mask, rows, cols, reduction);
    // W is a detached per-sequence constant, so it folds into the coefficients
    for (r, w) in weights.iter().enumerate() {
        coef[r * cols..(r + 1) * cols].iter_mut().for_each(|c| *c *= w);
    }
    weighted_nll(g, lp, None, coef)
}

pub fn focal_loss(g: &mut Graph, lp: Var, mask: &[bool], gamma: f64, reduction: Reduction) -> Result<Var> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(LabError::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
    }
    let (rows, cols) = layout(g, lp, mask)?;
    let p = g.exp(lp);
    let q = g.affine(p, -1.0, 1.0);
    let w = g.powf(q, gamma);
    weighted_nll(g, lp, Some(w), coefficients(mask, rows, cols, reduction))
}

/// Clipped ratio `min(p / p_ref, clip)`.
pub fn iw_weights(log_probs: &[f64], reference: &[f64], clip: f64) -> Vec<f64> {
    log_probs
        .iter()
        .zip(reference)
        .map(|(l, r)| (l - r).exp().min(clip))
        .collect()
}

pub fn iw_sft_loss(
    g: &mut Graph,
    lp: Var,
    reference: &[f64],
    mask: &[bool],
    clip: f64,
    reduction: Reduction,
) -> Result<Var> {
    if !(clip.is_finite() && clip > 0.0) {
        return Err(LabError::InvalidConfig(format!("iw_clip must be > 0, got {clip}")));
    }
    let (rows, cols) = layout(g, lp, mask)?;
    if reference.len() != rows * cols {
        return Err(LabError::Shape {
            op: "iw_sft_loss",
            lhs: g.shape(lp).to_vec(),
            rhs: vec![reference.len()],
        });
    }
    let shape = g.shape(lp).to_vec();
    let weights = iw_weights(g.value(lp), reference, clip);
    let w = g.constant(shape, weights)?;
    weighted_nll(g, lp, Some(w), coefficients(mask, rows, cols, reduction))
}

/// Dispatches on `spec.kind`. `reference` is required for IW_SFT only.
pub fn loss(g: &mut Graph, lp: Var, mask: &[bool], spec: &LossSpec, reference: Option<&[f64]>) -> Result<Var> {
    spec.validate()?;
    let red = spec.reduction;
    match spec.kind {
        LossKind::Sft => sft_loss(g, lp, mask, red),
        LossKind::DftToken => dft_token_loss(g, lp, mask, red),
        LossKind::DftSequence => dft_sequence_loss(g, lp, mask, red),
        LossKind::Focal => focal_loss(g, lp, mask, spec.gamma.unwrap_or(0.0), red),
        LossKind::IwSft => {
            let reference = reference.ok_or_else(|| {
                LabError::InvalidInput("IW_SFT needs reference log-probabilities".into())
            })?;
            iw_sft_loss(g, lp, reference, mask, spec.clip(), red)
        }
    }
}

/// Per-token diagnostics for one demonstration (all tokens unmasked).
pub fn diagnostics(log_probs: &[f64], spec: &LossSpec, reference: Option<&[f64]>) -> Result<TokenDiagnostics> {
    if let Some(r) = reference {
        if r.len() != log_probs.len() {
            return Err(LabError::InvalidInput(format!(
                "reference has {} entries, expected {}",
                r.len(),
                log_probs.len()
            )));
        }
    }
    let p: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let w = p.iter().map(|&q| 1.0 / q.max(PROB_FLOOR)).collect();
    let effective_weight = match spec.kind {
        LossKind::Sft => vec![1.0; p.len()],
        LossKind::DftToken => p.clone(),
        LossKind::DftSequence => {
            let all = vec![true; p.len()];
            let wseq = sequence_weights(log_probs, &all, p.len().max(1));
            vec![wseq.first().copied().unwrap_or(1.0); p.len()]
        }
        LossKind::Focal => {
            let gamma = spec.gamma.unwrap_or(0.0);
            p.iter().map(|q| (1.0 - q).powf(gamma)).collect()
        }
        LossKind::IwSft => match reference {
            Some(r) => iw_weights(log_probs, r, spec.clip()),
            None => {
                return Err(LabError::InvalidInput(
                    "IW_SFT diagnostics need reference log-probabilities".into(),
                ))
            }
        },
    };
    Ok(TokenDiagnostics {
        indicator_reward: vec![1.0; p.len()],
        p,
        w,
        effective_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn value(f: impl Fn(&mut Graph, Var) -> Result<Var>, lp: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(vec![lp.len()], lp.to_vec()).unwrap();
        let l = f(&mut g, x).unwrap();
        g.scalar(l)
    }

    #[test]
    fn sft_examples() {
        let mean = |lp: &[f64], m: &[bool]| value(|g, x| sft_loss(g, x, m, Reduction::Mean), lp);
        assert!((mean(&[-LN_2, -LN_2], &[true, true]) - LN_2).abs() < 1e-12);
        assert_eq!(mean(&[0.0], &[true]), 0.0);
        let masked = mean(&[-LN_2, 0.25f64.ln()], &[false, true]);
        assert!((masked - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![-1.0, -1.0]).unwrap();
        assert!(sft_loss(&mut g, x, &[false, false], Reduction::Mean).is_err());
        assert!(sft_loss(&mut g, x, &[true], Reduction::Mean).is_err());
    }

    #[test]
    fn dft_token_examples() {
        let v = value(|g, x| dft_token_loss(g, x, &[true], Reduction::Mean), &[-LN_2]);
        assert!((v - 0.5 * LN_2).abs() < 1e-12);
        assert_eq!(value(|g, x| dft_token_loss(g, x, &[true], Reduction::Mean), &[0.0]), 0.0);
        let v = value(|g, x| dft_token_loss(g, x, &[true], Reduction::Mean), &[-1.0]);
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn dft_token_logit_gradient() {
        let mut g = Graph::new();
        let logits = g.leaf(&crate::Tensor::param(vec![2], vec![0.0, 0.0]).unwrap());
        let lp = g.log_softmax(logits).unwrap();
        let lp = g.gather(lp, &[0]).unwrap();
        let lp = g.reshape(lp, vec![1]).unwrap();
        let loss = dft_token_loss(&mut g, lp, &[true], Reduction::Mean).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad[0] + 0.25).abs() < 1e-15 && (grad[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dft_sequence_examples() {
        let lp = [-LN_2, -LN_2];
        let v = value(|g, x| dft_sequence_loss(g, x, &[true, true], Reduction::Sum), &lp);
        assert!((v - 0.25 * 2.0 * LN_2).abs() < 1e-12);
        let w = sequence_weights(&[-LN_2; 100], &[true; 100], 100);
        assert!((w[0] / 2f64.powi(-100) - 1.0).abs() < 1e-12);
        let w = sequence_weights(&[-800.0; 2], &[true; 2], 2);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn focal_examples() {
        let v = value(|g, x| focal_loss(g, x, &[true], 2.0, Reduction::Mean), &[0.9f64.ln()]);
        assert!((v - 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert_eq!(value(|g, x| focal_loss(g, x, &[true], 3.0, Reduction::Mean), &[0.0]), 0.0);
    }

    #[test]
    fn iw_examples() {
        let w = iw_weights(&[0.8f64.ln()], &[0.2f64.ln()], 2.0);
        assert!((w[0] - 2.0).abs() < 1e-15);
        let (lp, rf) = (0.1f64.ln(), 0.5f64.ln());
        let v = value(|g, x| iw_sft_loss(g, x, &[rf], &[true], 4.0, Reduction::Sum), &[lp]);
        assert!((v - 0.2 * -(0.1f64.ln())).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![-1.0, -1.0]).unwrap();
        assert!(iw_sft_loss(&mut g, x, &[0.0], &[true, true], 4.0, Reduction::Sum).is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let d = diagnostics(&[0.01f64.ln(), 0.3f64.ln()], &LossSpec::dft(), None).unwrap();
        assert!((d.w[0] - 100.0).abs() < 1e-9);
        assert!((d.effective_weight[1] - 0.3).abs() < 1e-15);
        assert_eq!(d.indicator_reward, vec![1.0, 1.0]);
        let d = diagnostics(&[-2.0, -0.1], &LossSpec::sft(), None).unwrap();
        assert_eq!(d.effective_weight, vec![1.0, 1.0]);
        let d = diagnostics(&[-LN_2, -LN_2], &LossSpec::new(LossKind::DftSequence), None).unwrap();
        assert!((d.effective_weight[0] - 0.25).abs() < 1e-15);
        for (w, p) in d.w.iter().zip(&d.p) {
            assert!((w * p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation_and_serde() {
        assert!(LossSpec::focal(2.0).validate().is_ok());
        assert!(LossSpec::new(LossKind::Focal).validate().is_err());
        assert!(LossSpec { gamma: Some(1.0), ..LossSpec::sft() }.validate().is_err());
        assert!(LossSpec::iw_sft(0.0).validate().is_err());
        assert!(LossSpec { iw_clip: Some(2.0), ..LossSpec::dft() }.validate().is_err());
        let s: LossSpec = serde_json::from_str(r#"{"kind":"DFT_TOKEN","reduction":"sum"}"#).unwrap();
        assert_eq!(s, LossSpec::dft().with_reduction(Reduction::Sum));
        let text = serde_json::to_string(&LossSpec::focal(2.0)).unwrap();
        assert_eq!(text, r#"{"kind":"FOCAL","gamma":2.0,"reduction":"mean-over-tokens"}"#);
        assert_eq!("dft_token".parse::<LossKind>().unwrap(), LossKind::DftToken);
    }
}
