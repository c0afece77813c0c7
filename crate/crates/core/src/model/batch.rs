use crate::error::{LabError, Result};

use super::PAD_ID;

/// Right-padded teacher-forcing batch. Each row holds `prompt ++ response`
/// shifted by one: `inputs[t]` predicts `targets[t]`. `mask` marks the
/// positions whose target is a response token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherForcedBatch {
    pub rows: usize,
    pub cols: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TeacherForcedBatch {
    pub fn new(pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(LabError::InvalidInput("empty batch".into()));
        }
        for (p, r) in pairs {
            if p.is_empty() || r.is_empty() {
                return Err(LabError::InvalidInput(
                    "prompt and response must be non-empty".into(),
                ));
            }
        }
        let rows = pairs.len();
        let cols = pairs.iter().map(|(p, r)| p.len() + r.len() - 1).max().unwrap_or(0);
        let mut inputs = vec![PAD_ID; rows * cols];
        let mut targets = vec![PAD_ID; rows * cols];
        let mut mask = vec![false; rows * cols];
        for (i, (p, r)) in pairs.iter().enumerate() {
            let seq: Vec<usize> = p.iter().chain(r.iter()).copied().collect();
            let row = i * cols;
            for t in 0..seq.len() - 1 {
                inputs[row + t] = seq[t];
                targets[row + t] = seq[t + 1];
                mask[row + t] = t + 1 >= p.len();
            }
        }
        Ok(Self {
            rows,
            cols,
            inputs,
            targets,
            mask,
        })
    }

    /// Number of response tokens in row `r`.
    pub fn response_len(&self, r: usize) -> usize {
        self.mask[r * self.cols..(r + 1) * self.cols].iter().filter(|&&m| m).count()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifts_and_masks_response_targets() {
        let b = TeacherForcedBatch::new(&[(&[5, 6], &[7, 1]), (&[5], &[8])]).unwrap();
        assert_eq!((b.rows, b.cols), (2, 3));
        assert_eq!(b.inputs, vec![5, 6, 7, 5, 0, 0]);
        assert_eq!(b.targets, vec![6, 7, 1, 8, 0, 0]);
        assert_eq!(b.mask, vec![false, true, true, true, false, false]);
        assert_eq!(b.response_len(0), 2);
        assert_eq!(b.response_len(1), 1);
    }
}
