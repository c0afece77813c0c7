use crate::error::{LabError, Result};
use crate::model::{EOS_ID, PAD_ID};

/// Number of reserved ids before the first character.
pub const SPECIAL_TOKENS: usize = 2;

/// Fixed character vocabulary. Character `chars[i]` has id `i + 2`; ids 0
/// and 1 are padding and end-of-sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: &'static str,
}

impl Vocabulary {
    pub(crate) const fn new(chars: &'static str) -> Self {
        Self { chars }
    }

    pub fn chars(&self) -> &'static str {
        self.chars
    }

    /// Total ids including the two reserved ones.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIAL_TOKENS
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.chars
            .find(c)
            .map(|i| i + SPECIAL_TOKENS)
            .ok_or(LabError::OutOfVocabulary(c))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Text for `ids`, stopping at the first end-of-sequence. Padding or an
    /// unknown id is an error.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let bytes = self.chars.as_bytes();
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS_ID => break,
                PAD_ID => return Err(LabError::UnknownTokenId(id)),
                _ => match bytes.get(id - SPECIAL_TOKENS) {
                    Some(&b) => out.push(b as char),
                    None => return Err(LabError::UnknownTokenId(id)),
                },
            }
        }
        Ok(out)
    }

    /// `(id, symbol)` for every id; reserved ids print as `<pad>` and `<eos>`.
    pub fn table(&self) -> Vec<(usize, String)> {
        let mut t = vec![(PAD_ID, "<pad>".to_string()), (EOS_ID, "<eos>".to_string())];
        t.extend(self.chars.chars().enumerate().map(|(i, c)| (i + SPECIAL_TOKENS, c.to_string())));
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let v = Vocabulary::new("ab|");
        assert_eq!(v.size(), 5);
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
        let ids = v.tokenize("ba|").unwrap();
        assert_eq!(ids, vec![3, 2, 4]);
        assert_eq!(v.detokenize(&ids).unwrap(), "ba|");
        assert_eq!(v.detokenize(&[2, EOS_ID, 3]).unwrap(), "a");
        assert!(matches!(v.tokenize("x"), Err(LabError::OutOfVocabulary('x'))));
        assert!(v.detokenize(&[PAD_ID]).is_err());
        assert!(v.detokenize(&[9]).is_err());
    }
}
