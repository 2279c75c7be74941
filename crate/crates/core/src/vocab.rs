//! Generation vocabulary and target tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS_TOKEN: &str = "<eos>";
pub const CLOSE_TOKEN: &str = "]";
pub const EOS_ID: usize = 0;

/// One decoder step's token: a vocabulary item, a pointer into the source, or a
/// sequence boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetToken {
    Generate(usize),
    Copy(usize),
    Bos,
    Eos,
}

impl TargetToken {
    /// Slot in the combined `(V + n)`-way output distribution.
    pub fn combined_index(self, vocab_size: usize) -> Option<usize> {
        match self {
            TargetToken::Generate(v) => Some(v),
            TargetToken::Copy(i) => Some(vocab_size + i),
            TargetToken::Eos => Some(EOS_ID),
            TargetToken::Bos => None,
        }
    }

    pub fn from_combined_index(index: usize, vocab_size: usize) -> Self {
        if index == EOS_ID {
            TargetToken::Eos
        } else if index < vocab_size {
            TargetToken::Generate(index)
        } else {
            TargetToken::Copy(index - vocab_size)
        }
    }
}

/// Generation vocabulary: EOS, the closing bracket, then intent and slot labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[EOS_ID] != EOS_TOKEN || tokens[1] != CLOSE_TOKEN {
            return Err(Error::InvalidArgument(format!(
                "vocabulary must start with `{}` and `{}`",
                EOS_TOKEN, CLOSE_TOKEN
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{}`", t)));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Vocabulary over a set of node labels such as `IN:GET_WEATHER`.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = labels.into_iter().map(|l| format!("[{}", l.as_ref())).collect();
        let mut tokens = vec![EOS_TOKEN.to_string(), CLOSE_TOKEN.to_string()];
        tokens.extend(set);
        Vocab::new(tokens).expect("labels are unique")
    }

    /// Synthetic vocabulary of the given size, for sizing experiments.
    pub fn synthetic(size: usize) -> Self {
        let labels: Vec<String> = (0..size.saturating_sub(2)).map(|i| format!("IN:LABEL_{:04}", i)).collect();
        Self::from_labels(labels)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn close_id(&self) -> usize {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_index_round_trip() {
        let v = 5;
        for t in [TargetToken::Eos, TargetToken::Generate(3), TargetToken::Copy(0), TargetToken::Copy(4)] {
            let i = t.combined_index(v).unwrap();
            assert_eq!(TargetToken::from_combined_index(i, v), t);
        }
        assert_eq!(TargetToken::Bos.combined_index(v), None);
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::from_labels(["SL:B", "IN:A", "SL:B"]);
        assert_eq!(v.tokens(), &["<eos>", "]", "[IN:A", "[SL:B"]);
        assert_eq!(v.id("[SL:B"), Some(3));
        assert_eq!(Vocab::synthetic(600).len(), 600);
        assert!(Vocab::new(vec!["]".into(), "<eos>".into()]).is_err());
    }
}
