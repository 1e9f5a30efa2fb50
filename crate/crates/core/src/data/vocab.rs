use std::collections::BTreeSet;

use super::{DataError, TrajectorySequence};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved token ids preceding the first symbol.
pub const RESERVED: usize = 3;

/// Token alphabet. Ids `0..3` are pad/sos/eos, symbols follow in sorted order.
/// Control characters are reserved and never valid transcript symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Result<Self, DataError> {
        let set: BTreeSet<char> = symbols.into_iter().collect();
        if let Some(&ch) = set.iter().find(|c| c.is_control()) {
            return Err(DataError::ReservedChar {
                text: set.iter().collect(),
                ch,
            });
        }
        Ok(Vocabulary {
            symbols: set.into_iter().collect(),
        })
    }

    /// Sorted unique characters over all transcripts.
    pub fn build(dataset: &[TrajectorySequence]) -> Result<Self, DataError> {
        if dataset.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for seq in dataset {
            if let Some(ch) = seq.text.chars().find(|c| c.is_control()) {
                return Err(DataError::ReservedChar {
                    text: seq.text.clone(),
                    ch,
                });
            }
        }
        Self::from_symbols(dataset.iter().flat_map(|s| s.text.chars()))
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Total token count including reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.symbols.binary_search(&ch).ok().map(|i| i + RESERVED)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.symbols.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.chars()
            .map(|c| self.id(c).ok_or(DataError::UnknownChar(c)))
            .collect()
    }

    /// Maps ids back to text; reserved and unknown ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }
}
