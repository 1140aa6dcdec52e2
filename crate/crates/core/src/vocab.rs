//! Token inventory shared by corpora, models and decoders.
//!
//! Ids 0..=3 are reserved in every vocabulary: padding, begin, end and the
//! word separator. Language-specific ids follow in disjoint ranges.

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const BEGIN: u32 = 1;
pub const END: u32 = 2;
pub const SPACE: u32 = 3;
pub const RESERVED: u32 = 4;

pub fn is_sentinel(id: u32) -> bool {
    id == PAD || id == BEGIN || id == END
}

/// A named block of token ids rendered with a one-letter prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub name: String,
    pub ids: Range<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub blocks: Vec<TokenBlock>,
}

impl Vocab {
    pub fn new(blocks: Vec<TokenBlock>) -> Self {
        let size = blocks
            .iter()
            .map(|b| b.ids.end)
            .max()
            .unwrap_or(RESERVED)
            .max(RESERVED) as usize;
        Self { size, blocks }
    }

    /// Printable form of one token; sentinels render as the empty string.
    pub fn token_str(&self, id: u32) -> String {
        if is_sentinel(id) {
            return String::new();
        }
        if id == SPACE {
            return " ".into();
        }
        for b in &self.blocks {
            if b.ids.contains(&id) {
                let prefix = b.name.chars().next().unwrap_or('t');
                return format!("{prefix}{}", id - b.ids.start);
            }
        }
        format!("<{id}>")
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token_str(id)).collect()
    }
}

/// Number of space-delimited non-empty groups after detokenizing; sentinels
/// are dropped first and repeated separators never produce empty words.
pub fn word_count(tokens: &[u32], detok: impl Fn(&[u32]) -> String) -> usize {
    let content: Vec<u32> = tokens.iter().copied().filter(|&t| !is_sentinel(t)).collect();
    detok(&content).split(' ').filter(|w| !w.is_empty()).count()
}
