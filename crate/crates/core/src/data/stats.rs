//! Code-mixing statistics over language-tagged corpora.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::language::{LangId, Utterance};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cmi {
    pub value: f64,
    /// Empty utterances left out of the average.
    pub skipped: usize,
}

/// Per-utterance index `(N - max_i t_i) / N`, where `t_i` counts tokens of
/// language `i` and `N` all tagged tokens.
pub fn utterance_cmi(tags: &[LangId]) -> Option<f64> {
    if tags.is_empty() {
        return None;
    }
    let mut counts: HashMap<LangId, usize> = HashMap::new();
    for &t in tags {
        *counts.entry(t).or_default() += 1;
    }
    let n = tags.len();
    let max = counts.values().copied().max().unwrap_or(0);
    Some((n - max) as f64 / n as f64)
}

/// Corpus code-mixing index: the mean of [`utterance_cmi`] over non-empty
/// utterances.
pub fn cmi<'a>(corpus: impl IntoIterator<Item = &'a Utterance>) -> Cmi {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for u in corpus {
        match utterance_cmi(&u.lang_tags) {
            Some(c) => {
                sum += c;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("cmi: skipped {skipped} empty utterances");
    }
    Cmi {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        skipped,
    }
}

/// Switch-point fraction: adjacent token pairs with differing tags over all
/// adjacent pairs, pooled across the corpus.
pub fn spf<'a>(corpus: impl IntoIterator<Item = &'a Utterance>) -> Result<f64> {
    let (mut switches, mut pairs) = (0usize, 0usize);
    for u in corpus {
        for w in u.lang_tags.windows(2) {
            pairs += 1;
            if w[0] != w[1] {
                switches += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Contract(
            "switch-point fraction undefined: no adjacent token pairs".into(),
        ));
    }
    Ok(switches as f64 / pairs as f64)
}
