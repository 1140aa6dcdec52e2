//! Beam search over next-token distributions and final-list rescoring with
//! an external language model and a word-count bonus.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TransducerStepper;
use crate::vocab::{word_count, Vocab, BEGIN, END};

/// Anything that maps equal-length prefixes (each starting with `BEGIN`) to
/// next-token log-probabilities over the full vocabulary.
pub trait StepScorer {
    fn step(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;

    /// Upper bound on decoding steps imposed by the model, if any.
    fn max_steps(&self) -> Option<usize> {
        None
    }
}

impl StepScorer for TransducerStepper<'_> {
    fn step(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        TransducerStepper::step(self, prefixes)
    }

    fn max_steps(&self) -> Option<usize> {
        Some(self.max_prefix_len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// `BEGIN ... END`, or `BEGIN ...` when cut off at the length cap.
    pub tokens: Vec<u32>,
    pub dec_logp: f64,
    pub lm_logp: Option<f64>,
    pub word_count: usize,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.len() > 1 && self.tokens.last() == Some(&END)
    }

    /// Tokens strictly between the sentinels.
    pub fn content(&self) -> &[u32] {
        let end = if self.finished() { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescoreWeights {
    pub w_dec: f64,
    pub w_lm: f64,
    pub w_wc: f64,
}

impl Default for RescoreWeights {
    fn default() -> Self {
        Self {
            w_dec: 1.0,
            w_lm: 0.1,
            w_wc: 0.1,
        }
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence, so the lower token id wins at the first
/// difference.
fn rank(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Length-capped beam search expanding only `candidates` (which should
/// include `END`). Finished beams are frozen and keep competing for slots.
/// Returns up to `width` hypotheses sorted by `dec_logp`, best first.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    width: usize,
    max_len: usize,
    candidates: &[u32],
    vocab: &Vocab,
) -> Result<Vec<Hypothesis>> {
    if width == 0 || max_len == 0 {
        return Err(Error::Contract("beam width and max_len must be >= 1".into()));
    }
    let steps = scorer.max_steps().map_or(max_len, |m| m.min(max_len));
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(vec![BEGIN], 0.0)];
    for _ in 0..steps {
        let (done, active): (Vec<_>, Vec<_>) = beams.into_iter().partition(|(t, _)| t.len() > 1 && t.last() == Some(&END));
        if active.is_empty() {
            beams = done;
            break;
        }
        let prefixes: Vec<Vec<u32>> = active.iter().map(|(t, _)| t.clone()).collect();
        let dists = scorer.step(&prefixes)?;
        let mut pool = done;
        for ((toks, score), lp) in active.iter().zip(&dists) {
            for &c in candidates {
                let l = *lp
                    .get(c as usize)
                    .ok_or(Error::Vocabulary { id: c, vocab: lp.len() })?;
                let mut t = toks.clone();
                t.push(c);
                pool.push((t, score + l));
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        beams = pool;
    }
    beams.sort_by(rank);
    let hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(tokens, dec_logp)| {
            let wc = word_count(&tokens, |t| vocab.detokenize(t));
            Hypothesis {
                tokens,
                dec_logp,
                lm_logp: None,
                word_count: wc,
            }
        })
        .collect();
    if hyps.is_empty() {
        return Ok(vec![Hypothesis {
            tokens: vec![BEGIN, END],
            dec_logp: 0.0,
            lm_logp: None,
            word_count: 0,
        }]);
    }
    Ok(hyps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub hyp: Hypothesis,
    pub score: f64,
}

/// `w_dec·dec_logp + w_lm·lm_logp + w_wc·√word_count`.
pub fn combined_score(h: &Hypothesis, w: &RescoreWeights) -> Result<f64> {
    let lm = match h.lm_logp {
        Some(v) => v,
        None if w.w_lm == 0.0 => 0.0,
        None => {
            return Err(Error::Contract(
                "hypothesis has no LM score but the LM weight is non-zero".into(),
            ))
        }
    };
    Ok(w.w_dec * h.dec_logp + w.w_lm * lm + w.w_wc * (h.word_count as f64).sqrt())
}

/// Fills `lm_logp` for every hypothesis using `lm` on its content tokens
/// followed by `END`.
pub fn attach_lm_scores(hyps: &mut [Hypothesis], mut lm: impl FnMut(&[u32]) -> Result<f64>) -> Result<()> {
    for h in hyps {
        let mut seq = h.content().to_vec();
        seq.push(END);
        h.lm_logp = Some(lm(&seq)?);
    }
    Ok(())
}

/// Scores every hypothesis and returns the index of the best one (the first
/// in input order among equal scores) together with the scored list.
pub fn rescore(hyps: &[Hypothesis], weights: &RescoreWeights) -> Result<(usize, Vec<ScoredHypothesis>)> {
    if hyps.is_empty() {
        return Err(Error::Contract("nothing to rescore".into()));
    }
    for v in [weights.w_dec, weights.w_lm, weights.w_wc] {
        if !v.is_finite() {
            return Err(Error::Contract(format!("rescoring weight {v} is not finite")));
        }
    }
    let scored = hyps
        .iter()
        .map(|h| {
            Ok(ScoredHypothesis {
                hyp: h.clone(),
                score: combined_score(h, weights)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scored.iter().enumerate() {
        if s.score > scored[best].score {
            best = i;
        }
    }
    Ok((best, scored))
}
