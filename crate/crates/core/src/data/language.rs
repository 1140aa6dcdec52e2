//! Markov-chain stand-ins for monolingual corpora and a per-boundary
//! switching generator for intra-sentential code-switching.

use std::ops::Range;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::vocab::SPACE;

pub type LangId = u8;

/// One synthetic utterance. Every token carries the language that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub lang_tags: Vec<LangId>,
    /// `[frames_per_token * len, feat_dim]` once synthesized.
    pub features: Option<crate::tensor::Tensor>,
}

/// A first-order Markov source over a contiguous token range, optionally
/// emitting the shared word separator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub lang: LangId,
    pub vocab: Range<u32>,
    pub uses_space: bool,
    /// Row-stochastic matrix over [`LanguageSpec::states`].
    pub transition: Vec<Vec<f64>>,
    /// Distribution of span-initial tokens (over the same states, zero on space).
    pub initial: Vec<f64>,
    pub mean_len: usize,
    pub len_jitter: usize,
    pub seed: u64,
}

impl LanguageSpec {
    /// Emittable token ids: the vocab range, then the separator if used.
    pub fn states(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.vocab.clone().collect();
        if self.uses_space {
            s.push(SPACE);
        }
        s
    }

    fn state_index(&self, token: u32) -> Option<usize> {
        if self.vocab.contains(&token) {
            Some((token - self.vocab.start) as usize)
        } else if self.uses_space && token == SPACE {
            Some(self.vocab.len())
        } else {
            None
        }
    }

    /// A peaked random chain: each row concentrates on a few successors,
    /// which makes the language predictable from context.
    pub fn random(
        name: &str,
        lang: LangId,
        vocab: Range<u32>,
        uses_space: bool,
        peakedness: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "transition"));
        let n_tok = vocab.len();
        let n = n_tok + usize::from(uses_space);
        let row_weights = |rng: &mut Rng| -> Vec<f64> {
            (0..n_tok)
                .map(|_| (peakedness * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect()
        };
        let mut transition = Vec::with_capacity(n);
        for _ in 0..n_tok {
            let mut w = row_weights(&mut rng);
            if uses_space {
                let total: f64 = w.iter().sum();
                // Words average about four characters.
                w.push(total / 3.0);
            }
            transition.push(normalize(w));
        }
        if uses_space {
            let mut w = row_weights(&mut rng);
            w.push(0.0);
            transition.push(normalize(w));
        }
        let mut initial = row_weights(&mut rng);
        if uses_space {
            initial.push(0.0);
        }
        let spec = Self {
            name: name.into(),
            lang,
            vocab,
            uses_space,
            transition,
            initial: normalize(initial),
            mean_len: 10,
            len_jitter: 4,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vocab.len() + usize::from(self.uses_space);
        if self.vocab.is_empty() {
            return Err(Error::Spec(format!("{}: empty vocabulary", self.name)));
        }
        if self.vocab.start < crate::vocab::RESERVED {
            return Err(Error::Spec(format!("{}: vocabulary overlaps reserved ids", self.name)));
        }
        if self.transition.len() != n || self.transition.iter().any(|r| r.len() != n) {
            return Err(Error::Spec(format!("{}: transition must be {n}x{n}", self.name)));
        }
        for (i, row) in self.transition.iter().chain(std::iter::once(&self.initial)).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Spec(format!("{}: row {i} has invalid probabilities", self.name)));
            }
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::Spec(format!("{}: row {i} is all zeros", self.name)));
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!("{}: row {i} sums to {s}", self.name)));
            }
        }
        if self.uses_space && self.initial[n - 1] != 0.0 {
            return Err(Error::Spec(format!("{}: spans may not start with a space", self.name)));
        }
        if self.mean_len <= self.len_jitter {
            return Err(Error::Spec(format!("{}: mean_len must exceed len_jitter", self.name)));
        }
        Ok(())
    }

    fn sample_len(&self, rng: &mut Rng) -> usize {
        let lo = self.mean_len - self.len_jitter;
        rng.random_range(lo..=self.mean_len + self.len_jitter)
    }
}

fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Samplers for one chain, prepared once.
struct Chain<'a> {
    spec: &'a LanguageSpec,
    states: Vec<u32>,
    rows: Vec<WeightedIndex<f64>>,
    initial: WeightedIndex<f64>,
}

impl<'a> Chain<'a> {
    fn new(spec: &'a LanguageSpec) -> Result<Self> {
        spec.validate()?;
        let rows = spec
            .transition
            .iter()
            .map(|r| WeightedIndex::new(r).map_err(|e| Error::Spec(format!("{}: {e}", spec.name))))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            states: spec.states(),
            rows,
            initial: WeightedIndex::new(&spec.initial)
                .map_err(|e| Error::Spec(format!("{}: {e}", spec.name)))?,
        })
    }

    fn first(&self, rng: &mut Rng) -> u32 {
        self.states[self.initial.sample(rng)]
    }

    fn next(&self, prev: u32, rng: &mut Rng) -> u32 {
        let i = self.spec.state_index(prev).expect("prev token belongs to this chain");
        self.states[self.rows[i].sample(rng)]
    }
}

fn trim_trailing_space(tokens: &mut Vec<u32>, tags: &mut Vec<LangId>) {
    while tokens.len() > 1 && tokens.last() == Some(&SPACE) {
        tokens.pop();
        tags.pop();
    }
}

/// `count` utterances from `spec`'s chain, deterministic in `spec.seed`.
pub fn gen_monolingual(spec: &LanguageSpec, count: usize) -> Result<Vec<Utterance>> {
    if count == 0 {
        return Err(Error::Contract("count must be positive".into()));
    }
    let chain = Chain::new(spec)?;
    Ok((0..count)
        .map(|i| {
            let mut rng = Rng::seed_from_u64(derive_seed(spec.seed, &format!("utt/{i}")));
            let len = spec.sample_len(&mut rng);
            let mut tokens = vec![chain.first(&mut rng)];
            while tokens.len() < len {
                let prev = *tokens.last().expect("non-empty");
                tokens.push(chain.next(prev, &mut rng));
            }
            let mut tags = vec![spec.lang; tokens.len()];
            trim_trailing_space(&mut tokens, &mut tags);
            Utterance {
                id: i as u64,
                tokens,
                lang_tags: tags,
                features: None,
            }
        })
        .collect())
}

/// Intra-sentential code-switching between matrix language `a` and embedded
/// language `b`: at every token boundary the active language flips with
/// probability `switch_prob`, and each new span restarts the active chain.
pub fn gen_codeswitch(
    a: &LanguageSpec,
    b: &LanguageSpec,
    switch_prob: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<Utterance>> {
    if !(switch_prob > 0.0 && switch_prob < 1.0) {
        return Err(Error::Contract(format!("switch_prob must be in (0, 1), got {switch_prob}")));
    }
    if count == 0 {
        return Err(Error::Contract("count must be positive".into()));
    }
    if a.vocab.start < b.vocab.end && b.vocab.start < a.vocab.end {
        return Err(Error::Spec(format!(
            "vocabularies of {} {:?} and {} {:?} overlap",
            a.name, a.vocab, b.name, b.vocab
        )));
    }
    if a.lang == b.lang {
        return Err(Error::Spec("code-switched languages need distinct tags".into()));
    }
    let chains = [Chain::new(a)?, Chain::new(b)?];
    Ok((0..count)
        .map(|i| {
            let mut rng = Rng::seed_from_u64(derive_seed(seed, &format!("cs/{i}")));
            let len = a.sample_len(&mut rng);
            let mut active = 0usize;
            let mut tokens = vec![chains[0].first(&mut rng)];
            let mut tags = vec![a.lang];
            while tokens.len() < len {
                let switched = rng.random_bool(switch_prob);
                let tok = if switched {
                    active ^= 1;
                    chains[active].first(&mut rng)
                } else {
                    chains[active].next(*tokens.last().expect("non-empty"), &mut rng)
                };
                tokens.push(tok);
                tags.push(chains[active].spec.lang);
            }
            trim_trailing_space(&mut tokens, &mut tags);
            Utterance {
                id: i as u64,
                tokens,
                lang_tags: tags,
                features: None,
            }
        })
        .collect())
}
