//! Source/target task pools and batch sampling.
//!
//! A default task set holds two monolingual source tasks (`en`, `zh`), a
//! source share of the code-switched training data (`cs_src`), and the
//! target task (`cs`) that owns the rest of the code-switched training data
//! plus all code-switched validation and test utterances. Code-switched
//! utterances never appear in both the source and the target pools.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{seq::SliceRandom, Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{SeqBatch, Split};
use crate::rng::{derive_seed, Rng};
use crate::vocab::{TokenBlock, Vocab, BEGIN, END};

use super::features::{synth_features, FeatureBank};
use super::language::{gen_codeswitch, gen_monolingual, LanguageSpec, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// Which corpus family a task draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Corpus {
    En,
    Zh,
    Cs,
}

impl Corpus {
    pub fn as_str(self) -> &'static str {
        match self {
            Corpus::En => "EN",
            Corpus::Zh => "ZH",
            Corpus::Cs => "CS",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EN" => Some(Corpus::En),
            "ZH" => Some(Corpus::Zh),
            "CS" => Some(Corpus::Cs),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub role: Role,
    pub corpus: Corpus,
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Task {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub seed: u64,
    pub lang_vocab: u32,
    pub peakedness: f64,
    pub mean_len: usize,
    pub len_jitter: usize,
    pub mono_train: usize,
    pub mono_val: usize,
    pub mono_test: usize,
    pub cs_train: usize,
    pub cs_val: usize,
    pub cs_test: usize,
    /// Share of code-switched training utterances assigned to the source pool.
    pub cs_source_fraction: f64,
    pub switch_prob: f64,
    pub frames_per_token: usize,
    pub noise_sd: f64,
    pub feat_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lang_vocab: 18,
            peakedness: 1.5,
            mean_len: 10,
            len_jitter: 4,
            mono_train: 2000,
            mono_val: 200,
            mono_test: 200,
            cs_train: 2000,
            cs_val: 200,
            cs_test: 200,
            cs_source_fraction: 0.5,
            switch_prob: 0.17,
            frames_per_token: 2,
            noise_sd: 1.0,
            feat_dim: 16,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        if self.lang_vocab == 0 {
            bad.push("data.lang_vocab must be positive".to_string());
        }
        for (k, v) in [
            ("data.mono_train", self.mono_train),
            ("data.mono_val", self.mono_val),
            ("data.mono_test", self.mono_test),
            ("data.cs_train", self.cs_train),
            ("data.cs_val", self.cs_val),
            ("data.cs_test", self.cs_test),
            ("data.frames_per_token", self.frames_per_token),
            ("data.feat_dim", self.feat_dim),
        ] {
            if v == 0 {
                bad.push(format!("{k} must be positive"));
            }
        }
        if !(self.cs_source_fraction > 0.0 && self.cs_source_fraction < 1.0) {
            bad.push("data.cs_source_fraction must be in (0, 1)".into());
        }
        if !(self.switch_prob > 0.0 && self.switch_prob < 1.0) {
            bad.push("data.switch_prob must be in (0, 1)".into());
        }
        if self.noise_sd < 0.0 {
            bad.push("data.noise_sd must be >= 0".into());
        }
        if self.mean_len <= self.len_jitter {
            bad.push("data.mean_len must exceed data.len_jitter".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn vocab_size(&self) -> usize {
        (crate::vocab::RESERVED + 2 * self.lang_vocab) as usize
    }

    pub fn languages(&self) -> Result<(LanguageSpec, LanguageSpec)> {
        let r = crate::vocab::RESERVED;
        let v = self.lang_vocab;
        let mut en = LanguageSpec::random(
            "en",
            0,
            r..r + v,
            true,
            self.peakedness,
            derive_seed(self.seed, "lang/en"),
        )?;
        let mut zh = LanguageSpec::random(
            "zh",
            1,
            r + v..r + 2 * v,
            false,
            self.peakedness,
            derive_seed(self.seed, "lang/zh"),
        )?;
        for s in [&mut en, &mut zh] {
            s.mean_len = self.mean_len;
            s.len_jitter = self.len_jitter;
        }
        Ok((en, zh))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub tasks: Vec<Task>,
    pub vocab: Vocab,
    /// Tag id -> language name.
    pub languages: Vec<String>,
    pub feat_dim: usize,
}

/// Which tasks a sampler may draw from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskFilter {
    Role(Role),
    Corpora(Vec<Corpus>),
    Names(Vec<String>),
}

impl TaskFilter {
    fn accepts(&self, t: &Task) -> bool {
        match self {
            TaskFilter::Role(r) => t.role == *r,
            TaskFilter::Corpora(c) => c.contains(&t.corpus),
            TaskFilter::Names(n) => n.iter().any(|x| *x == t.name),
        }
    }
}

fn split_three(mut v: Vec<Utterance>, train: usize, val: usize) -> (Vec<Utterance>, Vec<Utterance>, Vec<Utterance>) {
    let test = v.split_off(train + val);
    let val_part = v.split_off(train);
    (v, val_part, test)
}

impl TaskSet {
    /// Generates the default four-task layout from `cfg`.
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let (en, zh) = cfg.languages()?;
        let mono = cfg.mono_train + cfg.mono_val + cfg.mono_test;
        let cs_total = cfg.cs_train + cfg.cs_val + cfg.cs_test;
        let en_utts = gen_monolingual(&en, mono)?;
        let zh_utts = gen_monolingual(&zh, mono)?;
        let half = cs_total / 2;
        let cs_seed = derive_seed(cfg.seed, "cs");
        let mut cs_utts = gen_codeswitch(&zh, &en, cfg.switch_prob, half.max(1), derive_seed(cs_seed, "zh-matrix"))?;
        cs_utts.extend(gen_codeswitch(&en, &zh, cfg.switch_prob, (cs_total - half).max(1), derive_seed(cs_seed, "en-matrix"))?);
        cs_utts.truncate(cs_total);
        cs_utts.shuffle(&mut Rng::seed_from_u64(derive_seed(cs_seed, "shuffle")));

        let vocab = Vocab::new(vec![
            TokenBlock {
                name: "en".into(),
                ids: en.vocab.clone(),
            },
            TokenBlock {
                name: "zh".into(),
                ids: zh.vocab.clone(),
            },
        ]);
        let bank = FeatureBank::random(vocab.size, cfg.feat_dim, derive_seed(cfg.seed, "bank"));
        let noise_seed = derive_seed(cfg.seed, "noise");
        let mut next_id = 0u64;
        let mut finish = |utts: Vec<Utterance>| -> Result<Vec<Utterance>> {
            utts.into_iter()
                .map(|mut u| {
                    u.id = next_id;
                    next_id += 1;
                    u.features = Some(synth_features(
                        &u,
                        &bank,
                        cfg.frames_per_token,
                        cfg.noise_sd,
                        noise_seed,
                    )?);
                    Ok(u)
                })
                .collect()
        };
        let en_utts = finish(en_utts)?;
        let zh_utts = finish(zh_utts)?;
        let cs_utts = finish(cs_utts)?;

        let (en_tr, en_va, en_te) = split_three(en_utts, cfg.mono_train, cfg.mono_val);
        let (zh_tr, zh_va, zh_te) = split_three(zh_utts, cfg.mono_train, cfg.mono_val);
        let (mut cs_tr, cs_va, cs_te) = split_three(cs_utts, cfg.cs_train, cfg.cs_val);
        let n_src = ((cfg.cs_train as f64) * cfg.cs_source_fraction).round() as usize;
        let n_src = n_src.clamp(1, cfg.cs_train.saturating_sub(1).max(1));
        let cs_tgt_tr = cs_tr.split_off(n_src);
        let cs_src_tr = cs_tr;

        let set = Self {
            tasks: vec![
                Task {
                    name: "en".into(),
                    role: Role::Source,
                    corpus: Corpus::En,
                    train: en_tr,
                    val: en_va,
                    test: en_te,
                },
                Task {
                    name: "zh".into(),
                    role: Role::Source,
                    corpus: Corpus::Zh,
                    train: zh_tr,
                    val: zh_va,
                    test: zh_te,
                },
                Task {
                    name: "cs_src".into(),
                    role: Role::Source,
                    corpus: Corpus::Cs,
                    train: cs_src_tr,
                    val: vec![],
                    test: vec![],
                },
                Task {
                    name: "cs".into(),
                    role: Role::Target,
                    corpus: Corpus::Cs,
                    train: cs_tgt_tr,
                    val: cs_va,
                    test: cs_te,
                },
            ],
            vocab,
            languages: vec!["en".into(), "zh".into()],
            feat_dim: cfg.feat_dim,
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks the pool invariants: target tasks hold only code-switched data,
    /// code-switched ids are disjoint between source and target pools, splits
    /// are pairwise disjoint within each task, and ids are unique overall.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut cs_source = HashSet::new();
        let mut cs_target = HashSet::new();
        for t in &self.tasks {
            if t.role == Role::Target && t.corpus != Corpus::Cs {
                return Err(Error::Setup(format!("target task {} is not code-switched", t.name)));
            }
            for split in [Split::Train, Split::Val, Split::Test] {
                for u in t.split(split) {
                    if !seen.insert(u.id) {
                        return Err(Error::Setup(format!(
                            "utterance {} appears twice (task {}, split {})",
                            u.id,
                            t.name,
                            split.as_str()
                        )));
                    }
                    if u.tokens.len() != u.lang_tags.len() {
                        return Err(Error::Setup(format!("utterance {} has mismatched tags", u.id)));
                    }
                    if t.corpus == Corpus::Cs {
                        match t.role {
                            Role::Source => cs_source.insert(u.id),
                            Role::Target => cs_target.insert(u.id),
                        };
                    }
                }
            }
        }
        if cs_source.intersection(&cs_target).next().is_some() {
            return Err(Error::Setup("code-switched source and target pools overlap".into()));
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn target(&self) -> Result<&Task> {
        self.tasks
            .iter()
            .find(|t| t.role == Role::Target)
            .ok_or_else(|| Error::Setup("task set has no target task".into()))
    }

    pub fn matching(&self, filter: &TaskFilter) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| filter.accepts(&self.tasks[i]) && !self.tasks[i].train.is_empty())
            .collect()
    }

    /// All utterances of `corpus` in `split`, across tasks, in task order.
    pub fn corpus_split(&self, corpus: Corpus, split: Split) -> Vec<&Utterance> {
        self.tasks
            .iter()
            .filter(|t| t.corpus == corpus)
            .flat_map(|t| t.split(split))
            .collect()
    }

    /// Digest of a split's ids, tokens, tags and features.
    pub fn split_checksum(&self, corpus: Corpus, split: Split) -> String {
        let mut h = Sha256::new();
        for u in self.corpus_split(corpus, split) {
            h.update(u.id.to_le_bytes());
            for &t in &u.tokens {
                h.update(t.to_le_bytes());
            }
            h.update(&u.lang_tags);
            if let Some(f) = &u.features {
                for v in f.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// `BEGIN tokens END` for each utterance, with features when requested.
pub fn make_batch(utts: &[&Utterance], with_features: bool, split: Split) -> Result<SeqBatch> {
    let seqs: Vec<Vec<u32>> = utts
        .iter()
        .map(|u| {
            let mut s = Vec::with_capacity(u.tokens.len() + 2);
            s.push(BEGIN);
            s.extend_from_slice(&u.tokens);
            s.push(END);
            s
        })
        .collect();
    if with_features {
        let feats: Vec<_> = utts
            .iter()
            .map(|u| {
                u.features
                    .clone()
                    .ok_or_else(|| Error::Setup(format!("utterance {} has no features", u.id)))
            })
            .collect::<Result<_>>()?;
        SeqBatch::new(&seqs, Some(&feats), split)
    } else {
        SeqBatch::new(&seqs, None, split)
    }
}

/// Picks a task uniformly among those accepted by `filter`, then
/// `batch_size` distinct utterances uniformly from its `split`.
///
/// Test splits are never sampled for training.
pub fn sample_batch(
    set: &TaskSet,
    filter: &TaskFilter,
    split: Split,
    batch_size: usize,
    with_features: bool,
    rng: &mut Rng,
) -> Result<(usize, SeqBatch)> {
    if split == Split::Test {
        return Err(Error::Setup("refusing to sample a training batch from a test split".into()));
    }
    let candidates: Vec<usize> = set
        .matching(filter)
        .into_iter()
        .filter(|&i| !set.tasks[i].split(split).is_empty())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Setup(format!("no task matches {filter:?} with a {} split", split.as_str())));
    }
    let task_id = candidates[rng.random_range(0..candidates.len())];
    let pool = set.tasks[task_id].split(split);
    if batch_size > pool.len() || batch_size == 0 {
        return Err(Error::PoolExhausted {
            requested: batch_size,
            available: pool.len(),
        });
    }
    let picks = sample(rng, pool.len(), batch_size);
    let utts: Vec<&Utterance> = picks.iter().map(|i| &pool[i]).collect();
    Ok((task_id, make_batch(&utts, with_features, split)?))
}

/// Picks a corpus uniformly from `corpora`, then `batch_size` distinct
/// utterances from the union of that corpus's `split` across all tasks.
///
/// This is the joint-training sampler: a roster entry such as CS covers both
/// the source and target shares of the code-switched training data.
pub fn sample_corpus_batch(
    set: &TaskSet,
    corpora: &[Corpus],
    split: Split,
    batch_size: usize,
    with_features: bool,
    rng: &mut Rng,
) -> Result<(Corpus, SeqBatch)> {
    if split == Split::Test {
        return Err(Error::Setup("refusing to sample a training batch from a test split".into()));
    }
    if corpora.is_empty() {
        return Err(Error::Setup("empty corpus roster".into()));
    }
    let corpus = corpora[rng.random_range(0..corpora.len())];
    let pool = set.corpus_split(corpus, split);
    if batch_size > pool.len() || batch_size == 0 {
        return Err(Error::PoolExhausted {
            requested: batch_size,
            available: pool.len(),
        });
    }
    let picks = sample(rng, pool.len(), batch_size);
    let utts: Vec<&Utterance> = picks.iter().map(|i| pool[i]).collect();
    Ok((corpus, make_batch(&utts, with_features, split)?))
}
