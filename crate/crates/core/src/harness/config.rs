//! Experiment configuration: a flat `section.key = value` text format with
//! command-line overrides, validated into typed sections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Corpus, DataConfig};
use crate::decode::RescoreWeights;
use crate::error::{Error, Result};
use crate::models::{LmConfig, ModelKind, TransducerConfig};
use crate::train::{MetaHyper, MetaMode, OptKind, OuterConfig, Schedule, ValPool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OnlyCs,
    Joint,
    MetaTransfer,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::OnlyCs => "only_cs",
            Strategy::Joint => "joint",
            Strategy::MetaTransfer => "meta_transfer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub seed: u64,
    pub iterations: u64,
    pub eval_every: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Corpora whose validation loss is logged at each evaluation; CS is
    /// always included since it drives model selection.
    pub eval_corpora: String,
    /// Use at most this many validation utterances per corpus; 0 means all.
    pub val_limit: usize,
    /// Write `wall_ms = 0` so curve files are byte-reproducible.
    pub deterministic_clock: bool,
    /// Load the corpus from this directory instead of generating it.
    pub corpus_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub kind: OptKind,
    /// Learning rate for joint and only-CS training.
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub alpha: f64,
    /// Outer learning rate.
    pub beta: f64,
    pub tasks_per_iter: usize,
    pub mode: MetaMode,
    pub inner_steps: usize,
    pub val_pool: ValPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneSection {
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RescoreLmSection {
    pub iterations: u64,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub width: usize,
    pub max_len: usize,
    pub w_dec: f64,
    pub w_lm: f64,
    pub w_wc: f64,
    /// Decode at most this many test utterances per corpus; 0 means all.
    pub test_limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    /// Corpora joined with `+`, e.g. `EN+ZH+CS`.
    pub roster: String,
    pub finetune: bool,
    pub rescore: bool,
    pub model: ModelKind,
    pub run: RunSection,
    pub data: DataConfig,
    pub transducer: TransducerConfig,
    pub lm: LmConfig,
    pub optim: OptimSection,
    pub meta: MetaSection,
    pub ft: FineTuneSection,
    pub rescore_lm: RescoreLmSection,
    pub decode: DecodeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::MetaTransfer,
            roster: "EN+ZH+CS".into(),
            finetune: false,
            rescore: false,
            model: ModelKind::Transducer,
            run: RunSection {
                id: "run".into(),
                seed: 1,
                iterations: 2000,
                eval_every: 50,
                batch_size: 8,
                eval_batch_size: 50,
                eval_corpora: "CS+EN+ZH".into(),
                val_limit: 0,
                deterministic_clock: true,
                corpus_dir: String::new(),
            },
            data: DataConfig::default(),
            transducer: TransducerConfig {
                enc_layers: 1,
                dec_layers: 1,
                model_width: 24,
                key_width: 12,
                value_width: 12,
                head_count: 2,
                ffn_width: 48,
                ..TransducerConfig::default()
            },
            lm: LmConfig::default(),
            optim: OptimSection {
                kind: OptKind::Adam,
                lr: 3e-3,
                clip: 5.0,
            },
            meta: MetaSection {
                alpha: 0.1,
                beta: 3e-3,
                tasks_per_iter: 3,
                mode: MetaMode::FirstOrder,
                inner_steps: 1,
                val_pool: ValPool::TargetTrain,
            },
            ft: FineTuneSection {
                lr: 1e-5,
                patience: 1,
                max_epochs: 10,
                batch_size: 8,
            },
            rescore_lm: RescoreLmSection {
                iterations: 1000,
                lr: 3e-3,
                batch_size: 16,
            },
            decode: DecodeSection {
                width: 5,
                max_len: 300,
                w_dec: 1.0,
                w_lm: 0.1,
                w_wc: 0.1,
                test_limit: 0,
            },
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut cur = &mut root;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config sections are objects");
        }
        cur.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// A raw value: JSON when it parses as JSON, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn same_kind(default: &Value, new: &Value) -> bool {
    matches!(
        (default, new),
        (Value::Number(_), Value::Number(_)) | (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_))
    )
}

/// `EN+ZH+CS` style lists, deduplicated and sorted.
pub fn parse_corpora(key: &str, text: &str) -> Result<Vec<Corpus>> {
    let mut out = vec![];
    for part in text.split(['+', ',']) {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let c = Corpus::parse(part).ok_or_else(|| Error::Config(vec![format!("{key}: unknown corpus {part}")]))?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort();
    Ok(out)
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = vec![];
    let mut bad = vec![];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => bad.push(format!("line {}: expected `key = value`", i + 1)),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(bad))
    }
}

impl ExperimentConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Canonical snapshot text: every key, sorted, values in JSON form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_flat() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }

    /// Applies `key = value` pairs on top of `self`. Unknown keys and values
    /// of the wrong type are all reported together.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut flat = self.to_flat();
        let mut bad = vec![];
        for (k, raw) in pairs {
            match flat.get(k) {
                None => bad.push(format!("{k}: unknown key")),
                Some(old) => {
                    let new = parse_value(raw);
                    if same_kind(old, &new) {
                        flat.insert(k.clone(), new);
                    } else {
                        bad.push(format!("{k}: expected a value like {old}, got {raw:?}"));
                    }
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let cfg: Self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().with_overrides(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn roster(&self) -> Result<Vec<Corpus>> {
        parse_corpora("roster", &self.roster)
    }

    pub fn eval_corpora(&self) -> Result<Vec<Corpus>> {
        let mut out = parse_corpora("run.eval_corpora", &self.run.eval_corpora)?;
        if !out.contains(&Corpus::Cs) {
            out.push(Corpus::Cs);
            out.sort();
        }
        Ok(out)
    }

    /// Roster after strategy rules: only-CS always trains on CS alone.
    pub fn effective_roster(&self) -> Result<Vec<Corpus>> {
        match self.strategy {
            Strategy::OnlyCs => Ok(vec![Corpus::Cs]),
            _ => self.roster(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        let mut take = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Config(v) => bad.extend(v),
                    other => bad.push(other.to_string()),
                }
            }
        };
        take(self.data.validate());
        take(self.transducer.validate());
        take(self.lm.validate());
        take(self.meta_hyper().validate());
        match self.roster() {
            Ok(r) if r.is_empty() => bad.push("roster: must name at least one corpus".into()),
            Ok(r) => {
                if self.strategy == Strategy::MetaTransfer && !r.contains(&Corpus::Cs) {
                    bad.push("roster: meta_transfer needs CS for its target task".into());
                }
                if self.strategy == Strategy::OnlyCs && r != [Corpus::Cs] {
                    log::warn!("strategy only_cs ignores roster {}", self.roster);
                }
            }
            Err(Error::Config(v)) => bad.extend(v),
            Err(e) => bad.push(e.to_string()),
        }
        if let Err(e) = self.eval_corpora() {
            bad.push(e.to_string());
        }
        let vocab = self.data.vocab_size();
        if self.transducer.vocab_size != vocab {
            bad.push(format!("transducer.vocab_size: must equal the data vocabulary ({vocab})"));
        }
        if self.lm.vocab_size != vocab {
            bad.push(format!("lm.vocab_size: must equal the data vocabulary ({vocab})"));
        }
        if self.transducer.feat_dim != self.data.feat_dim {
            bad.push("transducer.feat_dim: must equal data.feat_dim".into());
        }
        let longest = self.data.mean_len + self.data.len_jitter + 2;
        if self.transducer.max_len < longest {
            bad.push(format!("transducer.max_len: must be >= {longest} for the configured utterance lengths"));
        }
        if self.run.eval_every == 0 {
            bad.push("run.eval_every: must be >= 1".into());
        }
        if self.run.batch_size == 0 {
            bad.push("run.batch_size: must be >= 1".into());
        }
        if self.run.eval_batch_size == 0 {
            bad.push("run.eval_batch_size: must be >= 1".into());
        }
        if !(self.optim.lr > 0.0) {
            bad.push("optim.lr: must be > 0".into());
        }
        if !(self.optim.clip >= 0.0) {
            bad.push("optim.clip: must be >= 0".into());
        }
        if !(self.ft.lr > 0.0) {
            bad.push("ft.lr: must be > 0".into());
        }
        if self.ft.batch_size == 0 || self.ft.max_epochs == 0 {
            bad.push("ft.batch_size and ft.max_epochs: must be >= 1".into());
        }
        if self.decode.width == 0 || self.decode.max_len == 0 {
            bad.push("decode.width and decode.max_len: must be >= 1".into());
        }
        for (k, v) in [("decode.w_dec", self.decode.w_dec), ("decode.w_lm", self.decode.w_lm), ("decode.w_wc", self.decode.w_wc)] {
            if !v.is_finite() {
                bad.push(format!("{k}: must be finite"));
            }
        }
        if self.rescore && self.model == ModelKind::Lm {
            bad.push("rescore: applies to transducer runs only".into());
        }
        if self.rescore && self.rescore_lm.iterations == 0 {
            bad.push("rescore_lm.iterations: must be >= 1 when rescoring".into());
        }
        if self.run.id.is_empty() || self.run.id.contains(['/', '\\']) {
            bad.push("run.id: must be a non-empty name without path separators".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn meta_hyper(&self) -> MetaHyper {
        MetaHyper {
            alpha: self.meta.alpha,
            beta: self.meta.beta,
            tasks_per_iter: self.meta.tasks_per_iter,
            mode: self.meta.mode,
            inner_steps: self.meta.inner_steps,
        }
    }

    /// Outer optimizer: meta runs step with `meta.beta`, others with `optim.lr`.
    pub fn outer(&self) -> OuterConfig {
        OuterConfig {
            kind: self.optim.kind,
            lr: match self.strategy {
                Strategy::MetaTransfer => self.meta.beta,
                _ => self.optim.lr,
            },
            clip: (self.optim.clip > 0.0).then_some(self.optim.clip),
            ..OuterConfig::default()
        }
    }

    pub fn ft_schedule(&self) -> Schedule {
        Schedule::early_stop(self.ft.lr, self.ft.patience, self.ft.max_epochs, self.ft.batch_size)
    }

    pub fn weights(&self) -> RescoreWeights {
        RescoreWeights {
            w_dec: self.decode.w_dec,
            w_lm: self.decode.w_lm,
            w_wc: self.decode.w_wc,
        }
    }
}
