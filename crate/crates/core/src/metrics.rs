//! Error rates, perplexity, baseline deltas and loss-curve logging.
//!
//! Token ids play the role of characters: error rates here are edit
//! distances over synthetic tokens and are not comparable to character
//! error rates on real speech.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::models::SeqModel;
use crate::params::ParamSet;
use crate::train::mean_nll;

pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    strsim::generic_levenshtein(&a.to_vec(), &b.to_vec())
}

/// Edit distance divided by the reference length.
pub fn cer(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("error rate undefined for an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level rate: total edits over total reference tokens.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Result<f64> {
    let (mut edits, mut len) = (0usize, 0usize);
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::Contract("error rate undefined for an empty reference".into()));
        }
        edits += edit_distance(r, h);
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Contract("no references".into()));
    }
    Ok(edits as f64 / len as f64)
}

/// `exp` of the mean next-token negative log-likelihood over `corpus`
/// (padding excluded).
pub fn perplexity<M: SeqModel + ?Sized>(model: &M, params: &ParamSet, corpus: &[&Utterance], batch_size: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Contract("perplexity of an empty corpus".into()));
    }
    let ppl = mean_nll(model, params, corpus, batch_size)?.exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric { op: "perplexity".into() });
    }
    Ok(ppl)
}

/// Improvement of `value` over `baseline` for a lower-is-better metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    /// `baseline - value`, in the metric's own units (points for rates).
    pub absolute: f64,
    /// `(baseline - value) / baseline`, in percent.
    pub relative_pct: f64,
}

pub fn relative_delta(baseline: f64, value: f64) -> Result<Delta> {
    if !(baseline > 0.0) {
        return Err(Error::Contract(format!("baseline must be > 0, got {baseline}")));
    }
    Ok(Delta {
        absolute: baseline - value,
        relative_pct: 100.0 * (baseline - value) / baseline,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run_id: String,
    pub split: String,
    pub iteration: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Append-only CSV series (`run_id,split,iteration,loss,wall_ms`), flushed
/// after every point.
pub struct CurveLogger {
    path: PathBuf,
    writer: csv::Writer<File>,
    last: HashMap<(String, String), u64>,
}

impl CurveLogger {
    /// Starts a fresh file, replacing any existing one.
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(File::create(path)?);
        writer.write_record(["run_id", "split", "iteration", "loss", "wall_ms"])?;
        writer.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            last: HashMap::new(),
        })
    }

    /// Reopens an existing file for appending, keeping only points with
    /// `iteration <= keep_through` (points logged after the last checkpoint
    /// are dropped on resume).
    pub fn resume(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<CurvePoint> = read_curves(path)?
            .into_iter()
            .filter(|p| p.iteration <= keep_through)
            .collect();
        let mut logger = Self::create(path)?;
        for p in kept {
            logger.log(p)?;
        }
        Ok(logger)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn log(&mut self, p: CurvePoint) -> Result<()> {
        let key = (p.run_id.clone(), p.split.clone());
        if let Some(&prev) = self.last.get(&key) {
            if p.iteration <= prev {
                return Err(Error::Contract(format!(
                    "curve {}/{}: iteration {} does not follow {prev}",
                    p.run_id, p.split, p.iteration
                )));
            }
        }
        self.writer.serialize(&p)?;
        self.writer.flush()?;
        self.last.insert(key, p.iteration);
        Ok(())
    }
}

pub fn read_curves(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|p| p.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub utterances: usize,
    pub cer: Option<f64>,
    /// Error rate after LM rescoring, when rescoring ran.
    pub cer_rescored: Option<f64>,
    pub perplexity: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    /// Keyed by corpus name (`CS`, `EN`, `ZH`) or stage-qualified names.
    pub tasks: BTreeMap<String, TaskMetrics>,
    pub baseline: Option<String>,
    pub deltas: BTreeMap<String, Delta>,
}
