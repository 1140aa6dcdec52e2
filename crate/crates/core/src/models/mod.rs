//! Trainable sequence models behind a uniform `(params, batch) -> loss`
//! interface.

mod lm;
mod transducer;

pub use lm::{LmConfig, LstmLm};
pub use transducer::{Transducer, TransducerConfig, TransducerStepper};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{backward, GradMap, ParamSet, VarMap};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Which split a batch was drawn from. Training entry points refuse
/// [`Split::Test`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A padded batch of token sequences (each `BEGIN ... END`) with optional
/// per-example feature frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    /// `[batch, max_frames, feat_dim]`, zero padded.
    pub features: Option<Tensor>,
    pub frame_lengths: Vec<usize>,
    /// Row-major `[batch, max_len]`, padded with `PAD`.
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
    pub split: Split,
}

impl SeqBatch {
    /// Pads `seqs` (and the matching feature matrices `[frames, dim]`).
    pub fn new(seqs: &[Vec<u32>], features: Option<&[Tensor]>, split: Split) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if seqs.iter().any(|s| s.len() < 2) {
            return Err(Error::Contract("every sequence needs at least 2 tokens".into()));
        }
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = vec![PAD; seqs.len() * max_len];
        for (i, s) in seqs.iter().enumerate() {
            tokens[i * max_len..i * max_len + s.len()].copy_from_slice(s);
        }
        let lengths = seqs.iter().map(Vec::len).collect();
        let (features, frame_lengths) = match features {
            None => (None, vec![]),
            Some(f) => {
                if f.len() != seqs.len() {
                    return Err(Error::Contract(format!(
                        "{} feature matrices for {} sequences",
                        f.len(),
                        seqs.len()
                    )));
                }
                let dim = f[0].shape().get(1).copied().unwrap_or(0);
                if f.iter().any(|t| t.rank() != 2 || t.shape()[1] != dim) {
                    return Err(Error::Contract("feature matrices must be [frames, dim]".into()));
                }
                let max_frames = f.iter().map(|t| t.shape()[0]).max().unwrap_or(0);
                let mut data = vec![0.0; f.len() * max_frames * dim];
                for (i, t) in f.iter().enumerate() {
                    let off = i * max_frames * dim;
                    data[off..off + t.numel()].copy_from_slice(t.data());
                }
                (
                    Some(Tensor::new(vec![f.len(), max_frames, dim], data)?),
                    f.iter().map(|t| t.shape()[0]).collect(),
                )
            }
        };
        Ok(Self {
            features,
            frame_lengths,
            tokens,
            lengths,
            max_len,
            split,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    /// Teacher-forcing view: decoder inputs `[B, L-1]`, targets `[B, L-1]`
    /// and 0/1 weights masking out padding.
    pub fn shifted(&self) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
        let b = self.batch_size();
        let t = self.max_len - 1;
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        let mut weights = Vec::with_capacity(b * t);
        for i in 0..b {
            let row = &self.tokens[i * self.max_len..(i + 1) * self.max_len];
            for p in 0..t {
                inputs.push(row[p]);
                targets.push(row[p + 1]);
                weights.push(if p + 1 < self.lengths[i] { 1.0 } else { 0.0 });
            }
        }
        (inputs, targets, weights)
    }

    /// Number of predicted (non-pad) target positions.
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::Vocabulary { id, vocab }),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transducer,
    Lm,
}

/// A model trained by every strategy in [`crate::train`].
pub trait SeqModel: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn vocab_size(&self) -> usize;

    fn init_params(&self, rng: &mut Rng) -> Result<ParamSet>;

    /// Summed token negative log-likelihood over non-pad targets, recorded on
    /// `tape`, together with the number of targets.
    fn nll_sum<'t>(&self, tape: &'t Tape, params: &VarMap<'t>, batch: &SeqBatch) -> Result<(Var<'t>, usize)>;

    /// Mean token cross-entropy over non-pad targets.
    fn loss<'t>(&self, tape: &'t Tape, params: &VarMap<'t>, batch: &SeqBatch) -> Result<Var<'t>> {
        let (sum, count) = self.nll_sum(tape, params, batch)?;
        sum.scale(1.0 / count as f64)
    }

    fn loss_value(&self, params: &ParamSet, batch: &SeqBatch) -> Result<f64> {
        let tape = Tape::new();
        let vars = params.to_constants(&tape);
        Ok(self.loss(&tape, &vars, batch)?.value().item())
    }

    fn loss_and_grad(&self, params: &ParamSet, batch: &SeqBatch) -> Result<(f64, GradMap)> {
        let tape = Tape::new();
        let vars = params.to_vars(&tape);
        let loss = self.loss(&tape, &vars, batch)?;
        let value = loss.value().item();
        Ok((value, backward(&tape, loss, &vars)?))
    }
}
