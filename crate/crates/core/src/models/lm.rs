//! Multi-layer LSTM language model over token streams.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{cross_entropy_sum, embedding, linear, log_softmax};
use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamSet, VarMap};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::BEGIN;

use super::{ModelKind, SeqBatch, SeqModel, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 48,
            vocab_size: 40,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        if self.layers == 0 {
            bad.push("lm.layers must be >= 1".to_string());
        }
        if self.hidden == 0 {
            bad.push("lm.hidden must be positive".to_string());
        }
        if self.vocab_size < 5 {
            bad.push("lm.vocab_size must cover the reserved ids plus content".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmLm {
    pub cfg: LmConfig,
}

impl LstmLm {
    pub fn new(cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Next-token logits `[B, T, V]` for ids `[B, T]`.
    pub fn logits<'t>(&self, tape: &'t Tape, p: &VarMap<'t>, ids: &[u32], b: usize, t: usize) -> Result<Var<'t>> {
        let h = self.cfg.hidden;
        let v = self.cfg.vocab_size;
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Vocabulary { id, vocab: v });
        }
        let mut x = embedding(p.get("lm.embed")?, ids)?.reshape(&[b, t, h])?;
        for l in 0..self.cfg.layers {
            let xw = linear(x, p.get(&format!("lm.{l}.wx"))?, Some(p.get(&format!("lm.{l}.b"))?))?;
            let wh = p.get(&format!("lm.{l}.wh"))?;
            let mut hs = tape.constant(Tensor::zeros(&[b, h]));
            let mut cs = tape.constant(Tensor::zeros(&[b, h]));
            let mut outs = Vec::with_capacity(t);
            for step in 0..t {
                let gates = xw
                    .slice(1, step, 1, 1)?
                    .reshape(&[b, 4 * h])?
                    .add(hs.matmul(wh)?)?;
                let i = gates.slice(1, 0, h, 1)?.sigmoid()?;
                let f = gates.slice(1, h, h, 1)?.sigmoid()?;
                let g = gates.slice(1, 2 * h, h, 1)?.tanh()?;
                let o = gates.slice(1, 3 * h, h, 1)?.sigmoid()?;
                cs = f.mul(cs)?.add(i.mul(g)?)?;
                hs = o.mul(cs.tanh()?)?;
                outs.push(hs.reshape(&[b, 1, h])?);
            }
            x = concat(&outs, 1)?;
        }
        linear(x, p.get("lm.out.w")?, Some(p.get("lm.out.b")?))
    }

    /// Total log-probability of `tokens` continuing an implicit `BEGIN`:
    /// `sum_t log p(token_t | BEGIN, token_<t)`.
    pub fn score(&self, params: &ParamSet, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot score an empty sequence".into()));
        }
        let v = self.cfg.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&i| i as usize >= v) {
            return Err(Error::Vocabulary { id, vocab: v });
        }
        let tape = Tape::new();
        let p = params.to_constants(&tape);
        let mut input = Vec::with_capacity(tokens.len());
        input.push(BEGIN);
        input.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = self.logits(&tape, &p, &input, 1, input.len())?;
        let lp = log_softmax(logits.reshape(&[tokens.len(), v])?)?.value();
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, &tok)| lp.data()[i * v + tok as usize])
            .sum())
    }

    /// Convenience: a one-row batch `BEGIN, tokens...` for consistency checks.
    pub fn single_batch(tokens: &[u32]) -> Result<SeqBatch> {
        let mut seq = vec![BEGIN];
        seq.extend_from_slice(tokens);
        SeqBatch::new(&[seq], None, Split::Val)
    }
}

impl SeqModel for LstmLm {
    fn kind(&self) -> ModelKind {
        ModelKind::Lm
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let (h, v) = (self.cfg.hidden, self.cfg.vocab_size);
        let mut p = ParamSet::new();
        p.insert("lm.embed", xavier_uniform(&[v, h], rng))?;
        for l in 0..self.cfg.layers {
            p.insert(format!("lm.{l}.wx"), xavier_uniform(&[h, 4 * h], rng))?;
            p.insert(format!("lm.{l}.wh"), xavier_uniform(&[h, 4 * h], rng))?;
            // Gate order i, f, g, o; forget-gate bias starts at +1.
            let mut b = vec![0.0; 4 * h];
            b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
            p.insert(format!("lm.{l}.b"), Tensor::vector(b))?;
        }
        p.insert("lm.out.w", xavier_uniform(&[h, v], rng))?;
        p.insert("lm.out.b", Tensor::zeros(&[v]))?;
        Ok(p)
    }

    fn nll_sum<'t>(&self, tape: &'t Tape, p: &VarMap<'t>, batch: &SeqBatch) -> Result<(Var<'t>, usize)> {
        let (inputs, targets, weights) = batch.shifted();
        let t = batch.max_len - 1;
        let logits = self.logits(tape, p, &inputs, batch.batch_size(), t)?;
        let flat = logits.reshape(&[targets.len(), self.cfg.vocab_size])?;
        Ok((cross_entropy_sum(flat, &targets, &weights)?, batch.target_count()))
    }
}
