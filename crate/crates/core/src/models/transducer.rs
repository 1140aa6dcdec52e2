//! Encoder-decoder sequence transducer.
//!
//! The encoder front-end is one strided 1-D convolution over feature frames,
//! followed by pre-norm self-attention blocks. The decoder embeds the
//! target shifted right by one, applies causally masked self-attention,
//! cross-attention over the encoder states and a feed-forward block, and
//! projects to vocabulary logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{
    conv1d, cross_entropy_sum, embedding, layer_norm, linear, log_softmax,
    scaled_dot_product_attention, sinusoidal_positions,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamSet, VarMap};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::BEGIN;

use super::{ModelKind, SeqBatch, SeqModel};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransducerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_width: usize,
    pub key_width: usize,
    pub value_width: usize,
    pub head_count: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub max_len: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            model_width: 64,
            key_width: 16,
            value_width: 16,
            head_count: 2,
            ffn_width: 128,
            vocab_size: 40,
            feat_dim: 16,
            conv_kernel: 3,
            conv_stride: 2,
            max_len: 64,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = vec![];
        for (name, v) in [
            ("transducer.enc_layers", self.enc_layers),
            ("transducer.dec_layers", self.dec_layers),
            ("transducer.model_width", self.model_width),
            ("transducer.key_width", self.key_width),
            ("transducer.value_width", self.value_width),
            ("transducer.head_count", self.head_count),
            ("transducer.ffn_width", self.ffn_width),
            ("transducer.feat_dim", self.feat_dim),
            ("transducer.conv_kernel", self.conv_kernel),
            ("transducer.conv_stride", self.conv_stride),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.head_count > 0 && self.model_width % self.head_count != 0 {
            bad.push(format!(
                "transducer.model_width {} not divisible by transducer.head_count {}",
                self.model_width, self.head_count
            ));
        }
        if self.vocab_size < 5 {
            bad.push("transducer.vocab_size must cover the 4 reserved ids plus content".into());
        }
        if self.max_len < 2 {
            bad.push("transducer.max_len must be at least 2".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Encoder frames produced from `frames` input frames.
    pub fn encoded_len(&self, frames: usize) -> usize {
        if frames < self.conv_kernel {
            0
        } else {
            (frames - self.conv_kernel) / self.conv_stride + 1
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transducer {
    pub cfg: TransducerConfig,
}

struct Attn<'t> {
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    o: Var<'t>,
}

impl Transducer {
    pub fn new(cfg: TransducerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.cfg;
        let (w, hk, hv) = (c.model_width, c.head_count * c.key_width, c.head_count * c.value_width);
        let mut s: Vec<(String, Vec<usize>, Init)> = vec![
            ("enc.conv.w".into(), vec![c.conv_kernel, c.feat_dim, w], Init::Xavier),
            ("enc.conv.b".into(), vec![w], Init::Zeros),
        ];
        let attn = |s: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            s.push((format!("{p}.q"), vec![w, hk], Init::Xavier));
            s.push((format!("{p}.k"), vec![w, hk], Init::Xavier));
            s.push((format!("{p}.v"), vec![w, hv], Init::Xavier));
            s.push((format!("{p}.o"), vec![hv, w], Init::Xavier));
        };
        let norm = |s: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            s.push((format!("{p}.g"), vec![w], Init::Ones));
            s.push((format!("{p}.b"), vec![w], Init::Zeros));
        };
        let ffn = |s: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            s.push((format!("{p}.w1"), vec![w, c.ffn_width], Init::Xavier));
            s.push((format!("{p}.b1"), vec![c.ffn_width], Init::Zeros));
            s.push((format!("{p}.w2"), vec![c.ffn_width, w], Init::Xavier));
            s.push((format!("{p}.b2"), vec![w], Init::Zeros));
        };
        for l in 0..c.enc_layers {
            norm(&mut s, &format!("enc.{l}.ln1"));
            attn(&mut s, &format!("enc.{l}.attn"));
            norm(&mut s, &format!("enc.{l}.ln2"));
            ffn(&mut s, &format!("enc.{l}.ffn"));
        }
        norm(&mut s, "enc.ln");
        s.push(("dec.embed".into(), vec![c.vocab_size, w], Init::Xavier));
        for l in 0..c.dec_layers {
            norm(&mut s, &format!("dec.{l}.ln1"));
            attn(&mut s, &format!("dec.{l}.self"));
            norm(&mut s, &format!("dec.{l}.ln2"));
            attn(&mut s, &format!("dec.{l}.cross"));
            norm(&mut s, &format!("dec.{l}.ln3"));
            ffn(&mut s, &format!("dec.{l}.ffn"));
        }
        norm(&mut s, "dec.ln");
        s.push(("out.w".into(), vec![w, c.vocab_size], Init::Xavier));
        s.push(("out.b".into(), vec![c.vocab_size], Init::Zeros));
        s
    }

    fn attn<'t>(p: &VarMap<'t>, prefix: &str) -> Result<Attn<'t>> {
        Ok(Attn {
            q: p.get(&format!("{prefix}.q"))?,
            k: p.get(&format!("{prefix}.k"))?,
            v: p.get(&format!("{prefix}.v"))?,
            o: p.get(&format!("{prefix}.o"))?,
        })
    }

    fn norm<'t>(p: &VarMap<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(
            x,
            p.get(&format!("{prefix}.g"))?,
            p.get(&format!("{prefix}.b"))?,
            LN_EPS,
        )
    }

    fn ffn<'t>(p: &VarMap<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let h = linear(
            x,
            p.get(&format!("{prefix}.w1"))?,
            Some(p.get(&format!("{prefix}.b1"))?),
        )?
        .relu()?;
        linear(
            h,
            p.get(&format!("{prefix}.w2"))?,
            Some(p.get(&format!("{prefix}.b2"))?),
        )
    }

    /// Multi-head attention of `xq [B,T,W]` over `xkv [B,S,W]`.
    fn mha<'t>(
        &self,
        a: &Attn<'t>,
        xq: Var<'t>,
        xkv: Var<'t>,
        mask: Option<&Tensor>,
        causal: bool,
    ) -> Result<Var<'t>> {
        let c = &self.cfg;
        let (b, t, s) = (xq.shape()[0], xq.shape()[1], xkv.shape()[1]);
        let h = c.head_count;
        let heads = |x: Var<'t>, w: Var<'t>, len: usize, d: usize| -> Result<Var<'t>> {
            linear(x, w, None)?
                .reshape(&[b, len, h, d])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, len, d])
        };
        let q = heads(xq, a.q, t, c.key_width)?;
        let k = heads(xkv, a.k, s, c.key_width)?;
        let v = heads(xkv, a.v, s, c.value_width)?;
        let ctx = scaled_dot_product_attention(q, k, v, mask, causal)?
            .reshape(&[b, h, t, c.value_width])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, h * c.value_width])?;
        linear(ctx, a.o, None)
    }

    /// Key-padding mask `[B*H, T, S]` keeping key positions `< lens[b]`.
    fn key_mask(&self, lens: &[usize], t: usize, s: usize) -> Tensor {
        let h = self.cfg.head_count;
        let mut data = vec![0.0; lens.len() * h * t * s];
        for (bi, &len) in lens.iter().enumerate() {
            for hi in 0..h {
                for i in 0..t {
                    let row = ((bi * h + hi) * t + i) * s;
                    for j in 0..len.min(s) {
                        data[row + j] = 1.0;
                    }
                }
            }
        }
        Tensor::new(vec![lens.len() * h, t, s], data).expect("non-empty mask")
    }

    /// Encodes `features [B, F, D]`; returns states `[B, S, W]` and the
    /// per-example number of valid encoder positions.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        p: &VarMap<'t>,
        features: &Tensor,
        frame_lengths: &[usize],
    ) -> Result<(Var<'t>, Vec<usize>)> {
        let c = &self.cfg;
        let fs = features.shape();
        if fs.len() != 3 || fs[2] != c.feat_dim || fs[0] != frame_lengths.len() {
            return Err(Error::Structure(format!(
                "features {fs:?} for feat_dim {} and {} examples",
                c.feat_dim,
                frame_lengths.len()
            )));
        }
        let enc_lens: Vec<usize> = frame_lengths.iter().map(|&f| c.encoded_len(f)).collect();
        if enc_lens.contains(&0) {
            return Err(Error::Structure(format!(
                "an utterance has fewer frames than the conv kernel ({})",
                c.conv_kernel
            )));
        }
        let x = tape.constant(features.clone());
        let mut h = conv1d(x, p.get("enc.conv.w")?, p.get("enc.conv.b")?, c.conv_stride)?;
        let s = h.shape()[1];
        h = h.add(tape.constant(sinusoidal_positions(s, c.model_width)))?;
        let mask = self.key_mask(&enc_lens, s, s);
        for l in 0..c.enc_layers {
            let a = Self::attn(p, &format!("enc.{l}.attn"))?;
            let n = Self::norm(p, &format!("enc.{l}.ln1"), h)?;
            h = h.add(self.mha(&a, n, n, Some(&mask), false)?)?;
            let n = Self::norm(p, &format!("enc.{l}.ln2"), h)?;
            h = h.add(Self::ffn(p, &format!("enc.{l}.ffn"), n)?)?;
        }
        Ok((Self::norm(p, "enc.ln", h)?, enc_lens))
    }

    /// Decoder logits `[B, T, V]` for input ids `[B, T]` (row-major).
    pub fn decode_logits<'t>(
        &self,
        tape: &'t Tape,
        p: &VarMap<'t>,
        enc: Var<'t>,
        enc_lens: &[usize],
        inputs: &[u32],
        t: usize,
    ) -> Result<Var<'t>> {
        let c = &self.cfg;
        let b = enc_lens.len();
        if inputs.len() != b * t {
            return Err(Error::Structure(format!("{} decoder ids for [{b}, {t}]", inputs.len())));
        }
        if t > c.max_len {
            return Err(Error::Length { len: t, max: c.max_len });
        }
        let s = enc.shape()[1];
        let emb = embedding(p.get("dec.embed")?, inputs)?
            .scale((c.model_width as f64).sqrt())?
            .reshape(&[b, t, c.model_width])?;
        let mut h = emb.add(tape.constant(sinusoidal_positions(t, c.model_width)))?;
        let cross_mask = self.key_mask(enc_lens, t, s);
        for l in 0..c.dec_layers {
            let sa = Self::attn(p, &format!("dec.{l}.self"))?;
            let n = Self::norm(p, &format!("dec.{l}.ln1"), h)?;
            h = h.add(self.mha(&sa, n, n, None, true)?)?;
            let ca = Self::attn(p, &format!("dec.{l}.cross"))?;
            let n = Self::norm(p, &format!("dec.{l}.ln2"), h)?;
            h = h.add(self.mha(&ca, n, enc, Some(&cross_mask), false)?)?;
            let n = Self::norm(p, &format!("dec.{l}.ln3"), h)?;
            h = h.add(Self::ffn(p, &format!("dec.{l}.ffn"), n)?)?;
        }
        let h = Self::norm(p, "dec.ln", h)?;
        linear(h, p.get("out.w")?, Some(p.get("out.b")?))
    }

    /// Teacher-forced logits `[B, L-1, V]` for a batch.
    pub fn logits<'t>(&self, tape: &'t Tape, p: &VarMap<'t>, batch: &SeqBatch) -> Result<Var<'t>> {
        let features = batch
            .features
            .as_ref()
            .ok_or_else(|| Error::Structure("transducer batch without features".into()))?;
        batch.check_vocab(self.cfg.vocab_size)?;
        let (enc, enc_lens) = self.encode(tape, p, features, &batch.frame_lengths)?;
        let (inputs, _, _) = batch.shifted();
        self.decode_logits(tape, p, enc, &enc_lens, &inputs, batch.max_len - 1)
    }

    /// Next-token log-distribution after `prefix` (which must start with
    /// `BEGIN`) given one utterance's `features [frames, dim]`.
    pub fn step_decode(&self, params: &ParamSet, features: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut stepper = TransducerStepper::new(self, params, features)?;
        Ok(stepper.step(&[prefix.to_vec()])?.remove(0))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

impl SeqModel for Transducer {
    fn kind(&self) -> ModelKind {
        ModelKind::Transducer
    }

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn init_params(&self, rng: &mut Rng) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (name, shape, init) in self.param_shapes() {
            let t = match init {
                Init::Xavier => xavier_uniform(&shape, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            p.insert(name, t)?;
        }
        Ok(p)
    }

    fn nll_sum<'t>(&self, tape: &'t Tape, p: &VarMap<'t>, batch: &SeqBatch) -> Result<(Var<'t>, usize)> {
        let logits = self.logits(tape, p, batch)?;
        let (_, targets, weights) = batch.shifted();
        let flat = logits.reshape(&[targets.len(), self.cfg.vocab_size])?;
        Ok((cross_entropy_sum(flat, &targets, &weights)?, batch.target_count()))
    }
}

/// Incremental scorer for beam search: encodes one utterance once and
/// scores batches of equal-length prefixes against it.
pub struct TransducerStepper<'m> {
    model: &'m Transducer,
    params: &'m ParamSet,
    enc: Tensor,
    enc_len: usize,
}

impl<'m> TransducerStepper<'m> {
    pub fn new(model: &'m Transducer, params: &'m ParamSet, features: &Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Structure(format!(
                "utterance features must be [frames, dim], got {:?}",
                features.shape()
            )));
        }
        let batched = features.reshape(&[1, features.shape()[0], features.shape()[1]])?;
        let tape = Tape::new();
        let p = params.to_constants(&tape);
        let (enc, lens) = model.encode(&tape, &p, &batched, &[features.shape()[0]])?;
        Ok(Self {
            model,
            params,
            enc: enc.value(),
            enc_len: lens[0],
        })
    }

    /// Longest prefix the positional table admits, which is also the number
    /// of decoding steps available after `BEGIN`.
    pub fn max_prefix_len(&self) -> usize {
        self.model.cfg.max_len - 1
    }

    /// Log-distributions over the vocabulary following each prefix.
    pub fn step(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        if t == 0 || prefixes.iter().any(|p| p.len() != t || p[0] != BEGIN) {
            return Err(Error::Contract(
                "prefixes must be non-empty, equal length and start with BEGIN".into(),
            ));
        }
        let max = self.model.cfg.max_len;
        if t >= max {
            return Err(Error::Length { len: t, max });
        }
        let tape = Tape::new();
        let p = self.params.to_constants(&tape);
        let es = self.enc.shape();
        let enc = if k == 1 {
            self.enc.clone()
        } else {
            let mut d = Vec::with_capacity(k * self.enc.numel());
            for _ in 0..k {
                d.extend_from_slice(self.enc.data());
            }
            Tensor::new(vec![k, es[1], es[2]], d)?
        };
        let enc = tape.constant(enc);
        let ids: Vec<u32> = prefixes.iter().flatten().copied().collect();
        let logits = self
            .model
            .decode_logits(&tape, &p, enc, &vec![self.enc_len; k], &ids, t)?;
        let v = self.model.cfg.vocab_size;
        let last = logits.slice(1, t - 1, 1, 1)?.reshape(&[k, v])?;
        let lp = log_softmax(last)?.value();
        Ok(lp.data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}
