//! Neural-network building blocks composed from tape primitives.
//!
//! Because each block is a composition of differentiable primitives, its
//! gradient (and the gradient of its gradient) comes for free from the tape.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

use super::tape::{concat, Var};
#[cfg(test)]
use super::tape::Tape;

/// Additive bias applied to disallowed attention logits. Large enough that
/// `exp` underflows to exactly zero after max-subtraction, yet finite.
pub const MASK_BIAS: f64 = -1.0e9;

pub fn softmax<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shifted = x.sub(x.tape().constant(kernels::max_last_keepdim(&x.value())))?;
    let e = shifted.exp()?;
    e.div(e.sum_last_keepdim()?)
}

pub fn log_softmax<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shifted = x.sub(x.tape().constant(kernels::max_last_keepdim(&x.value())))?;
    let lse = shifted.exp()?.sum_last_keepdim()?.ln()?;
    shifted.sub(lse)
}

/// Normalizes over the last axis, then applies the affine `gamma`, `beta`.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
    let d = *x.shape().last().ok_or_else(|| Error::dim("layer_norm", "rank 0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!("affine params {:?}/{:?} for width {d}", gamma.shape(), beta.shape()),
        ));
    }
    let mean = x.sum_last_keepdim()?.scale(1.0 / d as f64)?;
    let centered = x.sub(mean)?;
    let var = centered.mul(centered)?.sum_last_keepdim()?.scale(1.0 / d as f64)?;
    let inv = var.add_scalar(eps)?.powf(-0.5)?;
    centered.mul(inv)?.mul(gamma)?.add(beta)
}

/// `x [.., in] @ w [in, out] (+ b [out])`, flattening leading axes.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let shape = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || shape.last() != Some(&ws[0]) {
        return Err(Error::dim("linear", format!("{shape:?} x {ws:?}")));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let mut y = x.reshape(&[rows, ws[0]])?.matmul(w)?;
    if let Some(b) = b {
        y = y.add(b)?;
    }
    let mut out = shape[..shape.len() - 1].to_vec();
    out.push(ws[1]);
    y.reshape(&out)
}

pub(crate) fn one_hot(ids: &[u32], vocab: usize, op: &'static str) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * vocab];
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::Vocabulary { id, vocab });
        }
        data[i * vocab + id as usize] = 1.0;
    }
    Tensor::new(vec![ids.len(), vocab], data).map_err(|_| Error::dim(op, "empty id list"))
}

/// Row lookup `table[ids]`, realized as a one-hot product so that it stays
/// twice differentiable.
pub fn embedding<'t>(table: Var<'t>, ids: &[u32]) -> Result<Var<'t>> {
    let ts = table.shape();
    if ts.len() != 2 {
        return Err(Error::dim("embedding", format!("table shape {ts:?}")));
    }
    let oh = table.tape().constant(one_hot(ids, ts[0], "embedding")?);
    oh.matmul(table)
}

/// Strided valid 1-D convolution over time.
///
/// `x [B, T, C]`, `w [K, C, O]`, `b [O]` -> `[B, (T-K)/stride + 1, O]`.
pub fn conv1d<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || b.shape() != [ws[2]] || stride == 0 {
        return Err(Error::dim(
            "conv1d",
            format!("input {xs:?}, kernel {ws:?}, bias {:?}, stride {stride}", b.shape()),
        ));
    }
    let (batch, frames, cin) = (xs[0], xs[1], xs[2]);
    let (k, cout) = (ws[0], ws[2]);
    if frames < k {
        return Err(Error::dim("conv1d", format!("{frames} frames < kernel {k}")));
    }
    let out_len = (frames - k) / stride + 1;
    let mut acc: Option<Var<'t>> = None;
    for j in 0..k {
        let window = x
            .slice(1, j, out_len, stride)?
            .reshape(&[batch * out_len, cin])?;
        let tap = w.slice(0, j, 1, 1)?.reshape(&[cin, cout])?;
        let term = window.matmul(tap)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.expect("kernel has at least one tap")
        .add(b)?
        .reshape(&[batch, out_len, cout])
}

/// Builds the additive bias for attention logits of shape `[G, T, S]` from an
/// optional 0/1 keep-mask and causality.
pub fn attention_bias(
    groups: usize,
    t: usize,
    s: usize,
    mask: Option<&Tensor>,
    causal: bool,
) -> Result<Option<Tensor>> {
    if mask.is_none() && !causal {
        return Ok(None);
    }
    if let Some(m) = mask {
        if m.shape() != [groups, t, s] {
            return Err(Error::dim(
                "attention",
                format!("mask {:?} vs logits {:?}", m.shape(), [groups, t, s]),
            ));
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::dim("attention", "mask must be boolean (0/1)"));
        }
    }
    let mut data = vec![0.0; groups * t * s];
    for g in 0..groups {
        for i in 0..t {
            for j in 0..s {
                let idx = (g * t + i) * s + j;
                let keep = mask.is_none_or(|m| m.data()[idx] == 1.0) && (!causal || j <= i);
                if !keep {
                    data[idx] = MASK_BIAS;
                }
            }
        }
    }
    Ok(Some(Tensor::from_parts(vec![groups, t, s], data)))
}

/// `softmax(q k^T / sqrt(dk) + bias) v` over `[G, T, dk]`, `[G, S, dk]`,
/// `[G, S, dv]`. A causal mask zeroes every weight with key index > query
/// index.
pub fn scaled_dot_product_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Option<&Tensor>,
    causal: bool,
) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3
        || ks.len() != 3
        || vs.len() != 3
        || qs[0] != ks[0]
        || ks[0] != vs[0]
        || qs[2] != ks[2]
        || ks[1] != vs[1]
    {
        return Err(Error::dim("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    if causal && qs[1] > ks[1] {
        return Err(Error::dim("attention", "causal mask needs T <= S"));
    }
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (qs[2] as f64).sqrt())?;
    if let Some(bias) = attention_bias(qs[0], qs[1], ks[1], mask, causal)? {
        scores = scores.add(q.tape().constant(bias))?;
    }
    softmax(scores)?.matmul(v)
}

/// Attention weights alone (for inspection and tests).
pub fn attention_weights<'t>(
    q: Var<'t>,
    k: Var<'t>,
    mask: Option<&Tensor>,
    causal: bool,
) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    let mut scores = q.matmul(k.transpose()?)?.scale(1.0 / (qs[2] as f64).sqrt())?;
    if let Some(bias) = attention_bias(qs[0], qs[1], ks[1], mask, causal)? {
        scores = scores.add(q.tape().constant(bias))?;
    }
    softmax(scores)
}

/// Weighted mean token cross-entropy of `logits [N, V]` against `targets`.
/// Rows with weight 0 (padding) contribute nothing.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[u32], weights: &[f64]) -> Result<Var<'t>> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != targets.len() || weights.len() != targets.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("logits {ls:?}, {} targets, {} weights", targets.len(), weights.len()),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::dim("cross_entropy", "no positions carry weight"));
    }
    let nll_sum = cross_entropy_sum(logits, targets, weights)?;
    nll_sum.scale(1.0 / total)
}

/// Weighted *sum* of token negative log-likelihoods.
pub fn cross_entropy_sum<'t>(logits: Var<'t>, targets: &[u32], weights: &[f64]) -> Result<Var<'t>> {
    let v = logits.shape()[1];
    let mut sel = one_hot(targets, v, "cross_entropy")?.to_vec();
    for (row, &w) in sel.chunks_mut(v).zip(weights) {
        for x in row {
            *x *= w;
        }
    }
    let sel = Tensor::from_parts(vec![targets.len(), v], sel);
    log_softmax(logits)?
        .mul(logits.tape().constant(sel))?
        .sum()?
        .neg()
}

/// The op kinds that can be recorded through [`forward_op`].
#[derive(Clone, Debug)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Embedding { ids: Vec<u32> },
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Conv1d { stride: usize },
    Attention { causal: bool, mask: Option<Tensor> },
    CrossEntropy { targets: Vec<u32> },
    Mean,
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Embedding { .. } => "embedding",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Attention { .. } => "attention",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Concat { .. } => 2,
            OpKind::LayerNorm { .. } | OpKind::Conv1d { .. } | OpKind::Attention { .. } => 3,
            _ => 1,
        }
    }
}

/// Records one op of the given kind on the inputs' tape.
pub fn forward_op<'t>(kind: &OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let want = kind.arity();
    let concat_ok = matches!(kind, OpKind::Concat { .. }) && !inputs.is_empty();
    if inputs.len() != want && !concat_ok {
        return Err(Error::dim(
            kind.name(),
            format!("expected {want} inputs, got {}", inputs.len()),
        ));
    }
    let x = inputs[0];
    match kind {
        OpKind::MatMul => x.matmul(inputs[1]),
        OpKind::Add => x.add(inputs[1]),
        OpKind::Mul => x.mul(inputs[1]),
        OpKind::Concat { axis } => concat(inputs, *axis),
        OpKind::Slice { axis, start, len } => x.slice(*axis, *start, *len, 1),
        OpKind::Embedding { ids } => embedding(x, ids),
        OpKind::Tanh => x.tanh(),
        OpKind::Sigmoid => x.sigmoid(),
        OpKind::Relu => x.relu(),
        OpKind::Softmax => softmax(x),
        OpKind::LogSoftmax => log_softmax(x),
        OpKind::LayerNorm { eps } => layer_norm(x, inputs[1], inputs[2], *eps),
        OpKind::Conv1d { stride } => conv1d(x, inputs[1], inputs[2], *stride),
        OpKind::Attention { causal, mask } => {
            scaled_dot_product_attention(x, inputs[1], inputs[2], mask.as_ref(), *causal)
        }
        OpKind::CrossEntropy { targets } => {
            let w = vec![1.0; targets.len()];
            cross_entropy(x, targets, &w)
        }
        OpKind::Mean => x.mean(),
        OpKind::Sum => x.sum(),
    }
}

/// Sinusoidal position table `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 * rate;
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, width], data)
}
