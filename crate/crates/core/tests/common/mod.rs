//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mtl_core::autodiff::nn::{cross_entropy, linear};
use mtl_core::autodiff::{forward_op, grad_check, OpKind, Tape, Var};
use mtl_core::decode::StepScorer;
use mtl_core::models::{LmConfig, LstmLm, SeqBatch, Split, Transducer, TransducerConfig};
use mtl_core::params::GradMap;
use mtl_core::rng::{derive_seed, stream};
use mtl_core::train::{inner_adapt, loss_fn, MetaHyper, MetaMode};
use mtl_core::vocab::{TokenBlock, Vocab, BEGIN, END};
use mtl_core::{ParamSet, Result, Tensor, VarMap};
use rand::{Rng, SeedableRng};

pub const SEEDS: u64 = 20;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks (relu) stay out of reach of the
/// finite-difference probe.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    random(shape, rng).map(|v| v.signum() * (0.05 + v.abs()))
}

pub struct Case {
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
}

pub fn case(name: &str, rng: &mut impl Rng) -> Case {
    let r = |s: &[usize], rng: &mut _| random(s, rng);
    let (kind, inputs) = match name {
        "matmul" => (OpKind::MatMul, vec![r(&[3, 4], rng), r(&[4, 2], rng)]),
        "add" => (OpKind::Add, vec![r(&[3, 4], rng), r(&[4], rng)]),
        "mul" => (OpKind::Mul, vec![r(&[3, 4], rng), r(&[3, 4], rng)]),
        "concat" => (OpKind::Concat { axis: 1 }, vec![r(&[2, 3], rng), r(&[2, 2], rng)]),
        "slice" => (OpKind::Slice { axis: 1, start: 1, len: 2 }, vec![r(&[3, 4], rng)]),
        "embedding" => (OpKind::Embedding { ids: vec![0, 2, 2, 1] }, vec![r(&[3, 4], rng)]),
        "tanh" => (OpKind::Tanh, vec![r(&[3, 4], rng)]),
        "sigmoid" => (OpKind::Sigmoid, vec![r(&[3, 4], rng)]),
        "relu" => (OpKind::Relu, vec![away_from_zero(&[3, 4], rng)]),
        "softmax" => (OpKind::Softmax, vec![r(&[3, 5], rng)]),
        "log_softmax" => (OpKind::LogSoftmax, vec![r(&[3, 5], rng)]),
        "layer_norm" => (OpKind::LayerNorm { eps: 1e-5 }, vec![r(&[3, 5], rng), r(&[5], rng), r(&[5], rng)]),
        "conv1d" => (OpKind::Conv1d { stride: 2 }, vec![r(&[2, 7, 3], rng), r(&[3, 3, 4], rng), r(&[4], rng)]),
        "attention" => (OpKind::Attention { causal: false, mask: None }, vec![r(&[2, 3, 4], rng), r(&[2, 4, 4], rng), r(&[2, 4, 5], rng)]),
        "attention_causal" => {
            let mut m = vec![0.0; 2 * 3 * 3];
            for (i, v) in m.iter_mut().enumerate() {
                let (q, k) = ((i / 3) % 3, i % 3);
                *v = if q == k || rng.random_bool(0.6) { 1.0 } else { 0.0 };
            }
            let mask = Tensor::new(vec![2, 3, 3], m).unwrap();
            (
                OpKind::Attention { causal: true, mask: Some(mask) },
                vec![r(&[2, 3, 4], rng), r(&[2, 3, 4], rng), r(&[2, 3, 5], rng)],
            )
        }
        "cross_entropy" => {
            let targets = (0..4).map(|_| rng.random_range(0..5)).collect();
            (OpKind::CrossEntropy { targets }, vec![r(&[4, 5], rng)])
        }
        "mean" => (OpKind::Mean, vec![r(&[3, 4], rng)]),
        "sum" => (OpKind::Sum, vec![r(&[3, 4], rng)]),
        other => panic!("unknown op {other}"),
    };
    Case { kind, inputs }
}

pub const OPS: [&str; 18] = [
    "matmul", "add", "mul", "concat", "slice", "embedding", "tanh", "sigmoid", "relu", "softmax",
    "log_softmax", "layer_norm", "conv1d", "attention", "attention_causal", "cross_entropy", "mean", "sum",
];

/// Contracts the op output with a fixed random tensor so every output
/// coordinate contributes to the checked gradient.
pub fn check_op(name: &str, seed: u64) -> f64 {
    let mut rng = stream(seed, name);
    let c = case(name, &mut rng);
    let mut params = ParamSet::new();
    for (i, t) in c.inputs.iter().enumerate() {
        params.insert(format!("in{i}"), t.clone()).unwrap();
    }
    let out_shape = {
        let tape = Tape::new();
        let vars = params.to_constants(&tape);
        forward_op(&c.kind, &vars.vars()).unwrap().shape()
    };
    let weights = random(&out_shape, &mut rng);
    grad_check(
        |tape, p| {
            let y = forward_op(&c.kind, &p.vars())?;
            y.mul(tape.constant(weights.clone()))?.sum()
        },
        &params,
        EPS,
    )
    .unwrap()
}

pub const V: usize = 10;

pub fn small_transducer() -> Transducer {
    Transducer::new(TransducerConfig {
        enc_layers: 1,
        dec_layers: 1,
        model_width: 8,
        key_width: 4,
        value_width: 4,
        head_count: 2,
        ffn_width: 12,
        vocab_size: V,
        feat_dim: 3,
        conv_kernel: 3,
        conv_stride: 2,
        max_len: 12,
    })
    .unwrap()
}

pub fn small_lm() -> LstmLm {
    LstmLm::new(LmConfig {
        layers: 2,
        hidden: 6,
        vocab_size: V,
    })
    .unwrap()
}

/// `BEGIN content END` with `len` content tokens.
pub fn sequence(len: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut s = vec![BEGIN];
    s.extend((0..len).map(|_| rng.random_range(4..V as u32)));
    s.push(END);
    s
}

pub fn frames(seq_len: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    let n = 2 * seq_len + 3;
    Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub struct Example {
    pub seqs: Vec<Vec<u32>>,
    pub feats: Vec<Tensor>,
}

pub fn examples(seed: u64, lens: &[usize]) -> Example {
    let mut rng = stream(seed, "examples");
    let seqs: Vec<Vec<u32>> = lens.iter().map(|&l| sequence(l, &mut rng)).collect();
    let feats = seqs.iter().map(|s| frames(s.len(), 3, &mut rng)).collect();
    Example { seqs, feats }
}

pub fn batch(ex: &Example, with_features: bool) -> SeqBatch {
    SeqBatch::new(&ex.seqs, with_features.then_some(ex.feats.as_slice()), Split::Train).unwrap()
}

pub fn zero_output(p: &mut ParamSet, w: &str, b: &str) {
    let (ws, bs) = (p.get(w).unwrap().shape().to_vec(), p.get(b).unwrap().shape().to_vec());
    p.set(w, Tensor::zeros(&ws)).unwrap();
    p.set(b, Tensor::zeros(&bs)).unwrap();
}

pub fn vocab(v: u32) -> Vocab {
    Vocab::new(vec![TokenBlock {
        name: "en".into(),
        ids: 4..v,
    }])
}

/// Next-token log-probabilities drawn from a generator seeded by the prefix,
/// so the same prefix always gets the same distribution.
pub struct RandomScorer {
    pub v: usize,
    pub seed: u64,
    pub calls: usize,
}

impl RandomScorer {
    pub fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let key: Vec<String> = prefix.iter().map(u32::to_string).collect();
        let mut rng = mtl_core::rng::Rng::seed_from_u64(derive_seed(self.seed, &key.join(",")));
        let logits: Vec<f64> = (0..self.v).map(|_| 3.0 * rng.random_range(-1.0..1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepScorer for RandomScorer {
    fn step(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        self.calls += 1;
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

pub fn decode_transducer(v: usize) -> Transducer {
    Transducer::new(TransducerConfig {
        enc_layers: 1,
        dec_layers: 1,
        model_width: 8,
        key_width: 4,
        value_width: 4,
        head_count: 2,
        ffn_width: 12,
        vocab_size: v,
        feat_dim: 3,
        conv_kernel: 3,
        conv_stride: 2,
        max_len: 10,
    })
    .unwrap()
}

pub fn features(seed: u64, frames: usize) -> Tensor {
    let mut rng = stream(seed, "feats");
    Tensor::new(vec![frames, 3], (0..3 * frames).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Every id except padding and `BEGIN`.
pub fn candidates(v: usize) -> Vec<u32> {
    (2..v as u32).collect()
}

pub fn greedy(t: &Transducer, p: &ParamSet, f: &Tensor, cands: &[u32], max_len: usize) -> Vec<u32> {
    let mut seq = vec![BEGIN];
    while seq.len() <= max_len && seq.last() != Some(&END) {
        let lp = t.step_decode(p, f, &seq).unwrap();
        let best = cands
            .iter()
            .copied()
            .fold(None::<u32>, |b, c| match b {
                Some(b) if lp[b as usize] >= lp[c as usize] => Some(b),
                _ => Some(c),
            })
            .unwrap();
        seq.push(best);
    }
    seq
}

/// All paths of at most `max_len` steps over `cands`, stopping at `END`.
pub fn enumerate(s: &RandomScorer, cands: &[u32], max_len: usize) -> Vec<(Vec<u32>, f64)> {
    let mut out = vec![];
    let mut frontier = vec![(vec![BEGIN], 0.0)];
    for _ in 0..max_len {
        let mut next = vec![];
        for (p, score) in frontier {
            let d = s.dist(&p);
            for &c in cands {
                let mut q = p.clone();
                q.push(c);
                let sc = score + d[c as usize];
                if c == END {
                    out.push((q, sc));
                } else {
                    next.push((q, sc));
                }
            }
        }
        frontier = next;
    }
    out.extend(frontier);
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// A softmax regression batch: inputs `[n, 3]` and class targets.
#[derive(Clone)]
pub struct Xy {
    pub x: Tensor,
    pub y: Vec<u32>,
}

pub fn xy(seed: u64, n: usize) -> Xy {
    let mut rng = stream(seed, "xy");
    Xy {
        x: Tensor::new(vec![n, 3], (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        y: (0..n).map(|_| rng.random_range(0..2)).collect(),
    }
}

/// Eight parameters: `w [3, 2]`, `b [2]`.
pub fn tiny_params(seed: u64) -> ParamSet {
    let mut rng = stream(seed, "tiny");
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
    p.insert("b", Tensor::vector(vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])).unwrap();
    p
}

pub fn tiny_loss<'t>(tape: &'t Tape, p: &VarMap<'t>, b: &Xy) -> Result<Var<'t>> {
    let logits = linear(tape.constant(b.x.clone()), p.get("w")?, Some(p.get("b")?))?;
    cross_entropy(logits.tanh()?.scale(3.0)?, &b.y, &vec![1.0; b.y.len()])
}

pub fn hyper(alpha: f64, mode: MetaMode) -> MetaHyper {
    MetaHyper {
        alpha,
        beta: 0.1,
        tasks_per_iter: 2,
        mode,
        inner_steps: 1,
    }
}

pub fn flat(g: &GradMap) -> Vec<f64> {
    g.values().flat_map(|t| t.data().to_vec()).collect()
}

/// `Σᵢ L_val(θ − α∇L_traᵢ(θ))`, evaluated directly.
pub fn meta_objective(p: &ParamSet, tra: &[(String, Xy)], val: &Xy, alpha: f64) -> f64 {
    let loss = loss_fn(tiny_loss);
    tra.iter()
        .map(|(name, b)| {
            let adapted = inner_adapt(p, &loss, b, alpha, 1, name).unwrap();
            let tape = Tape::new();
            tiny_loss(&tape, &adapted.to_constants(&tape), val).unwrap().value().item()
        })
        .sum()
}
