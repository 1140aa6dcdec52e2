//! Named parameter collections, gradient maps, optimizers and the binary
//! checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Iteration follows insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
    version: u64,
}

pub type GradMap = IndexMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                self.version += 1;
                Ok(())
            }
            Some(slot) => Err(Error::Structure(format!(
                "{name}: shape {:?} vs {:?}",
                slot.shape(),
                value.shape()
            ))),
            None => Err(Error::Structure(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Restores a persisted version counter; it may only move forward.
    pub fn set_version(&mut self, version: u64) {
        self.version = self.version.max(version);
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Concatenation of all values in iteration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds a set with this structure from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.numel() {
            return Err(Error::Structure(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamSet {
            entries: IndexMap::with_capacity(self.entries.len()),
            version: self.version + 1,
        };
        let mut off = 0;
        for (name, t) in &self.entries {
            let n = t.numel();
            out.entries.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec())?,
            );
            off += n;
        }
        Ok(out)
    }

    /// Checks that `grads` has exactly our names and shapes.
    pub fn check_compatible(&self, grads: &GradMap) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Structure(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.entries.len()
            )));
        }
        for (name, t) in &self.entries {
            match grads.get(name) {
                Some(g) if g.shape() == t.shape() => {}
                Some(g) => {
                    return Err(Error::Structure(format!(
                        "{name}: gradient shape {:?} vs parameter {:?}",
                        g.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Structure(format!("missing gradient for {name}"))),
            }
        }
        Ok(())
    }

    /// Records every entry as a differentiable leaf on `tape`.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> VarMap<'t> {
        VarMap {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Records every entry as a constant on `tape`.
    pub fn to_constants<'t>(&self, tape: &'t Tape) -> VarMap<'t> {
        VarMap {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> GradMap {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Parameters as tape variables, keyed like the [`ParamSet`] they came from.
#[derive(Clone)]
pub struct VarMap<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> VarMap<'t> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structure(format!("model expects parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }
}

/// Gradient of the scalar `loss` for every entry of `params`; entries the
/// loss does not touch get zero tensors.
pub fn backward<'t>(tape: &'t Tape, loss: Var<'t>, params: &VarMap<'t>) -> Result<GradMap> {
    let grads = tape.grad(loss, &params.vars())?;
    Ok(params
        .names()
        .into_iter()
        .zip(grads)
        .map(|(n, g)| (n, g.value()))
        .collect())
}

pub fn grad_norm(grads: &GradMap) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Scales `grads` in place so the global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

/// `theta - lr * grads` as a new set; `params` is left untouched.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
    }
    params.check_compatible(grads)?;
    let mut out = ParamSet {
        entries: IndexMap::with_capacity(params.len()),
        version: params.version + 1,
    };
    for (name, t) in &params.entries {
        let g = &grads[name];
        out.entries
            .insert(name.clone(), t.zip_map(g, |p, d| p - lr * d)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: GradMap,
    pub v: GradMap,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Pure: returns new params and state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamSet,
    grads: &GradMap,
    lr: f64,
) -> Result<(ParamSet, AdamState)> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let step = state.step + 1;
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let mut out = ParamSet {
        entries: IndexMap::with_capacity(params.len()),
        version: params.version + 1,
    };
    let mut m_new = GradMap::with_capacity(params.len());
    let mut v_new = GradMap::with_capacity(params.len());
    for (name, p) in &params.entries {
        let g = grads[name].data();
        let m0 = state.m[name].data();
        let v0 = state.v[name].data();
        let n = p.numel();
        let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let m = beta1 * m0[i] + (1.0 - beta1) * g[i];
            let v = beta2 * v0[i] + (1.0 - beta2) * g[i] * g[i];
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            pd.push(p.data()[i] - update);
            md.push(m);
            vd.push(v);
        }
        let shape = p.shape().to_vec();
        out.entries.insert(name.clone(), Tensor::new(shape.clone(), pd)?);
        m_new.insert(name.clone(), Tensor::new(shape.clone(), md)?);
        v_new.insert(name.clone(), Tensor::new(shape, vd)?);
    }
    Ok((
        out,
        AdamState {
            config: state.config.clone(),
            step,
            m: m_new,
            v: v_new,
        },
    ))
}

/// Glorot-uniform matrix `[fan_in, fan_out]` (last two dims for rank 3).
pub fn xavier_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let r = shape.len();
    let (fan_in, fan_out) = match r {
        0 | 1 => (1, shape.first().copied().unwrap_or(1)),
        _ => {
            let receptive: usize = shape[..r - 2].iter().product();
            (shape[r - 2] * receptive, shape[r - 1] * receptive)
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape is non-empty")
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MTLPARAM";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `params` to the checkpoint layout: magic, version, entry count,
/// then per entry name length, name bytes, rank, dims and little-endian f64
/// values in row-major order.
pub fn write_checkpoint(params: &ParamSet, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corruption(format!("truncated checkpoint at {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut magic, "header")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Corruption("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corruption(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r, "entry count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Corruption(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        read_exact_or_corrupt(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Corruption("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 16 {
            return Err(Error::Corruption(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n < 1 << 32)
            .ok_or_else(|| Error::Corruption(format!("implausible shape {shape:?}")))?;
        let mut raw = vec![0u8; n * 8];
        read_exact_or_corrupt(&mut r, &mut raw, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corruption(e.to_string()))?;
        params
            .insert(name, t)
            .map_err(|e| Error::Corruption(e.to_string()))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corruption("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint_bytes(params))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    read_checkpoint(std::io::Cursor::new(std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[(&str, Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, v) in values {
            p.insert(*n, Tensor::vector(v.clone())).unwrap();
        }
        p
    }

    fn grads(values: &[(&str, Vec<f64>)]) -> GradMap {
        values
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.clone())))
            .collect()
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let p = set(&[("w", vec![1.0, 2.0])]);
        let out = sgd_step(&p, &grads(&[("w", vec![2.0, 4.0])]), 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_zero_lr_or_zero_grad_is_identity() {
        let p = set(&[("w", vec![1.5, -2.0])]);
        let g = grads(&[("w", vec![3.0, 1.0])]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap().flatten(), p.flatten());
        let z = p.zeros_like();
        assert_eq!(sgd_step(&p, &z, 0.1).unwrap().flatten(), p.flatten());
    }

    #[test]
    fn sgd_rejects_incompatible() {
        let p = set(&[("w", vec![1.0, 2.0])]);
        assert!(matches!(
            sgd_step(&p, &grads(&[("w", vec![1.0])]), 0.1),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            sgd_step(&p, &grads(&[("v", vec![1.0, 1.0])]), 0.1),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let p = set(&[("w", vec![0.0])]);
        let s = AdamState::new(&p, AdamConfig::default());
        let (out, s1) = adam_step(&s, &p, &grads(&[("w", vec![1.0])]), 0.1).unwrap();
        assert!((out.get("w").unwrap().data()[0] + 0.1).abs() < 1e-7);
        assert_eq!(s1.step, 1);
        let (again, s1b) = adam_step(&s, &p, &grads(&[("w", vec![1.0])]), 0.1).unwrap();
        assert_eq!(again, out);
        assert_eq!(s1b, s1);
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let p = set(&[("w", vec![0.3, -0.2])]);
        let s = AdamState::new(&p, AdamConfig::default());
        let (out, _) = adam_step(&s, &p, &p.zeros_like(), 0.1).unwrap();
        assert_eq!(out.flatten(), p.flatten());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = grads(&[("a", vec![3.0]), ("b", vec![4.0])]);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_checkpoint_is_corruption() {
        let p = set(&[("w", vec![1.0, 2.0])]);
        let bytes = checkpoint_bytes(&p);
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(
                read_checkpoint(&bytes[..cut]),
                Err(Error::Corruption(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_bit_exact(
            a in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20),
            b in proptest::collection::vec(-1e300f64..1e300, 1..8),
        ) {
            let mut p = ParamSet::new();
            p.insert("layer.0/w", Tensor::vector(a.clone())).unwrap();
            p.insert("b", Tensor::new(vec![1, b.len()], b.clone()).unwrap()).unwrap();
            let back = read_checkpoint(&checkpoint_bytes(&p)[..]).unwrap();
            prop_assert_eq!(back.names().collect::<Vec<_>>(), p.names().collect::<Vec<_>>());
            let bits = |s: &ParamSet| s.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&p));
        }

        #[test]
        fn sgd_never_mutates_inputs(v in proptest::collection::vec(-10.0f64..10.0, 1..10), lr in 0.0f64..2.0) {
            let p = set(&[("w", v.clone())]);
            let g = grads(&[("w", v.iter().map(|x| x * 0.5).collect())]);
            let (p0, g0) = (p.clone(), g.clone());
            let _ = sgd_step(&p, &g, lr).unwrap();
            prop_assert_eq!(p, p0);
            prop_assert_eq!(g, g0);
        }
    }
}
