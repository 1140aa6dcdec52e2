//! Dense row-major `f64` tensors and the raw kernels behind every tape op.
//!
//! Tensors are immutable once built; the backing buffer is reference-counted
//! so clones are cheap and values can be shared across threads.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    /// Builds a tensor whose shape/length agreement is guaranteed by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(v: Vec<f64>) -> Self {
        let n = v.len();
        Self::from_parts(vec![n], v)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn eye(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        // x * 0 is NaN exactly when x is infinite or NaN; eight lanes keep
        // the reduction vectorizable.
        let mut acc = [0.0f64; 8];
        let chunks = self.data.chunks_exact(8);
        let rest = chunks.remainder();
        for c in chunks {
            for k in 0..8 {
                acc[k] += c[k] * 0.0;
            }
        }
        let tail: f64 = rest.iter().map(|x| x * 0.0).sum();
        (acc.iter().sum::<f64>() + tail).is_finite()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn argmax_last(&self) -> Vec<usize> {
        let n = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Raw kernels. Shape validation happens here so tape ops can report the
/// failing op by name.
pub(crate) mod kernels {
    use super::*;

    pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
            };
        }
        Ok(out)
    }

    /// Strides of `src` viewed inside `out` (zero along broadcast axes).
    fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
        let s = strides(src);
        let off = out.len() - src.len();
        (0..out.len())
            .map(|i| {
                if i < off || src[i - off] == 1 {
                    0
                } else {
                    s[i - off]
                }
            })
            .collect()
    }

    pub fn binary(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if a.shape == b.shape {
            return a.zip_map(b, f);
        }
        let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
        let n = numel(&out_shape);
        // Fast path: b repeats along leading axes of a (bias add, row scale).
        if out_shape == a.shape && a.shape.ends_with(&b.shape) {
            let m = b.numel();
            let data = a
                .data
                .chunks(m)
                .flat_map(|row| row.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)))
                .collect();
            return Ok(Tensor::from_parts(out_shape, data));
        }
        let sa = broadcast_strides(&a.shape, &out_shape);
        let sb = broadcast_strides(&b.shape, &out_shape);
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(a.data[ia], b.data[ib]));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                ia -= sa[ax] * out_shape[ax];
                ib -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Checks that `target` can be broadcast up to `shape`.
    pub fn check_reducible(op: &'static str, shape: &[usize], target: &[usize]) -> Result<()> {
        if target.len() > shape.len() {
            return Err(Error::dim(op, format!("{shape:?} cannot reduce to {target:?}")));
        }
        let off = shape.len() - target.len();
        for (i, &t) in target.iter().enumerate() {
            if t != 1 && t != shape[i + off] {
                return Err(Error::dim(op, format!("{shape:?} cannot reduce to {target:?}")));
            }
        }
        Ok(())
    }

    /// Sums `x` down to `target` (the adjoint of broadcasting).
    pub fn sum_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
        check_reducible("sum_to", &x.shape, target)?;
        if x.shape == target {
            return Ok(x.clone());
        }
        let mut out = vec![0.0; numel(target)];
        if target.iter().all(|&d| d == 1) {
            out[0] = x.data.iter().sum();
            return Ok(Tensor::from_parts(target.to_vec(), out));
        }
        // Reduce a trailing axis to 1 (softmax / layer-norm denominators).
        if x.shape.len() == target.len()
            && target[..target.len() - 1] == x.shape[..x.shape.len() - 1]
            && *target.last().unwrap() == 1
        {
            let n = *x.shape.last().unwrap();
            for (o, row) in out.iter_mut().zip(x.data.chunks(n)) {
                *o = row.iter().sum();
            }
            return Ok(Tensor::from_parts(target.to_vec(), out));
        }
        // Reduce leading axes (bias gradients).
        if x.shape.ends_with(target) {
            let m = numel(target);
            for row in x.data.chunks(m) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            return Ok(Tensor::from_parts(target.to_vec(), out));
        }
        let st = broadcast_strides(target, &x.shape);
        let rank = x.shape.len();
        let mut idx = vec![0usize; rank];
        let mut it = 0usize;
        for &v in x.data.iter() {
            out[it] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                it += st[ax];
                if idx[ax] < x.shape[ax] {
                    break;
                }
                it -= st[ax] * x.shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(target.to_vec(), out))
    }

    pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        check_reducible("broadcast_to", shape, &x.shape)?;
        if x.shape == shape {
            return Ok(x.clone());
        }
        binary("broadcast_to", &Tensor::zeros(shape), x, |_, v| v)
    }

    /// `[.., m, k] x [.., k, n]` with identical leading (batch) dims.
    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
            return Err(Error::dim(
                "matmul",
                format!("incompatible operands {:?} x {:?}", a.shape, b.shape),
            ));
        }
        let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", a.shape, b.shape),
            ));
        }
        let batch = numel(&a.shape[..ra - 2]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let pa = &a.data[bi * m * k..(bi + 1) * m * k];
            let pb = &b.data[bi * k * n..(bi + 1) * k * n];
            let pc = &mut out[bi * m * n..(bi + 1) * m * n];
            // SAFETY: slices are exactly m*k, k*n and m*n long with row-major strides.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    pa.as_ptr(),
                    k as isize,
                    1,
                    pb.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    pc.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = a.shape[..ra - 2].to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn transpose(x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        permute(x, &axes)
    }

    pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let r = x.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", format!("bad axes {axes:?} for rank {r}")));
        }
        let in_strides = strides(&x.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = x.numel();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..n {
            data.push(x.data[src]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::dim("concat", format!("axis {axis} >= rank {r}")));
        }
        for p in parts {
            if p.rank() != r
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape, p.shape),
                ));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Selects `len` indices `start, start+step, ...` along `axis`.
    pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize, step: usize) -> Result<Tensor> {
        let r = x.rank();
        if axis >= r || len == 0 || step == 0 || start + (len - 1) * step >= x.shape[axis] {
            return Err(Error::dim(
                "slice",
                format!(
                    "axis {axis} start {start} len {len} step {step} out of range for {:?}",
                    x.shape
                ),
            ));
        }
        let outer = numel(&x.shape[..axis]);
        let inner = numel(&x.shape[axis + 1..]);
        let full = x.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in 0..len {
                let off = (o * full + start + j * step) * inner;
                data.extend_from_slice(&x.data[off..off + inner]);
            }
        }
        let mut shape = x.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Adjoint of [`slice`]: scatters `x` into zeros of extent `full` along `axis`.
    pub fn unslice(x: &Tensor, axis: usize, full: usize, start: usize, step: usize) -> Result<Tensor> {
        let r = x.rank();
        if axis >= r || step == 0 || start + (x.shape[axis] - 1) * step >= full {
            return Err(Error::dim(
                "unslice",
                format!("axis {axis} full {full} start {start} step {step} for {:?}", x.shape),
            ));
        }
        let outer = numel(&x.shape[..axis]);
        let inner = numel(&x.shape[axis + 1..]);
        let len = x.shape[axis];
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            for j in 0..len {
                let dst = (o * full + start + j * step) * inner;
                let src = (o * len + j) * inner;
                data[dst..dst + inner].copy_from_slice(&x.data[src..src + inner]);
            }
        }
        let mut shape = x.shape.clone();
        shape[axis] = full;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn max_last_keepdim(x: &Tensor) -> Tensor {
        let n = *x.shape.last().unwrap_or(&1);
        let data: Vec<f64> = x
            .data
            .chunks(n)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut shape = x.shape.clone();
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        Tensor::from_parts(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::kernels::*;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let a = t(&[2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2, 1], &[1., 1., 2., -1.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let y = binary("add", &x, &b, |p, q| p + q).unwrap();
        assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
        let col = t(&[2, 1], &[1., 2.]);
        let z = binary("mul", &x, &col, |p, q| p * q).unwrap();
        assert_eq!(z.data(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(sum_to(&x, &[3]).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_to(&x, &[2, 1]).unwrap().data(), &[6., 15.]);
        assert_eq!(sum_to(&x, &[1, 3]).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_to(&x, &[]).unwrap().data(), &[21.]);
        assert_eq!(broadcast_to(&col, &[2, 3]).unwrap().data(), &[1., 1., 1., 2., 2., 2.]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>());
        let p = permute(&x, &[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 2, 2]);
        assert_eq!(&p.data()[..4], &[0., 1., 6., 7.]);
        assert_eq!(permute(&p, &[1, 0, 2]).unwrap(), x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn slice_unslice() {
        let x = t(&[1, 5], &[0., 1., 2., 3., 4.]);
        let s = slice(&x, 1, 1, 2, 2).unwrap();
        assert_eq!(s.data(), &[1., 3.]);
        assert_eq!(unslice(&s, 1, 5, 1, 2).unwrap().data(), &[0., 1., 0., 3., 0.]);
        assert!(slice(&x, 1, 1, 3, 2).is_err());
    }

    #[test]
    fn concat_axis1() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(concat(&[&a, &b], 1).unwrap().data(), &[1., 3., 4., 2., 5., 6.]);
        assert!(concat(&[&a, &b], 0).is_err());
    }
}
