//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every primitive records its output on the tape. [`Tape::grad`] walks the
//! tape backwards and builds each vector-Jacobian product out of the same
//! recorded primitives, so the gradients it returns are themselves tape
//! variables. Differentiating a gradient a second time (needed for the exact
//! meta-gradient through an inner SGD step) is just another call to `grad`.
//!
//! Tapes are single-use: build one per forward pass and drop it afterwards.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Pow(f64),
    MatMul,
    Transpose,
    Reshape,
    Permute(Vec<usize>),
    SumTo,
    BroadcastTo,
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
        step: usize,
    },
    Unslice {
        axis: usize,
        full: usize,
        start: usize,
        step: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Pow(_) => "pow",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::SumTo => "sum",
            Op::BroadcastTo => "broadcast",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Unslice { .. } => "unslice",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A differentiable leaf (a trainable parameter).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value, false)
    }

    fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>], value: Tensor) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: op.name().to_string(),
            });
        }
        let nodes = self.nodes.borrow();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        Ok(self.push(op, inputs.iter().map(|v| v.id).collect(), value, requires_grad))
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// The returned variables live on this tape and are differentiable.
    /// Variables that `root` does not depend on get a zero constant.
    pub fn grad<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let root_value = root.value();
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let n = root.id + 1;
        let mut live = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            live[root.id] = nodes[root.id].requires_grad;
            for i in (0..n).rev() {
                if live[i] {
                    for &j in &nodes[i].inputs {
                        if nodes[j].requires_grad {
                            live[j] = true;
                        }
                    }
                }
            }
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if live[root.id] {
            grads[root.id] = Some(self.constant(Tensor::full(root_value.shape(), 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].inputs.clone())
            };
            if op == Op::Leaf {
                continue;
            }
            let out = Var { tape: self, id: i };
            let ins: Vec<Var<'t>> = inputs.iter().map(|&id| Var { tape: self, id }).collect();
            let need: Vec<bool> = inputs.iter().map(|&id| live[id]).collect();
            let contributions = vjp(&op, &ins, out, g, &need)?;
            for (k, c) in contributions.into_iter().enumerate() {
                let Some(c) = c else { continue };
                let j = inputs[k];
                grads[j] = Some(match grads[j] {
                    Some(prev) => prev.add(c)?,
                    None => c,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match w.id < n { true => grads[w.id], false => None }
                .unwrap_or_else(|| self.constant(Tensor::zeros(w.value().shape()))))
            .collect())
    }

    /// Recomputes every non-leaf node from its recorded inputs and checks it
    /// matches the stored value bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().all(|node| {
            if node.op == Op::Leaf {
                return true;
            }
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
            match eval(&node.op, &ins, node.value.shape()) {
                Ok(v) => v == node.value,
                Err(_) => false,
            }
        })
    }

    /// True when every node's inputs were recorded before it.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs.iter().all(|&j| j < i))
    }
}

/// Forward evaluation of a primitive. `out_shape` carries the target shape
/// for shape-changing ops.
fn eval(op: &Op, ins: &[&Tensor], out_shape: &[usize]) -> Result<Tensor> {
    let un = |f: fn(f64) -> f64| ins[0].map(f);
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Add => kernels::binary("add", ins[0], ins[1], |a, b| a + b)?,
        Op::Sub => kernels::binary("sub", ins[0], ins[1], |a, b| a - b)?,
        Op::Mul => kernels::binary("mul", ins[0], ins[1], |a, b| a * b)?,
        Op::Div => kernels::binary("div", ins[0], ins[1], |a, b| a / b)?,
        Op::Neg => un(|a| -a),
        Op::Scale(c) => {
            let c = *c;
            ins[0].map(move |a| a * c)
        }
        Op::Exp => un(f64::exp),
        Op::Log => un(f64::ln),
        Op::Tanh => un(f64::tanh),
        Op::Sigmoid => un(|a| 1.0 / (1.0 + (-a).exp())),
        Op::Relu => un(|a| a.max(0.0)),
        Op::Pow(p) => {
            let p = *p;
            ins[0].map(move |a| a.powf(p))
        }
        Op::MatMul => kernels::matmul(ins[0], ins[1])?,
        Op::Transpose => kernels::transpose(ins[0])?,
        Op::Reshape => ins[0].reshape(out_shape)?,
        Op::Permute(axes) => kernels::permute(ins[0], axes)?,
        Op::SumTo => kernels::sum_to(ins[0], out_shape)?,
        Op::BroadcastTo => kernels::broadcast_to(ins[0], out_shape)?,
        Op::Concat(axis) => kernels::concat(ins, *axis)?,
        Op::Slice {
            axis,
            start,
            len,
            step,
        } => kernels::slice(ins[0], *axis, *start, *len, *step)?,
        Op::Unslice {
            axis,
            full,
            start,
            step,
        } => kernels::unslice(ins[0], *axis, *full, *start, *step)?,
    })
}

/// Vector-Jacobian products, expressed with recorded primitives so they can
/// be differentiated again.
fn vjp<'t>(
    op: &Op,
    ins: &[Var<'t>],
    out: Var<'t>,
    g: Var<'t>,
    need: &[bool],
) -> Result<Vec<Option<Var<'t>>>> {
    let tape = out.tape;
    let shape_of = |v: Var<'t>| v.value().shape().to_vec();
    let when = |k: usize, f: &dyn Fn() -> Result<Var<'t>>| -> Result<Option<Var<'t>>> {
        if need[k] {
            f().map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            when(0, &|| g.sum_to(&shape_of(ins[0])))?,
            when(1, &|| g.sum_to(&shape_of(ins[1])))?,
        ],
        Op::Sub => vec![
            when(0, &|| g.sum_to(&shape_of(ins[0])))?,
            when(1, &|| g.neg()?.sum_to(&shape_of(ins[1])))?,
        ],
        Op::Mul => vec![
            when(0, &|| g.mul(ins[1])?.sum_to(&shape_of(ins[0])))?,
            when(1, &|| g.mul(ins[0])?.sum_to(&shape_of(ins[1])))?,
        ],
        Op::Div => vec![
            when(0, &|| g.div(ins[1])?.sum_to(&shape_of(ins[0])))?,
            when(1, &|| g.mul(out)?.div(ins[1])?.neg()?.sum_to(&shape_of(ins[1])))?,
        ],
        Op::Neg => vec![when(0, &|| g.neg())?],
        Op::Scale(c) => vec![when(0, &|| g.scale(*c))?],
        Op::Exp => vec![when(0, &|| g.mul(out))?],
        Op::Log => vec![when(0, &|| g.div(ins[0]))?],
        Op::Tanh => vec![when(0, &|| g.sub(g.mul(out)?.mul(out)?))?],
        Op::Sigmoid => vec![when(0, &|| {
            let gs = g.mul(out)?;
            gs.sub(gs.mul(out)?)
        })?],
        Op::Relu => vec![when(0, &|| {
            let mask = tape.constant(ins[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            g.mul(mask)
        })?],
        Op::Pow(p) => vec![when(0, &|| g.mul(ins[0].powf(p - 1.0)?)?.scale(*p))?],
        Op::MatMul => vec![
            when(0, &|| g.matmul(ins[1].transpose()?))?,
            when(1, &|| ins[0].transpose()?.matmul(g))?,
        ],
        Op::Transpose => vec![when(0, &|| g.transpose())?],
        Op::Reshape => vec![when(0, &|| g.reshape(&shape_of(ins[0])))?],
        Op::Permute(axes) => vec![when(0, &|| {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            g.permute(&inv)
        })?],
        Op::SumTo => vec![when(0, &|| g.broadcast_to(&shape_of(ins[0])))?],
        Op::BroadcastTo => vec![when(0, &|| g.sum_to(&shape_of(ins[0])))?],
        Op::Concat(axis) => {
            let mut start = 0;
            let mut res = Vec::with_capacity(ins.len());
            for (k, v) in ins.iter().enumerate() {
                let len = v.value().shape()[*axis];
                let s = start;
                res.push(when(k, &|| g.slice(*axis, s, len, 1))?);
                start += len;
            }
            res
        }
        Op::Slice {
            axis, start, step, ..
        } => {
            let full = ins[0].value().shape()[*axis];
            vec![when(0, &|| g.unslice(*axis, full, *start, *step))?]
        }
        Op::Unslice {
            axis, start, step, ..
        } => {
            let len = ins[0].value().shape()[*axis];
            vec![when(0, &|| g.slice(*axis, *start, len, *step))?]
        }
    })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes"
        );
    }

    fn apply(&self, op: Op, others: &[Var<'t>], out_shape: &[usize]) -> Result<Var<'t>> {
        let mut inputs = Vec::with_capacity(1 + others.len());
        inputs.push(*self);
        for o in others {
            self.check_same_tape(o);
            inputs.push(*o);
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            eval(&op, &ins, out_shape)?
        };
        self.tape.record(op, &inputs, value)
    }

    pub fn add(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.apply(Op::Add, &[o], &[])
    }

    pub fn sub(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.apply(Op::Sub, &[o], &[])
    }

    pub fn mul(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.apply(Op::Mul, &[o], &[])
    }

    pub fn div(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.apply(Op::Div, &[o], &[])
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.apply(Op::Neg, &[], &[])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.apply(Op::Scale(c), &[], &[])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.add(self.tape.constant(Tensor::scalar(c)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.apply(Op::Exp, &[], &[])
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.apply(Op::Log, &[], &[])
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.apply(Op::Tanh, &[], &[])
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.apply(Op::Sigmoid, &[], &[])
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.apply(Op::Relu, &[], &[])
    }

    pub fn powf(&self, p: f64) -> Result<Var<'t>> {
        self.apply(Op::Pow(p), &[], &[])
    }

    pub fn matmul(&self, o: Var<'t>) -> Result<Var<'t>> {
        self.apply(Op::MatMul, &[o], &[])
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        self.apply(Op::Transpose, &[], &[])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.apply(Op::Reshape, &[], shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.apply(Op::Permute(axes.to_vec()), &[], &[])
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(*self);
        }
        self.apply(Op::SumTo, &[], shape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        if self.shape() == shape {
            return Ok(*self);
        }
        self.apply(Op::BroadcastTo, &[], shape)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize, step: usize) -> Result<Var<'t>> {
        self.apply(
            Op::Slice {
                axis,
                start,
                len,
                step,
            },
            &[],
            &[],
        )
    }

    pub fn unslice(&self, axis: usize, full: usize, start: usize, step: usize) -> Result<Var<'t>> {
        self.apply(
            Op::Unslice {
                axis,
                full,
                start,
                step,
            },
            &[],
            &[],
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last_keepdim(&self) -> Result<Var<'t>> {
        let mut shape = self.shape();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => return Ok(*self),
        }
        self.sum_to(&shape)
    }

    /// A non-differentiable copy of this value.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

/// Concatenates along `axis`.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    first.apply(Op::Concat(axis), rest, &[])
}
