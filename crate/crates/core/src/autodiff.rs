//! Tape-based reverse-mode differentiation.
//!
//! Every backward rule is itself written in terms of recorded tape operations,
//! so a gradient can be kept on the tape (`create_graph = true`) and
//! differentiated again. The gradient penalty relies on this.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddConst(usize, T),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Conv(usize, usize, ConvGeom),
    ConvT(usize, usize, ConvGeom),
    ConvKGrad(usize, usize, ConvGeom),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Powf(usize, T),
    Sum(usize),
    Expand(usize),
    ChannelSum(usize),
    ChannelBroadcast(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => vec![*a, *b],
            Conv(a, b, _) | ConvT(a, b, _) | ConvKGrad(a, b, _) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddConst(a, _) | Transpose(a) | Reshape(a) | Relu(a)
            | Tanh(a) | Sigmoid(a) | Exp(a) | Ln(a) | Sqrt(a) | Powf(a, _) | Sum(a)
            | Expand(a) | ChannelSum(a) | ChannelBroadcast(a) | Slice(a, _) => vec![*a],
            Concat(list) => list.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Parents always precede children.
///
/// A tape is confined to one thread; build a fresh tape per forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
    leaf_grads: RefCell<Option<HashMap<usize, Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

struct RecordingGuard<'a> {
    flag: &'a Cell<bool>,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.flag.set(self.prev);
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            recording: Cell::new(true),
            leaf_grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(x))
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        if !self.recording.get() {
            return self.push_raw(value, Op::Leaf, false);
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        if requires_grad {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Runs `f` without recording parents: results are constants.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let _guard = RecordingGuard {
            flag: &self.recording,
            prev: self.recording.replace(false),
        };
        f()
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    /// Scalars concatenate into a vector.
    pub fn concat(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "empty input list".into(),
            });
        }
        let values: Vec<_> = parts.iter().map(|p| self.value(p.id)).collect();
        let trailing = |t: &Tensor<T>| -> Vec<usize> {
            if t.is_scalar() {
                Vec::new()
            } else {
                t.shape()[1..].to_vec()
            }
        };
        let tail = trailing(&values[0]);
        let mut lead = 0;
        let mut data = Vec::new();
        for v in &values {
            if trailing(v) != tail {
                return Err(mismatch("concat", values[0].shape(), v.shape()));
            }
            lead += if v.is_scalar() { 1 } else { v.shape()[0] };
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect())))
    }

    /// Gradients of scalar `y` with respect to each of `wrt`, as tape values.
    ///
    /// With `create_graph`, the returned gradients are themselves differentiable.
    pub fn grad<'t>(
        &'t self,
        y: Var<'t, T>,
        wrt: &[Var<'t, T>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t, T>>> {
        let y_val = self.value(y.id);
        if y_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss(y_val.shape().to_vec()));
        }
        let (ops, leads) = {
            let nodes = self.nodes.borrow();
            let mut leads = vec![false; y.id + 1];
            for w in wrt {
                if w.id <= y.id {
                    leads[w.id] = true;
                }
            }
            let mut ops = Vec::with_capacity(y.id + 1);
            for (i, node) in nodes.iter().enumerate().take(y.id + 1) {
                if node.requires_grad && node.op.parents().iter().any(|&p| leads[p]) {
                    leads[i] = true;
                }
                ops.push(node.op.clone());
            }
            (ops, leads)
        };

        let _guard = RecordingGuard {
            flag: &self.recording,
            prev: self.recording.replace(create_graph),
        };
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; y.id + 1];
        grads[y.id] = Some(self.constant(Tensor::full(y_val.shape(), T::one())));
        for i in (0..=y.id).rev() {
            let Some(g) = grads[i] else { continue };
            if !leads[i] || matches!(ops[i], Op::Leaf) {
                continue;
            }
            for (p, gp) in self.backward_rule(i, &ops[i], g)? {
                if !leads[p] {
                    continue;
                }
                grads[p] = Some(match grads[p] {
                    Some(acc) => acc.add(gp)?,
                    None => gp,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.value(w.id).shape()))),
            })
            .collect()
    }

    /// Populates the gradient of every trainable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.leaf_grads.borrow().is_some() {
            return Err(TensorError::DoubleBackward);
        }
        let leaves: Vec<Var<'_, T>> = {
            let nodes = self.nodes.borrow();
            (0..=loss.id)
                .filter(|&i| nodes[i].requires_grad && matches!(nodes[i].op, Op::Leaf))
                .map(|i| self.var(i))
                .collect()
        };
        let grads = self.grad(loss, &leaves, false)?;
        let map = leaves
            .iter()
            .zip(grads)
            .map(|(l, g)| (l.id, (*g.value()).clone()))
            .collect();
        *self.leaf_grads.borrow_mut() = Some(map);
        Ok(())
    }

    pub fn reset_grads(&self) {
        *self.leaf_grads.borrow_mut() = None;
    }

    fn unbroadcast<'t>(&'t self, g: Var<'t, T>, target: usize) -> Result<Var<'t, T>> {
        let target_scalar = self.value(target).is_scalar();
        if target_scalar && !g.value().is_scalar() {
            g.sum()
        } else {
            Ok(g)
        }
    }

    fn backward_rule<'t>(
        &'t self,
        out: usize,
        op: &Op<T>,
        g: Var<'t, T>,
    ) -> Result<Vec<(usize, Var<'t, T>)>> {
        use Op::*;
        let v = |id: usize| self.var(id);
        Ok(match op {
            Leaf => Vec::new(),
            Add(a, b) => vec![
                (*a, self.unbroadcast(g, *a)?),
                (*b, self.unbroadcast(g, *b)?),
            ],
            Sub(a, b) => vec![
                (*a, self.unbroadcast(g, *a)?),
                (*b, self.unbroadcast(g.neg()?, *b)?),
            ],
            Mul(a, b) => vec![
                (*a, self.unbroadcast(g.mul(v(*b))?, *a)?),
                (*b, self.unbroadcast(g.mul(v(*a))?, *b)?),
            ],
            Div(a, b) => {
                let ga = g.div(v(*b))?;
                let gb = g.mul(v(out))?.div(v(*b))?.neg()?;
                vec![
                    (*a, self.unbroadcast(ga, *a)?),
                    (*b, self.unbroadcast(gb, *b)?),
                ]
            }
            Neg(a) => vec![(*a, g.neg()?)],
            Scale(a, c) => vec![(*a, g.scale(*c)?)],
            AddConst(a, _) => vec![(*a, g)],
            Matmul(a, b) => vec![
                (*a, g.matmul(v(*b).t()?)?),
                (*b, v(*a).t()?.matmul(g)?),
            ],
            Transpose(a) => vec![(*a, g.t()?)],
            Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape())?)],
            Conv(x, k, geom) => vec![
                (*x, g.conv2d_transpose_geom(v(*k), *geom)?),
                (*k, v(*x).conv2d_kernel_grad(g, *geom)?),
            ],
            ConvT(y, k, geom) => vec![
                (*y, g.conv2d_geom(v(*k), *geom)?),
                (*k, g.conv2d_kernel_grad(v(*y), *geom)?),
            ],
            ConvKGrad(x, gy, geom) => vec![
                (*x, v(*gy).conv2d_transpose_geom(g, *geom)?),
                (*gy, v(*x).conv2d_geom(g, *geom)?),
            ],
            Relu(a) => {
                let mask = self.value(*a).map(|x| if x > T::zero() { T::one() } else { T::zero() });
                vec![(*a, g.mul(self.constant(mask))?)]
            }
            Tanh(a) => {
                let y = v(out);
                let d = y.mul(y)?.neg()?.add_scalar(T::one())?;
                vec![(*a, g.mul(d)?)]
            }
            Sigmoid(a) => {
                let y = v(out);
                let d = y.mul(y.neg()?.add_scalar(T::one())?)?;
                vec![(*a, g.mul(d)?)]
            }
            Exp(a) => vec![(*a, g.mul(v(out))?)],
            Ln(a) => vec![(*a, g.div(v(*a))?)],
            Sqrt(a) => vec![(*a, g.scale(T::lit(0.5))?.div(v(out))?)],
            Powf(a, p) => {
                let d = v(*a).powf(*p - T::one())?.scale(*p)?;
                vec![(*a, g.mul(d)?)]
            }
            Sum(a) => vec![(*a, g.expand(self.value(*a).shape())?)],
            Expand(a) => vec![(*a, g.sum()?)],
            ChannelSum(a) => {
                let s = self.value(*a);
                vec![(*a, g.channel_broadcast(s.shape()[1], s.shape()[2])?)]
            }
            ChannelBroadcast(a) => vec![(*a, g.channel_sum()?)],
            Concat(list) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(list.len());
                for &p in list {
                    let pv = self.value(p);
                    let len = if pv.is_scalar() { 1 } else { pv.shape()[0] };
                    let piece = g.slice(start, len)?;
                    let piece = if pv.is_scalar() { piece.reshape(&[])? } else { piece };
                    out.push((p, piece));
                    start += len;
                }
                out
            }
            Slice(a, start) => {
                let full = self.value(*a);
                let len = g.value().shape()[0];
                let mut parts = Vec::new();
                let zeros = |rows: usize| {
                    let mut shape = full.shape().to_vec();
                    shape[0] = rows;
                    self.constant(Tensor::zeros(&shape))
                };
                if *start > 0 {
                    parts.push(zeros(*start));
                }
                parts.push(g);
                let rest = full.shape()[0] - start - len;
                if rest > 0 {
                    parts.push(zeros(rest));
                }
                vec![(*a, self.concat(&parts)?)]
            }
        })
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient stored by [`Tape::backward`], if this is a trainable leaf.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape
            .leaf_grads
            .borrow()
            .as_ref()
            .and_then(|m| m.get(&self.id).cloned())
    }

    /// A constant copy of this value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary(
        self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data)?
        } else if b.is_scalar() {
            let y = b.item();
            a.map(|x| f(x, y))
        } else if a.is_scalar() {
            let x = a.item();
            b.map(|y| f(x, y))
        } else {
            return Err(mismatch(name, a.shape(), b.shape()));
        };
        Ok(self.tape.push(out, op))
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = self.value().map(f);
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'t, T>> {
        self.unary(|x| x + c, Op::AddConst(self.id, c))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(|x| if x > T::zero() { x } else { T::zero() }, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(|x| x.tanh(), Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(|x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn powf(self, p: T) -> Result<Var<'t, T>> {
        self.unary(|x| x.powf(p), Op::Powf(self.id, p))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let s: T = self.value().data().iter().copied().sum();
        Ok(self.tape.push(Tensor::scalar(s), Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(T::one() / T::lit(n as f64))
    }

    pub fn dot(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(mismatch("dot", &a, &b));
        }
        self.mul(other)?.sum()
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if !v.is_scalar() {
            return Err(mismatch("expand", v.shape(), shape));
        }
        Ok(self
            .tape
            .push(Tensor::full(shape, v.item()), Op::Expand(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id)))
    }

    pub fn flatten(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.reshape(&[n])
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.push(out, Op::Matmul(self.id, other.id)))
    }

    /// Matrix transpose of a 2-D value.
    pub fn t(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected 2-D, got {:?}", a.shape()),
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor::new(&[c, r], kernels::transpose(a.data(), r, c))?;
        Ok(self.tape.push(out, Op::Transpose(self.id)))
    }

    /// Sum over the spatial axes of a `C × H × W` value.
    pub fn channel_sum(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 3 {
            return Err(TensorError::Invalid {
                op: "channel_sum",
                detail: format!("expected C×H×W, got {:?}", a.shape()),
            });
        }
        let c = a.shape()[0];
        let hw = a.shape()[1] * a.shape()[2];
        let data = a.data().chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
        Ok(self
            .tape
            .push(Tensor::new(&[c], data)?, Op::ChannelSum(self.id)))
    }

    /// Repeats a length-`C` vector over an `h × w` grid.
    pub fn channel_broadcast(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 1 {
            return Err(TensorError::Invalid {
                op: "channel_broadcast",
                detail: format!("expected a vector, got {:?}", a.shape()),
            });
        }
        let c = a.shape()[0];
        let mut data = Vec::with_capacity(c * h * w);
        for &x in a.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        Ok(self
            .tape
            .push(Tensor::new(&[c, h, w], data)?, Op::ChannelBroadcast(self.id)))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.is_scalar() || len == 0 || start + len > a.shape()[0] {
            return Err(TensorError::Invalid {
                op: "slice",
                detail: format!("rows {start}..{} of {:?}", start + len, a.shape()),
            });
        }
        let row: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let data = a.data()[start * row..(start + len) * row].to_vec();
        Ok(self
            .tape
            .push(Tensor::new(&shape, data)?, Op::Slice(self.id, start)))
    }

    /// Numerically stable softmax of a vector.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let v = self.value();
        if v.shape().len() != 1 {
            return Err(TensorError::Invalid {
                op: "softmax",
                detail: format!("expected a vector, got {:?}", v.shape()),
            });
        }
        let max = v.data().iter().copied().fold(T::neg_infinity(), T::max);
        let e = self.add_scalar(-max)?.exp()?;
        e.div(e.sum()?)
    }

    /// Cross-correlation of a `C_in × H × W` input with `C_out × C_in × kh × kw` kernels.
    pub fn conv2d(self, kernels: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let k = kernels.value();
        if k.shape().len() == 4 && (k.shape()[2] % 2 == 0 || k.shape()[3] % 2 == 0) {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!("kernel dims must be odd, got {:?}", k.shape()),
            });
        }
        let geom = conv_geom(&self.value(), &k, stride, pad)?;
        self.conv2d_geom(kernels, geom)
    }

    /// Transpose convolution: the adjoint of [`Var::conv2d`] with the same geometry.
    /// Output side is `stride·(H−1) + k − 2·pad`.
    pub fn conv2d_transpose(
        self,
        kernels: Var<'t, T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let geom = conv_transpose_geom(&self.value(), &kernels.value(), stride, pad)?;
        self.conv2d_transpose_geom(kernels, geom)
    }

    pub fn conv2d_geom(self, kernels: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = kernels.value();
        check_shape("conv2d", x.shape(), &geom.image_shape())?;
        check_shape("conv2d", k.shape(), &geom.kernel_shape())?;
        let out = Tensor::new(&geom.feature_shape(), kernels::conv2d(x.data(), k.data(), &geom))?;
        Ok(self.tape.push(out, Op::Conv(self.id, kernels.id, geom)))
    }

    pub fn conv2d_transpose_geom(self, kernels: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let y = self.value();
        let k = kernels.value();
        check_shape("conv2d_transpose", y.shape(), &geom.feature_shape())?;
        check_shape("conv2d_transpose", k.shape(), &geom.kernel_shape())?;
        let out = Tensor::new(
            &geom.image_shape(),
            kernels::conv2d_transpose(y.data(), k.data(), &geom),
        )?;
        Ok(self.tape.push(out, Op::ConvT(self.id, kernels.id, geom)))
    }

    /// Gradient of `⟨conv2d(self, K), feature_grad⟩` with respect to `K`.
    pub fn conv2d_kernel_grad(self, feature_grad: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let x = self.value();
        let gy = feature_grad.value();
        check_shape("conv2d_kernel_grad", x.shape(), &geom.image_shape())?;
        check_shape("conv2d_kernel_grad", gy.shape(), &geom.feature_shape())?;
        let out = Tensor::new(
            &geom.kernel_shape(),
            kernels::conv2d_kernel_grad(x.data(), gy.data(), &geom),
        )?;
        Ok(self
            .tape
            .push(out, Op::ConvKGrad(self.id, feature_grad.id, geom)))
    }
}

fn check_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        Err(mismatch(op, got, want))
    } else {
        Ok(())
    }
}

fn conv_geom<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.shape().len() != 3 || k.shape().len() != 4 || x.shape()[0] != k.shape()[1] {
        return Err(mismatch("conv2d", x.shape(), k.shape()));
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[2], k.shape()[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::Invalid {
            op: "conv2d",
            detail: format!("kernel {kh}×{kw} larger than padded input {h}×{w}"),
        });
    }
    Ok(ConvGeom {
        c_in: x.shape()[0],
        h,
        w,
        c_out: k.shape()[0],
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

fn conv_transpose_geom<T: Real>(
    y: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if y.shape().len() != 3 || k.shape().len() != 4 || y.shape()[0] != k.shape()[0] {
        return Err(mismatch("conv2d_transpose", y.shape(), k.shape()));
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d_transpose",
            detail: "stride must be positive".into(),
        });
    }
    let (oh, ow) = (y.shape()[1], y.shape()[2]);
    let (kh, kw) = (k.shape()[2], k.shape()[3]);
    let h = (stride * (oh - 1) + kh) as isize - 2 * pad as isize;
    let w = (stride * (ow - 1) + kw) as isize - 2 * pad as isize;
    if h < 1 || w < 1 {
        return Err(TensorError::Invalid {
            op: "conv2d_transpose",
            detail: format!("non-positive output size {h}×{w}"),
        });
    }
    Ok(ConvGeom {
        c_in: k.shape()[1],
        h: h as usize,
        w: w as usize,
        c_out: y.shape()[0],
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Maximum relative error between the tape gradient of `f` at `x` and central differences.
///
/// Relative error per coordinate is `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T: Real, E: From<TensorError>>(
    f: impl for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> std::result::Result<Var<'t, T>, E>,
    x: &Tensor<T>,
    h: f64,
) -> std::result::Result<f64, E> {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let analytic = tape.grad(y, &[xv], false)?[0].value();

    let eval = |p: &Tensor<T>| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let v = tape.constant(p.clone());
        Ok(f(&tape, v)?.item().as_f64())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(h);
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - T::lit(h);
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
