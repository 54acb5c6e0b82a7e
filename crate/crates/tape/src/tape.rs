//! The recording tape and differentiable variables.
//!
//! Every op's vector-Jacobian product is itself written with tape ops, so a
//! gradient computed with `create_graph = true` can be differentiated again.
//! Ops whose adjoints depend on runtime decisions (rectifier masks, max-pool
//! winners, nearest neighbours) freeze those decisions as constants, which is
//! exact almost everywhere for piecewise-linear networks.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::tensor::{self, ConvGeometry, Real, Tensor};

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor<T>>),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    AddRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    Sum(usize),
    Broadcast(usize),
    MulScalar(usize, usize),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>, usize),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    GatherFlat(usize, Rc<Vec<usize>>),
    ScatterAddFlat(usize, Rc<Vec<usize>>),
    Exp(usize),
    Powf(usize, T),
    Im2Col(usize, ConvGeometry),
    Col2Im(usize, ConvGeometry),
    /// Scalar output with a frozen first-order gradient.
    Frozen(usize, Rc<Tensor<T>>),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulScalar(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a)
            | MulConst(a, _)
            | SumRows(a)
            | BroadcastRows(a)
            | Sum(a)
            | Broadcast(a)
            | Reshape(a)
            | GatherRows(a, ..)
            | ScatterAddRows(a, _)
            | GatherFlat(a, _)
            | ScatterAddFlat(a, _)
            | Exp(a)
            | Powf(a, _)
            | Im2Col(a, _)
            | Col2Im(a, _)
            | Frozen(a, _) => vec![*a],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient can be requested.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        let requires = self.recording.get();
        self.push(value, Op::Leaf, requires)
    }

    pub fn leaf(&self, value: Tensor<T>, trainable: bool) -> Var<'_, T> {
        if trainable {
            self.variable(value)
        } else {
            self.constant(value)
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
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

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires { op } else { Op::Leaf };
        self.push(value, op, requires)
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the one-element `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned variables are themselves recorded
    /// and can be differentiated again. Variables `output` does not depend on
    /// get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t, T>, wrt: &[Var<'t, T>], create_graph: bool) -> Vec<Var<'t, T>> {
        assert!(std::ptr::eq(output.tape, self), "variable from another tape");
        assert_eq!(output.value().len(), 1, "grad() needs a one-element output");
        let out = output.id;

        let mut relevant = vec![false; out + 1];
        for w in wrt {
            if w.id <= out {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=out {
                if !relevant[id] && nodes[id].requires_grad {
                    relevant[id] = nodes[id].op.parents().iter().any(|&p| relevant[p]);
                }
            }
        }

        let previous = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; out + 1];
        grads[out] = Some(self.constant(Tensor::ones(output.value().shape().to_vec())));
        for id in (0..=out).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let this = Var { tape: self, id };
            for (parent, pg) in self.vjp(&op, this, g, &relevant) {
                grads[parent] = Some(match grads[parent] {
                    Some(acc) => acc + pg,
                    None => pg,
                });
            }
        }
        self.recording.set(previous);

        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) if relevant[w.id] => g,
                _ => self.constant(Tensor::zeros(w.value().shape().to_vec())),
            })
            .collect()
    }

    fn vjp<'t>(
        &'t self,
        op: &Op<T>,
        out: Var<'t, T>,
        g: Var<'t, T>,
        relevant: &[bool],
    ) -> Vec<(usize, Var<'t, T>)> {
        let v = |id: usize| Var { tape: self, id };
        let want = |id: usize| relevant[id];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    res.push((*a, g));
                }
                if want(*b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    res.push((*a, g));
                }
                if want(*b) {
                    res.push((*b, -g));
                }
            }
            Op::Neg(a) => res.push((*a, -g)),
            Op::Mul(a, b) => {
                if want(*a) {
                    res.push((*a, g * v(*b)));
                }
                if want(*b) {
                    res.push((*b, g * v(*a)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.scale(*c))),
            Op::AddScalar(a) => res.push((*a, g)),
            Op::MulConst(a, m) => res.push((*a, g.mul_const_rc(Rc::clone(m)))),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (v(*a), v(*b));
                if want(*a) {
                    let da = if *ta {
                        vb.matmul_t(g, *tb, true)
                    } else {
                        g.matmul_t(vb, false, !*tb)
                    };
                    res.push((*a, da));
                }
                if want(*b) {
                    let db = if *tb {
                        g.matmul_t(va, true, *ta)
                    } else {
                        va.matmul_t(g, !*ta, false)
                    };
                    res.push((*b, db));
                }
            }
            Op::AddRow(a, b) => {
                if want(*a) {
                    res.push((*a, g));
                }
                if want(*b) {
                    res.push((*b, g.sum_rows()));
                }
            }
            Op::SumRows(a) => res.push((*a, g.broadcast_rows(v(*a).value().rows()))),
            Op::BroadcastRows(a) => res.push((*a, g.sum_rows())),
            Op::Sum(a) => res.push((*a, g.broadcast_to(v(*a).value().shape().to_vec()))),
            Op::Broadcast(a) => {
                let shape = v(*a).value().shape().to_vec();
                res.push((*a, g.sum().reshape(shape)));
            }
            Op::MulScalar(a, s) => {
                if want(*a) {
                    res.push((*a, g.mul_scalar(v(*s))));
                }
                if want(*s) {
                    let shape = v(*s).value().shape().to_vec();
                    res.push((*s, (g * v(*a)).sum().reshape(shape)));
                }
            }
            Op::Reshape(a) => res.push((*a, g.reshape(v(*a).value().shape().to_vec()))),
            Op::GatherRows(a, idx, n) => res.push((*a, g.scatter_add_rows_rc(Rc::clone(idx), *n))),
            Op::ScatterAddRows(a, idx) => res.push((*a, g.gather_rows_rc(Rc::clone(idx)))),
            Op::GatherFlat(a, idx) => {
                let shape = v(*a).value().shape().to_vec();
                res.push((*a, g.scatter_add_flat_rc(Rc::clone(idx), shape)));
            }
            Op::ScatterAddFlat(a, idx) => {
                let shape = v(*a).value().shape().to_vec();
                res.push((*a, g.gather_flat_rc(Rc::clone(idx), shape)));
            }
            Op::Exp(a) => res.push((*a, g * out)),
            Op::Powf(a, p) => {
                let p = *p;
                res.push((*a, g * v(*a).powf(p - T::one()).scale(p)));
            }
            Op::Im2Col(a, geom) => res.push((*a, g.col2im(*geom))),
            Op::Col2Im(a, geom) => res.push((*a, g.im2col(*geom))),
            Op::Frozen(a, jac) => {
                let j = self.constant((**jac).clone());
                res.push((*a, j.mul_scalar(g)));
            }
        }
        res
    }
}

/// A handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the value as a fresh constant.
    pub fn detach(&self) -> Self {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.record(value, op)
    }

    fn same_tape(&self, other: &Self) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    pub fn scale(&self, c: T) -> Self {
        self.unary(self.value().map(|x| x * c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.unary(self.value().map(|x| x + c), Op::AddScalar(self.id))
    }

    pub fn mul_const(&self, m: Tensor<T>) -> Self {
        self.mul_const_rc(Rc::new(m))
    }

    fn mul_const_rc(&self, m: Rc<Tensor<T>>) -> Self {
        let value = self.value().zip_map(&m, |a, b| a * b);
        self.unary(value, Op::MulConst(self.id, m))
    }

    pub fn matmul(&self, other: Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposition of either side.
    pub fn matmul_t(&self, other: Self, ta: bool, tb: bool) -> Self {
        self.same_tape(&other);
        let value = tensor::matmul(&self.value(), &other.value(), ta, tb);
        self.tape.record(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: Self) -> Self {
        self.same_tape(&bias);
        let value = tensor::add_row(&self.value(), &bias.value());
        self.tape.record(value, Op::AddRow(self.id, bias.id))
    }

    pub fn sum_rows(&self) -> Self {
        self.unary(tensor::sum_rows(&self.value()), Op::SumRows(self.id))
    }

    pub fn broadcast_rows(&self, n: usize) -> Self {
        self.unary(tensor::broadcast_rows(&self.value(), n), Op::BroadcastRows(self.id))
    }

    pub fn sum(&self) -> Self {
        let s = self.value().sum_all();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize(self.value().len()).expect("len");
        self.sum().scale(T::one() / n)
    }

    /// Fills `shape` with the single element of `self`.
    pub fn broadcast_to(&self, shape: Vec<usize>) -> Self {
        let v = self.value().item();
        self.unary(Tensor::full(shape, v), Op::Broadcast(self.id))
    }

    /// Multiplies every element by the one-element variable `s`.
    pub fn mul_scalar(&self, s: Self) -> Self {
        self.same_tape(&s);
        let c = s.value().item();
        let value = self.value().map(|x| x * c);
        self.tape.record(value, Op::MulScalar(self.id, s.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        if shape.as_slice() == self.value().shape() {
            return *self;
        }
        let value = (*self.value()).clone().reshaped(shape);
        self.unary(value, Op::Reshape(self.id))
    }

    pub fn gather_rows(&self, idx: Vec<usize>) -> Self {
        self.gather_rows_rc(Rc::new(idx))
    }

    fn gather_rows_rc(&self, idx: Rc<Vec<usize>>) -> Self {
        let value = self.value();
        let n = value.rows();
        let out = tensor::gather_rows(&value, &idx);
        self.unary(out, Op::GatherRows(self.id, idx, n))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        self.gather_rows((start..start + len).collect())
    }

    pub fn scatter_add_rows(&self, idx: Vec<usize>, n: usize) -> Self {
        self.scatter_add_rows_rc(Rc::new(idx), n)
    }

    fn scatter_add_rows_rc(&self, idx: Rc<Vec<usize>>, n: usize) -> Self {
        let out = tensor::scatter_add_rows(&self.value(), &idx, n);
        self.unary(out, Op::ScatterAddRows(self.id, idx))
    }

    /// Picks elements by flat index into a tensor of the given shape.
    pub fn gather_flat(&self, idx: Vec<usize>, shape: Vec<usize>) -> Self {
        self.gather_flat_rc(Rc::new(idx), shape)
    }

    fn gather_flat_rc(&self, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Self {
        let out = tensor::gather_flat(&self.value(), &idx, &shape);
        self.unary(out, Op::GatherFlat(self.id, idx))
    }

    fn scatter_add_flat_rc(&self, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Self {
        let out = tensor::scatter_add_flat(&self.value(), &idx, &shape);
        self.unary(out, Op::ScatterAddFlat(self.id, idx))
    }

    pub fn exp(&self) -> Self {
        self.unary(self.value().map(|x| x.exp()), Op::Exp(self.id))
    }

    pub fn powf(&self, p: T) -> Self {
        self.unary(self.value().map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    pub fn sqrt(&self) -> Self {
        self.powf(T::lit(0.5))
    }

    pub fn square(&self) -> Self {
        *self * *self
    }

    /// Leaky rectification; `slope == 0` gives a plain ReLU.
    pub fn leaky_relu(&self, slope: T) -> Self {
        let mask = self
            .value()
            .map(|x| if x > T::zero() { T::one() } else { slope });
        self.mul_const(mask)
    }

    pub fn im2col(&self, geom: ConvGeometry) -> Self {
        self.unary(tensor::im2col(&self.value(), &geom), Op::Im2Col(self.id, geom))
    }

    pub fn col2im(&self, geom: ConvGeometry) -> Self {
        self.unary(tensor::col2im(&self.value(), &geom), Op::Col2Im(self.id, geom))
    }

    /// Per-column maximum over consecutive blocks of `block` rows:
    /// `[n·block, c]` → `[n, c]`. Ties resolve to the earliest row.
    pub fn block_max_rows(&self, block: usize) -> Self {
        let value = self.value();
        let (rows, c) = (value.rows(), value.cols());
        assert!(block > 0 && rows % block == 0, "rows {rows} not divisible by block {block}");
        let n = rows / block;
        let data = value.data();
        let mut idx = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let mut best = b * block * c + ch;
                for r in b * block + 1..(b + 1) * block {
                    let at = r * c + ch;
                    if data[at] > data[best] {
                        best = at;
                    }
                }
                idx.push(best);
            }
        }
        self.gather_flat(idx, vec![n, c])
    }

    /// A one-element output whose value and gradient with respect to `self`
    /// were computed outside the tape. Only first-order gradients pass.
    pub fn frozen_scalar(&self, value: T, jacobian: Tensor<T>) -> Self {
        assert_eq!(jacobian.shape(), self.value().shape(), "jacobian shape mismatch");
        self.unary(Tensor::scalar(value), Op::Frozen(self.id, Rc::new(jacobian)))
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t, T: Real> std::ops::$trait for Var<'t, T> {
            type Output = Var<'t, T>;

            fn $method(self, rhs: Self) -> Self {
                self.same_tape(&rhs);
                let value = self.value().zip_map(&rhs.value(), $f);
                self.tape.record(value, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);

impl<'t, T: Real> std::ops::Neg for Var<'t, T> {
    type Output = Var<'t, T>;

    fn neg(self) -> Self {
        self.unary(self.value().map(|x| -x), Op::Neg(self.id))
    }
}
