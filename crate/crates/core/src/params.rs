//! Parameter containers shared by the networks.
//!
//! Every network stores its weights in a struct generic over the leaf type
//! `P`: `Tensor<T>` at rest, `Var<'t, T>` once bound to a tape. Traversal
//! order is fixed, which gives each parameter a stable name for checkpoints
//! and optimizer state.

use bpcgen_tape::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Named, ordered traversal over a set of parameters.
pub trait ParamTree<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P));

    fn named(&self, prefix: &str) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p)));
        out
    }

    fn leaves(&self) -> Vec<&P> {
        self.named("").into_iter().map(|(_, p)| p).collect()
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut |name, p| out.push((name, p)));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut P> {
        self.named_mut("").into_iter().map(|(_, p)| p).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Total element count of a tensor-valued tree.
pub fn parameter_count<T: Real>(tree: &impl ParamTree<Tensor<T>>) -> usize {
    tree.leaves().iter().map(|t| t.len()).sum()
}

/// Binds every tensor of `tree` to `tape` (trainable or constant), returning
/// the variables in traversal order.
pub(crate) fn bind_all<'t, T: Real>(
    tape: &'t Tape<T>,
    tree: &impl ParamTree<Tensor<T>>,
    trainable: bool,
) -> Vec<Var<'t, T>> {
    tree.leaves()
        .into_iter()
        .map(|t| tape.leaf(t.clone(), trainable))
        .collect()
}

/// Rebuilds `tree`'s shape with leaves drawn in traversal order from
/// `source`.
pub(crate) struct LeafSource<I>(pub I);

impl<I: Iterator> LeafSource<I> {
    pub fn take(&mut self) -> I::Item {
        self.0.next().expect("leaf count matches parameter tree")
    }
}

/// `x · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ParamTree<P> for Affine<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<P> Affine<P> {
    pub(crate) fn rebuild<Q, I: Iterator<Item = Q>>(&self, src: &mut LeafSource<I>) -> Affine<Q> {
        Affine {
            weight: src.take(),
            bias: src.take(),
        }
    }
}

impl<T: Real> Affine<Tensor<T>> {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(fan_in, fan_out, rng),
            bias: Tensor::zeros([fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Tensor::zeros([fan_out]),
        }
    }
}

impl<'t, T: Real> Affine<Var<'t, T>> {
    pub fn apply(&self, x: Var<'t, T>) -> Var<'t, T> {
        x.matmul(self.weight).add_row(self.bias)
    }
}

/// `[fan_in, fan_out]` matrix with entries uniform in `±1/√fan_in`.
pub fn uniform_init<T: Real>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        [fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect(),
    )
}

/// Numeric precision of a stored model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}
