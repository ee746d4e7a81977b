//! One model definition, two execution modes.
//!
//! Model code is written against [`Backend`]. [`Tape`] records a [`Graph`] so
//! gradients can be taken; [`Eval`] evaluates the same kernels directly on
//! tensors. Both call the functions in [`crate::ops`], so their forward values
//! are bit-identical.

use std::collections::HashMap;

use rand::RngCore;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::{self, PoolPad};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

pub trait Backend {
    type T: Clone;

    fn constant(&mut self, t: Tensor) -> Self::T;
    fn param(&mut self, id: ParamId) -> Self::T;
    fn value<'v>(&'v self, x: &'v Self::T) -> &'v Tensor;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn transpose(&mut self, a: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_bias(&mut self, a: &Self::T, bias: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, s: f64) -> Self::T;
    fn sigmoid(&mut self, a: &Self::T) -> Self::T;
    fn tanh(&mut self, a: &Self::T) -> Self::T;
    fn relu(&mut self, a: &Self::T) -> Self::T;
    fn slice_rows(&mut self, a: &Self::T, lo: usize, hi: usize) -> Result<Self::T>;
    fn slice_cols(&mut self, a: &Self::T, lo: usize, hi: usize) -> Result<Self::T>;
    fn concat_rows(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn interleave_rows(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn row_select(&mut self, mask: &[bool], a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn softmax(&mut self, a: &Self::T, axis: usize, mask: Option<&[bool]>) -> Result<Self::T>;
    fn conv1d_temporal(&mut self, x: &Self::T, w: &Self::T) -> Result<Self::T>;
    fn max_pool_1d(&mut self, x: &Self::T, k: usize, stride: usize, pad: PoolPad)
        -> Result<Self::T>;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T, eps: f64)
        -> Result<Self::T>;
    fn dropout(
        &mut self,
        x: &Self::T,
        rate: f64,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Self::T>;
    fn cross_entropy(&mut self, logits: &Self::T, targets: &[usize]) -> Result<Self::T>;

    /// Affine map `x · w + b` over rows.
    fn linear(&mut self, x: &Self::T, w: ParamId, b: Option<ParamId>) -> Result<Self::T> {
        let w = self.param(w);
        let y = self.matmul(x, &w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_bias(&y, &b)
            }
            None => Ok(y),
        }
    }
}

/// Recording backend: builds a [`Graph`] whose parameter leaves require gradients.
pub struct Tape<'p> {
    graph: Graph,
    store: &'p ParamStore,
    leaves: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            graph: Graph::new(),
            store,
            leaves: HashMap::new(),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        self.graph.backward(*loss)
    }

    /// Gradient for every parameter the forward pass touched.
    pub fn param_grads(&self) -> HashMap<ParamId, Tensor> {
        self.leaves
            .iter()
            .filter_map(|(&id, &v)| self.graph.grad(v).map(|g| (id, g.clone())))
            .collect()
    }
}

impl Backend for Tape<'_> {
    type T = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.graph.leaf(t, false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), true);
        self.leaves.insert(id, v);
        v
    }

    fn value<'v>(&'v self, x: &'v Var) -> &'v Tensor {
        self.graph.value(*x)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.matmul(*a, *b)
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        self.graph.transpose(*a)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }
    fn add_bias(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        self.graph.add_bias(*a, *bias)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.mul(*a, *b)
    }
    fn scale(&mut self, a: &Var, s: f64) -> Var {
        self.graph.scale(*a, s)
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        self.graph.sigmoid(*a)
    }
    fn tanh(&mut self, a: &Var) -> Var {
        self.graph.tanh(*a)
    }
    fn relu(&mut self, a: &Var) -> Var {
        self.graph.relu(*a)
    }
    fn slice_rows(&mut self, a: &Var, lo: usize, hi: usize) -> Result<Var> {
        self.graph.slice_rows(*a, lo, hi)
    }
    fn slice_cols(&mut self, a: &Var, lo: usize, hi: usize) -> Result<Var> {
        self.graph.slice_cols(*a, lo, hi)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_rows(parts)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.concat_cols(parts)
    }
    fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.graph.interleave_rows(parts)
    }
    fn row_select(&mut self, mask: &[bool], a: &Var, b: &Var) -> Result<Var> {
        self.graph.row_select(mask, *a, *b)
    }
    fn softmax(&mut self, a: &Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.graph.softmax(*a, axis, mask)
    }
    fn conv1d_temporal(&mut self, x: &Var, w: &Var) -> Result<Var> {
        self.graph.conv1d_temporal(*x, *w)
    }
    fn max_pool_1d(&mut self, x: &Var, k: usize, stride: usize, pad: PoolPad) -> Result<Var> {
        self.graph.max_pool_1d(*x, k, stride, pad)
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        self.graph.layer_norm(*x, *gain, *bias, eps)
    }
    fn dropout(&mut self, x: &Var, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        self.graph.dropout(*x, rate, mode.is_train(), rng)
    }
    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        self.graph.cross_entropy(*logits, targets)
    }
}

/// Unrecorded backend: evaluates kernels directly, keeping nothing for backward.
pub struct Eval<'p> {
    store: &'p ParamStore,
}

impl<'p> Eval<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Eval { store }
    }
}

impl Backend for Eval<'_> {
    type T = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, id: ParamId) -> Tensor {
        self.store.get(id).clone()
    }
    fn value<'v>(&'v self, x: &'v Tensor) -> &'v Tensor {
        x
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::matmul(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        ops::transpose(a)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::add(a, b)
    }
    fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        ops::add_bias(a, bias)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        ops::scale(a, s)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        ops::sigmoid(a)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        ops::tanh(a)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        ops::relu(a)
    }
    fn slice_rows(&mut self, a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        ops::slice_rows(a, lo, hi)
    }
    fn slice_cols(&mut self, a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        ops::slice_cols(a, lo, hi)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        ops::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        ops::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn interleave_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        ops::interleave_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn row_select(&mut self, mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
        ops::row_select(mask, a, b)
    }
    fn softmax(&mut self, a: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
        ops::softmax(a, axis, mask)
    }
    fn conv1d_temporal(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        ops::conv1d_temporal(x, w)
    }
    fn max_pool_1d(&mut self, x: &Tensor, k: usize, stride: usize, pad: PoolPad) -> Result<Tensor> {
        Ok(ops::max_pool_1d(x, k, stride, pad)?.0)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(ops::layer_norm(x, gain, bias, eps)?.0)
    }
    fn dropout(
        &mut self,
        x: &Tensor,
        rate: f64,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        Ok(ops::dropout(x, rate, mode.is_train(), rng)?.0)
    }
    fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        Ok(ops::cross_entropy(logits, targets)?.0)
    }
}
