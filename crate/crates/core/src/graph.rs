//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its forward value and the data its
//! backward rule needs. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and [`Graph::backward`] walks it in
//! reverse.
//!
//! Gradients accumulate on leaves: calling `backward` twice without
//! [`Graph::zero_grads`] adds the second gradient onto the first, exactly
//! like repeated accumulation into parameter `.grad` buffers.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::ops::{self, PoolPad};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Interleave(Vec<Var>),
    RowSelect(Vec<bool>, Var, Var),
    Sum(Var),
    Softmax(Var, usize),
    Conv1d(Var, Var),
    MaxPool(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` receive
    /// gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = ops::add_bias(self.value(a), self.value(bias))?;
        Ok(self.push(v, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = ops::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = ops::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = ops::tanh(self.value(a));
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let v = ops::slice_rows(self.value(a), lo, hi)?;
        Ok(self.push(v, Op::SliceRows(a, lo), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let v = ops::slice_cols(self.value(a), lo, hi)?;
        Ok(self.push(v, Op::SliceCols(a, lo), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&vals)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_cols(&vals)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::interleave_rows(&vals)?;
        Ok(self.push(v, Op::Interleave(parts.to_vec()), parts))
    }

    pub fn row_select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let v = ops::row_select(mask, self.value(a), self.value(b))?;
        Ok(self.push(v, Op::RowSelect(mask.to_vec(), a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let v = ops::softmax(self.value(a), axis, mask)?;
        Ok(self.push(v, Op::Softmax(a, axis), &[a]))
    }

    pub fn conv1d_temporal(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = ops::conv1d_temporal(self.value(x), self.value(w))?;
        Ok(self.push(v, Op::Conv1d(x, w), &[x, w]))
    }

    pub fn max_pool_1d(&mut self, x: Var, k: usize, stride: usize, pad: PoolPad) -> Result<Var> {
        let (v, arg) = ops::max_pool_1d(self.value(x), k, stride, pad)?;
        Ok(self.push(v, Op::MaxPool(x, arg), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, xhat, inv_std) =
            ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(v, op, &[x, gain, bias]))
    }

    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let (v, mask) = ops::dropout(self.value(x), rate, train, rng)?;
        Ok(self.push(v, Op::Dropout(x, mask), &[x]))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (v, probs) = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            v,
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`, adding d(loss)/d(leaf) onto every
    /// reachable leaf created with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // Intermediate gradients live only for this pass, so a second call
        // contributes exactly one more gradient to each leaf.
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    res.push((*a, ops::matmul_nt(g, val(*b))?));
                }
                if wants(*b) {
                    res.push((*b, ops::matmul_tn(val(*a), g)?));
                }
            }
            Op::Transpose(a) => res.push((*a, ops::transpose(g)?)),
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::AddBias(a, bias) => {
                res.push((*a, g.clone()));
                if wants(*bias) {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let shape = val(*bias).shape().to_vec();
                    res.push((*bias, Tensor::new(shape, gb)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    res.push((*a, ops::mul(g, val(*b))?));
                }
                if wants(*b) {
                    res.push((*b, ops::mul(g, val(*a))?));
                }
            }
            Op::Scale(a, s) => res.push((*a, ops::scale(g, *s))),
            Op::Sigmoid(a) => {
                let d = out.map(|y| y * (1.0 - y));
                res.push((*a, ops::mul(g, &d)?));
            }
            Op::Tanh(a) => {
                let d = out.map(|y| 1.0 - y * y);
                res.push((*a, ops::mul(g, &d)?));
            }
            Op::Relu(a) => {
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                res.push((*a, ops::mul(g, &d)?));
            }
            Op::SliceRows(a, lo) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                let n = ga.cols();
                ga.data_mut()[lo * n..lo * n + g.len()].copy_from_slice(g.data());
                res.push((*a, ga));
            }
            Op::SliceCols(a, lo) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    ga.row_mut(r)[*lo..lo + w].copy_from_slice(g.row(r));
                }
                res.push((*a, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        res.push((p, ops::slice_rows(g, offset, offset + rows)?));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if wants(p) {
                        res.push((p, ops::slice_cols(g, offset, offset + cols)?));
                    }
                    offset += cols;
                }
            }
            Op::Interleave(parts) => {
                let n = parts.len();
                for (b, &p) in parts.iter().enumerate() {
                    if !wants(p) {
                        continue;
                    }
                    let mut gp = Tensor::zeros(val(p).shape());
                    for r in 0..gp.rows() {
                        gp.row_mut(r).copy_from_slice(g.row(r * n + b));
                    }
                    res.push((p, gp));
                }
            }
            Op::RowSelect(mask, a, b) => {
                let zero = Tensor::zeros(g.shape());
                if wants(*a) {
                    res.push((*a, ops::row_select(mask, g, &zero)?));
                }
                if wants(*b) {
                    res.push((*b, ops::row_select(mask, &zero, g)?));
                }
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = ops::axis_layout(out.shape(), *axis)?;
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let s: f64 = (0..n).map(|j| y[idx(j)] * gd[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (gd[idx(j)] - s);
                        }
                    }
                }
                res.push((*a, Tensor::new(out.shape().to_vec(), gx)?));
            }
            Op::Conv1d(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (len, din) = (xv.rows(), xv.cols());
                let [k, _, dout] = *wv.shape() else {
                    unreachable!("conv weights are rank 3")
                };
                let r = k / 2;
                let wd = wv.data();
                let mut gx = vec![0.0; len * din];
                let mut gw = vec![0.0; wv.len()];
                for p in 0..len {
                    let grow = g.row(p);
                    for o in 0..k {
                        let Some(q) = (p + o).checked_sub(r).filter(|&q| q < len) else {
                            continue;
                        };
                        let xrow = xv.row(q);
                        let wk = &wd[o * din * dout..(o + 1) * din * dout];
                        let gwk = &mut gw[o * din * dout..(o + 1) * din * dout];
                        for c in 0..din {
                            gx[q * din + c] += ops::dot(grow, &wk[c * dout..(c + 1) * dout]);
                            ops::axpy(&mut gwk[c * dout..(c + 1) * dout], xrow[c], grow);
                        }
                    }
                }
                if wants(*x) {
                    res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if wants(*w) {
                    res.push((*w, Tensor::new(wv.shape().to_vec(), gw)?));
                }
            }
            Op::MaxPool(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = g.cols();
                for (e, &src) in arg.iter().enumerate() {
                    gx.data_mut()[src * d + e % d] += g.data()[e];
                }
                res.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let gainv = val(*gain).data();
                let mut gx = Tensor::zeros(g.shape());
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..g.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let gh: Vec<f64> = gr.iter().zip(gainv).map(|(a, b)| a * b).collect();
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghx);
                    }
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                }
                res.push((*x, gx));
                if wants(*gain) {
                    res.push((*gain, Tensor::new(val(*gain).shape().to_vec(), ggain)?));
                }
                if wants(*bias) {
                    res.push((*bias, Tensor::new(val(*bias).shape().to_vec(), gbias)?));
                }
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), data)?));
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let b = targets.len() as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl.row_mut(r)[t] -= 1.0;
                }
                let s = g.item() / b;
                res.push((*logits, ops::scale(&gl, s)));
            }
        }
        Ok(res)
    }
}
