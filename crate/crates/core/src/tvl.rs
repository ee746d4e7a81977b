//! Temporal variation layer: multi-scale temporal-only convolutions over a bank
//! window, fused per position and channel.
//!
//! With the full kernel set the layer has five branches: one convolution per
//! kernel size, a length-preserving temporal max-pool (k=2, s=1) and an
//! identity shortcut. Max fusion interleaves the branch outputs row by row and
//! max-pools with kernel and stride equal to the branch count, which is the
//! per-position maximum across branches. A single-kernel configuration is just
//! that convolution, with no fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::ops::{check_odd_kernel, PoolPad};
use crate::params::{uniform_fan_in, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Max,
    Ave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBranch {
    pub kernel: usize,
    pub weight: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TvlParams {
    pub d: usize,
    pub convs: Vec<ConvBranch>,
    pub fusion: Fusion,
}

impl TvlParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        kernels: &[usize],
        fusion: Fusion,
        rng: &mut R,
    ) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::Config("temporal variation layer needs a kernel".into()));
        }
        let mut convs = Vec::new();
        for &k in kernels {
            check_odd_kernel(k)?;
            let weight = store.add(
                format!("{prefix}.conv{k}"),
                Group::Tvl,
                uniform_fan_in(&[k, d, d], k * d, rng),
            );
            convs.push(ConvBranch { kernel: k, weight });
        }
        Ok(TvlParams { d, convs, fusion })
    }

    pub fn is_multi_scale(&self) -> bool {
        self.convs.len() > 1
    }

    pub fn num_branches(&self) -> usize {
        if self.is_multi_scale() {
            self.convs.len() + 2
        } else {
            1
        }
    }

    /// Largest distance between an output position and an input position it reads.
    pub fn receptive_radius(&self) -> usize {
        let conv = self.convs.iter().map(|c| c.kernel / 2).max().unwrap_or(0);
        if self.is_multi_scale() {
            conv.max(1)
        } else {
            conv
        }
    }
}

/// Maximal runs of `true` in `mask` as half-open ranges.
fn valid_runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let s = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

fn dense_branches<B: Backend>(b: &mut B, p: &TvlParams, x: &B::T) -> Result<Vec<B::T>> {
    let mut outs = Vec::with_capacity(p.num_branches());
    for conv in &p.convs {
        let w = b.param(conv.weight);
        outs.push(b.conv1d_temporal(x, &w)?);
    }
    if p.is_multi_scale() {
        outs.push(b.max_pool_1d(x, 2, 1, PoolPad::ReplicateLast)?);
        outs.push(x.clone());
    }
    Ok(outs)
}

/// Branch outputs for a `[ℓ x d]` window. Rows with `mask[r] == false` are
/// zero in every branch and are never read by valid rows.
pub fn branches<B: Backend>(
    b: &mut B,
    p: &TvlParams,
    x: &B::T,
    mask: &[bool],
) -> Result<Vec<B::T>> {
    let shape = b.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != p.d || mask.len() != shape[0] {
        return Err(Error::dim("tvl", &shape, &[mask.len(), p.d]));
    }
    if mask.iter().all(|&m| m) {
        return dense_branches(b, p, x);
    }
    let runs = valid_runs(mask);
    if runs.is_empty() {
        return Err(Error::Contract("temporal variation layer on a fully masked window".into()));
    }
    // pieces[branch] collects row blocks in temporal order
    let mut pieces: Vec<Vec<B::T>> = vec![Vec::new(); p.num_branches()];
    let mut cursor = 0;
    for (s, e) in runs {
        if s > cursor {
            for pc in pieces.iter_mut() {
                pc.push(b.constant(Tensor::zeros(&[s - cursor, p.d])));
            }
        }
        let seg = b.slice_rows(x, s, e)?;
        for (pc, out) in pieces.iter_mut().zip(dense_branches(b, p, &seg)?) {
            pc.push(out);
        }
        cursor = e;
    }
    if cursor < mask.len() {
        for pc in pieces.iter_mut() {
            pc.push(b.constant(Tensor::zeros(&[mask.len() - cursor, p.d])));
        }
    }
    pieces.iter().map(|pc| b.concat_rows(pc)).collect()
}

/// Per-position, per-channel reduction across branch outputs.
pub fn fuse<B: Backend>(b: &mut B, fusion: Fusion, outs: &[B::T]) -> Result<B::T> {
    match outs {
        [] => Err(Error::Contract("nothing to fuse".into())),
        [single] => Ok(single.clone()),
        _ => {
            let n = outs.len();
            match fusion {
                Fusion::Max => {
                    let stacked = b.interleave_rows(outs)?;
                    b.max_pool_1d(&stacked, n, n, PoolPad::None)
                }
                Fusion::Ave => {
                    let mut acc = outs[0].clone();
                    for o in &outs[1..] {
                        acc = b.add(&acc, o)?;
                    }
                    Ok(b.scale(&acc, 1.0 / n as f64))
                }
            }
        }
    }
}

/// `L̃_t`: the enhanced window, same shape as the input.
pub fn apply<B: Backend>(b: &mut B, p: &TvlParams, x: &B::T, mask: &[bool]) -> Result<B::T> {
    let outs = branches(b, p, x, mask)?;
    fuse(b, p.fusion, &outs)
}
