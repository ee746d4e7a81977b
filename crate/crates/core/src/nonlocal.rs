//! Non-local bank operator and classification heads.
//!
//! The current feature `c_t` queries the enhanced window `L̃_t`:
//!
//! ```text
//! w   = softmax( (c_t W_θ)(L̃_t W_φ)ᵀ / N )      masked rows get weight 0
//! y_t = w · (L̃_t W_g)
//! r_t = dropout(layer_norm(y_t)) + c_t
//! ```
//!
//! The exponentiated similarity is never formed; the logits go straight into
//! a max-subtracted softmax.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Mode};
use crate::error::{Error, Result};
use crate::ops::DEFAULT_LN_EPS;
use crate::params::{uniform_fan_in, Group, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NloParams {
    pub d: usize,
    pub d_embed: usize,
    pub w_theta: ParamId,
    pub w_phi: ParamId,
    pub w_g: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub dropout: f64,
    /// Divisor applied to the similarity logits.
    pub norm_factor: f64,
}

impl NloParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_embed: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if d_embed == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} not in [0, 1)")));
        }
        let w_theta = store.add(
            format!("{prefix}.w_theta"),
            Group::NonLocal,
            uniform_fan_in(&[d, d_embed], d, rng),
        );
        let w_phi = store.add(
            format!("{prefix}.w_phi"),
            Group::NonLocal,
            uniform_fan_in(&[d, d_embed], d, rng),
        );
        let w_g = store.add(
            format!("{prefix}.w_g"),
            Group::NonLocal,
            uniform_fan_in(&[d, d], d, rng),
        );
        let ln_gain = store.add(format!("{prefix}.ln_gain"), Group::NonLocal, Tensor::ones(&[d]));
        let ln_bias = store.add(format!("{prefix}.ln_bias"), Group::NonLocal, Tensor::zeros(&[d]));
        Ok(NloParams {
            d,
            d_embed,
            w_theta,
            w_phi,
            w_g,
            ln_gain,
            ln_bias,
            dropout,
            norm_factor: (d_embed as f64).sqrt(),
        })
    }
}

/// Returns `(r_t [1 x d], attention weights [1 x ℓ])`.
pub fn attend<B: Backend>(
    b: &mut B,
    p: &NloParams,
    c: &B::T,
    ltil: &B::T,
    mask: &[bool],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(B::T, B::T)> {
    let cs = b.value(c).shape().to_vec();
    let ls = b.value(ltil).shape().to_vec();
    if cs != [1, p.d] || ls.len() != 2 || ls[1] != p.d || ls[0] != mask.len() {
        return Err(Error::dim("attend", &cs, &ls));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("attention over a fully masked window".into()));
    }
    let w_theta = b.param(p.w_theta);
    let w_phi = b.param(p.w_phi);
    let theta = b.matmul(c, &w_theta)?;
    let phi = b.matmul(ltil, &w_phi)?;
    let phi_t = b.transpose(&phi)?;
    let logits = b.matmul(&theta, &phi_t)?;
    let logits = b.scale(&logits, 1.0 / p.norm_factor);
    let weights = b.softmax(&logits, 1, Some(mask))?;
    let w_g = b.param(p.w_g);
    let g = b.matmul(ltil, &w_g)?;
    let y = b.matmul(&weights, &g)?;
    let gain = b.param(p.ln_gain);
    let bias = b.param(p.ln_bias);
    let y = b.layer_norm(&y, &gain, &bias, DEFAULT_LN_EPS)?;
    let y = b.dropout(&y, p.dropout, mode, rng)?;
    let r = b.add(&y, c)?;
    Ok((r, weights))
}

/// Learned per-position weighting over the bank window (the weighted-average
/// ablation operator). Position logits are indexed from the window end, so a
/// window of ℓ < L rows uses the last ℓ logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub nominal_len: usize,
    pub position_logits: ParamId,
}

impl WaveParams {
    pub fn init(store: &mut ParamStore, prefix: &str, nominal_len: usize) -> Self {
        let position_logits = store.add(
            format!("{prefix}.position_logits"),
            Group::NonLocal,
            Tensor::zeros(&[1, nominal_len]),
        );
        WaveParams {
            nominal_len,
            position_logits,
        }
    }
}

/// Returns `(r_t [1 x d], weights [1 x ℓ])`.
pub fn attend_wave<B: Backend>(
    b: &mut B,
    p: &WaveParams,
    ltil: &B::T,
    mask: &[bool],
) -> Result<(B::T, B::T)> {
    let rows = b.value(ltil).rows();
    if rows != mask.len() || rows > p.nominal_len {
        return Err(Error::dim("attend_wave", b.value(ltil).shape(), &[p.nominal_len]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("weighted average over a fully masked window".into()));
    }
    let all = b.param(p.position_logits);
    let logits = b.slice_cols(&all, p.nominal_len - rows, p.nominal_len)?;
    let weights = b.softmax(&logits, 1, Some(mask))?;
    let r = b.matmul(&weights, ltil)?;
    Ok((r, weights))
}

/// Two fully connected layers with a rectifier in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadParams {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let w1 = store.add(
            format!("{prefix}.w1"),
            group,
            uniform_fan_in(&[input, hidden], input, rng),
        );
        let b1 = store.add(format!("{prefix}.b1"), group, Tensor::zeros(&[hidden]));
        let w2 = store.add(
            format!("{prefix}.w2"),
            group,
            uniform_fan_in(&[hidden, classes], hidden, rng),
        );
        let b2 = store.add(format!("{prefix}.b2"), group, Tensor::zeros(&[classes]));
        HeadParams {
            input,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Logits `[rows x C]` for an input of `[rows x input]`.
pub fn head_logits<B: Backend>(b: &mut B, head: &HeadParams, x: &B::T) -> Result<B::T> {
    let h = b.linear(x, head.w1, Some(head.b1))?;
    let h = b.relu(&h);
    b.linear(&h, head.w2, Some(head.b2))
}

/// Phase logits from the concatenation `[r_t, c_t]`.
pub fn classify<B: Backend>(b: &mut B, head: &HeadParams, r: &B::T, c: &B::T) -> Result<B::T> {
    let x = b.concat_cols(&[r.clone(), c.clone()])?;
    let width = b.value(&x).cols();
    if width != head.input {
        return Err(Error::dim("classify", &[width], &[head.input]));
    }
    head_logits(b, head, &x)
}
