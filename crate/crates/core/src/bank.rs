//! Long-range memory bank: an append-only, time-indexed list of frame features.
//!
//! The bank holds plain values, never graph nodes, so nothing read from it can
//! carry gradients back into the encoder.

use crate::encoder::{encode_sequence, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synth::LabeledSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    d: usize,
    /// Row `t` holds `l_t`; indices are implicit and contiguous.
    values: Vec<f64>,
    frozen: bool,
}

/// Features `l_{max(0, t-L+1)} ..= l_t` in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct BankWindow {
    pub features: Tensor,
    pub mask: Vec<bool>,
    pub start: usize,
    pub end_time: usize,
    pub nominal_len: usize,
}

impl BankWindow {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Left-pads with zero rows (masked out) up to the nominal length.
    pub fn left_padded(&self) -> BankWindow {
        let pad = self.nominal_len.saturating_sub(self.len());
        if pad == 0 {
            return self.clone();
        }
        let d = self.features.cols();
        let mut data = vec![0.0; pad * d];
        data.extend_from_slice(self.features.data());
        let mut mask = vec![false; pad];
        mask.extend_from_slice(&self.mask);
        BankWindow {
            features: Tensor::matrix(self.nominal_len, d, data).expect("padded window shape"),
            mask,
            start: self.start,
            end_time: self.end_time,
            nominal_len: self.nominal_len,
        }
    }
}

impl MemoryBank {
    pub fn new(d: usize) -> Self {
        MemoryBank {
            d,
            values: Vec::new(),
            frozen: false,
        }
    }

    /// Bank whose row `t` is row `t` of `features` (`[T x d]`).
    pub fn from_features(features: &Tensor, frozen: bool) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::dim("memory bank", features.shape(), &[0, 0]));
        }
        Ok(MemoryBank {
            d: features.cols(),
            values: features.data().to_vec(),
            frozen,
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn feature(&self, t: usize) -> &[f64] {
        &self.values[t * self.d..(t + 1) * self.d]
    }

    /// All entries as a `[len x d]` matrix.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.d, self.values.clone())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Hash of the exact bit patterns of every entry.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.d.hash(&mut h);
        for v in &self.values {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Archives `l_t` at index `len()`.
    pub fn append(&mut self, feature: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::State("cannot append to a frozen memory bank".into()));
        }
        if feature.len() != self.d {
            return Err(Error::dim("bank append", &[self.d], &[feature.len()]));
        }
        self.values.extend_from_slice(feature);
        Ok(())
    }

    /// The window of at most `nominal_len` entries ending at `t`. Never reads
    /// entries after `t`.
    pub fn window(&self, t: usize, nominal_len: usize) -> Result<BankWindow> {
        if t >= self.len() {
            return Err(Error::Index {
                what: "bank time index",
                index: t,
                len: self.len(),
            });
        }
        if nominal_len == 0 {
            return Err(Error::Config("bank window length must be >= 1".into()));
        }
        let start = (t + 1).saturating_sub(nominal_len);
        let rows = t + 1 - start;
        let features = Tensor::matrix(
            rows,
            self.d,
            self.values[start * self.d..(t + 1) * self.d].to_vec(),
        )?;
        Ok(BankWindow {
            features,
            mask: vec![true; rows],
            start,
            end_time: t,
            nominal_len,
        })
    }
}

/// Encodes every frame of `seq` with the current encoder and freezes the result.
pub fn build_offline(
    store: &ParamStore,
    enc: &EncoderParams,
    seq: &LabeledSequence,
    clip_len: usize,
) -> Result<MemoryBank> {
    let feats = encode_sequence(store, enc, seq, clip_len)?;
    MemoryBank::from_features(&feats, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(n: usize, d: usize) -> MemoryBank {
        let mut b = MemoryBank::new(d);
        for t in 0..n {
            b.append(&vec![t as f64; d]).unwrap();
        }
        b
    }

    #[test]
    fn appends_are_indexed_in_order() {
        let mut b = MemoryBank::new(3);
        b.append(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.feature(0), &[1.0, 2.0, 3.0]);
        let b = bank(25, 2);
        assert_eq!(b.len(), 25);
        for t in 0..25 {
            assert_eq!(b.feature(t)[0], t as f64);
        }
    }

    #[test]
    fn frozen_and_width_errors() {
        let mut b = bank(3, 2);
        assert!(matches!(b.append(&[1.0]), Err(Error::Dimension { .. })));
        b.freeze();
        assert!(matches!(b.append(&[1.0, 1.0]), Err(Error::State(_))));
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn windows_truncate_at_start() {
        let b = bank(50, 2);
        let w = b.window(5, 30).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.start, 0);
        let w = b.window(40, 30).unwrap();
        assert_eq!(w.len(), 30);
        assert_eq!(w.start, 11);
        for r in 0..30 {
            assert_eq!(w.features.row(r)[0], (11 + r) as f64);
        }
        let w = b.window(17, 1).unwrap();
        assert_eq!(w.features.data(), b.feature(17));
        assert!(matches!(b.window(50, 30), Err(Error::Index { .. })));
    }

    #[test]
    fn left_padding_masks_missing_rows() {
        let b = bank(10, 2);
        let w = b.window(2, 5).unwrap().left_padded();
        assert_eq!(w.len(), 5);
        assert_eq!(w.mask, vec![false, false, true, true, true]);
        assert_eq!(w.features.row(0), &[0.0, 0.0]);
        assert_eq!(w.features.row(4), &[2.0, 2.0]);
    }
}
