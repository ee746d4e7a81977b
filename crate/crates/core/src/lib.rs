//! Online surgical-phase recognition with a long-range memory bank.
//!
//! A short clip encoder produces one feature per frame. Those features are
//! archived in an append-only bank; at each step a window of the bank is
//! enhanced by multi-scale temporal convolutions and read by a non-local
//! operator against the current feature, and a small head predicts the phase.
//!
//! Everything runs on a small reverse-mode tape ([`graph`]) over dense `f64`
//! matrices ([`tensor`]), behind the [`backend::Backend`] trait so training and
//! inference share every kernel.

pub mod backend;
pub mod bank;
pub mod container;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod nonlocal;
pub mod ops;
pub mod params;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tvl;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
