//! Named parameter tensors grouped the way the optimizer and checkpoints see them.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Parameter groups. Each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Per-frame feature network (the visual backbone stand-in).
    Frame,
    /// Recurrent temporal cell of the encoder.
    Recurrent,
    /// Temporal variation layer.
    Tvl,
    /// Non-local bank operator (or the weighted-average ablation operator).
    NonLocal,
    /// Classifier over `[r_t, c_t]`.
    Head,
    /// Classifier over `c_t` alone, used by the short-range path.
    ShortHead,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Frame,
        Group::Recurrent,
        Group::Tvl,
        Group::NonLocal,
        Group::Head,
        Group::ShortHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Frame => "frame",
            Group::Recurrent => "recurrent",
            Group::Tvl => "tvl",
            Group::NonLocal => "nonlocal",
            Group::Head => "head",
            Group::ShortHead => "short_head",
        }
    }

    /// Whether the group belongs to the clip encoder.
    /// Position in [`Group::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Group::Frame | Group::Recurrent)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value with the same-named value of `other`. Shapes must agree.
    pub fn copy_from(&mut self, other: &ParamStore, groups: &[Group]) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| groups.contains(&p.group)) {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            let src = other.get(id);
            if src.shape() != p.value.shape() {
                return Err(Error::dim("copy_from", p.value.shape(), src.shape()));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches sample count")
}

/// Xavier (Glorot) normal: `N(0, 2 / (fan_in + fan_out))`.
pub fn xavier_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches sample count")
}
