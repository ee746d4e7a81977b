//! Synthetic "surgical videos": ordered phases, each composed of actions of
//! variable duration, rendered as noisy per-frame feature vectors.
//!
//! A frame's feature is its action prototype plus a small per-phase bias plus
//! Gaussian noise. Phases listed in an ambiguity pair share the same action
//! prototypes, so a single frame says little about which of the two phases is
//! running; telling them apart takes context spanning several actions.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Knobs from which a [`WorkflowSchema`] is built deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub num_phases: usize,
    pub d_raw: usize,
    pub actions_per_phase: usize,
    /// Phase pairs `(a, b)` where `b` reuses the action set of `a`.
    pub ambiguous_pairs: Vec<(usize, usize)>,
    /// How much of its own bias the second phase of a pair keeps on top of the
    /// first phase's bias. 0 makes the pair identical frame by frame.
    pub ambiguous_bias_keep: f64,
    /// Phases that may be omitted from a video, with their skip probability.
    pub skippable: Vec<(usize, f64)>,
    /// Relative duration share of each phase (cycled if shorter than `num_phases`).
    pub phase_weights: Vec<f64>,
    pub short_action: (usize, usize),
    pub long_action: (usize, usize),
    pub prototype_std: f64,
    pub phase_bias_std: f64,
    pub noise_std: f64,
    pub p_artifact: f64,
    pub artifact_len: (usize, usize),
    pub artifact_std: f64,
    /// Seed for prototypes and phase biases (the "procedure type", not a video).
    pub schema_seed: u64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            num_phases: 7,
            d_raw: 16,
            actions_per_phase: 2,
            ambiguous_pairs: vec![(1, 3), (2, 5)],
            ambiguous_bias_keep: 0.0,
            skippable: vec![(4, 0.15)],
            phase_weights: vec![0.08, 0.2, 0.12, 0.18, 0.1, 0.18, 0.14],
            short_action: (2, 8),
            long_action: (5, 20),
            prototype_std: 1.0,
            phase_bias_std: 0.3,
            noise_std: 0.9,
            p_artifact: 0.05,
            artifact_len: (5, 15),
            artifact_std: 1.5,
            schema_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub prototype: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub actions: Vec<usize>,
    pub bias: Vec<f64>,
    pub skip_prob: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSchema {
    pub d_raw: usize,
    pub actions: Vec<ActionSpec>,
    /// Phases in procedure order; a video visits them in this order, possibly
    /// skipping phases with `skip_prob > 0`.
    pub phases: Vec<PhaseSpec>,
    pub ambiguous_pairs: Vec<(usize, usize)>,
    pub noise_std: f64,
    pub p_artifact: f64,
    pub artifact_len: (usize, usize),
    pub artifact_std: f64,
}

impl WorkflowSchema {
    pub fn from_config(cfg: &SchemaConfig) -> Result<Self> {
        if cfg.num_phases == 0 || cfg.d_raw == 0 || cfg.actions_per_phase == 0 {
            return Err(Error::Config(
                "num_phases, d_raw and actions_per_phase must be positive".into(),
            ));
        }
        if cfg.phase_weights.is_empty() || cfg.phase_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config("phase_weights must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.schema_seed);
        let proto = normal(cfg.prototype_std)?;
        let bias = normal(cfg.phase_bias_std)?;

        let mut actions = Vec::new();
        let mut phases = Vec::new();
        for p in 0..cfg.num_phases {
            let mut ids = Vec::new();
            for a in 0..cfg.actions_per_phase {
                let (min_len, max_len) = if a % 2 == 0 {
                    cfg.short_action
                } else {
                    cfg.long_action
                };
                ids.push(actions.len());
                actions.push(ActionSpec {
                    prototype: (0..cfg.d_raw).map(|_| proto.sample(&mut rng)).collect(),
                    min_len,
                    max_len,
                });
            }
            phases.push(PhaseSpec {
                actions: ids,
                bias: (0..cfg.d_raw).map(|_| bias.sample(&mut rng)).collect(),
                skip_prob: 0.0,
                weight: cfg.phase_weights[p % cfg.phase_weights.len()],
            });
        }
        for &(a, b) in &cfg.ambiguous_pairs {
            if a >= cfg.num_phases || b >= cfg.num_phases || a == b {
                return Err(Error::Config(format!("invalid ambiguous pair ({a}, {b})")));
            }
            phases[b].actions = phases[a].actions.clone();
            let base = phases[a].bias.clone();
            for (x, y) in phases[b].bias.iter_mut().zip(base) {
                *x = y + cfg.ambiguous_bias_keep * *x;
            }
        }
        for &(p, prob) in &cfg.skippable {
            let phase = phases
                .get_mut(p)
                .ok_or_else(|| Error::Config(format!("skippable phase {p} out of range")))?;
            phase.skip_prob = prob;
        }
        let schema = WorkflowSchema {
            d_raw: cfg.d_raw,
            actions,
            phases,
            ambiguous_pairs: cfg.ambiguous_pairs.clone(),
            noise_std: cfg.noise_std,
            p_artifact: cfg.p_artifact,
            artifact_len: cfg.artifact_len,
            artifact_std: cfg.artifact_std,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schema has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.actions.is_empty() {
                return Err(Error::Config(format!("phase {i} has no actions")));
            }
            if p.actions.iter().any(|&a| a >= self.actions.len()) {
                return Err(Error::Config(format!("phase {i} references an unknown action")));
            }
            if !(0.0..1.0).contains(&p.skip_prob) || p.weight <= 0.0 {
                return Err(Error::Config(format!(
                    "phase {i} needs skip_prob in [0,1) and positive weight"
                )));
            }
            if p.bias.len() != self.d_raw {
                return Err(Error::Config(format!("phase {i} bias width mismatch")));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if a.min_len < 1 || a.min_len > a.max_len {
                return Err(Error::Config(format!(
                    "action {i} duration bounds must satisfy 1 <= min <= max"
                )));
            }
            if a.prototype.len() != self.d_raw {
                return Err(Error::Config(format!("action {i} prototype width mismatch")));
            }
        }
        if self.noise_std < 0.0 || self.artifact_std < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_artifact)
            || self.artifact_len.0 < 1
            || self.artifact_len.0 > self.artifact_len.1
        {
            return Err(Error::Config("invalid artifact settings".into()));
        }
        Ok(())
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(format!("invalid std {std}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phase: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRun {
    pub action: usize,
    pub start: usize,
    pub end: usize,
    /// Cut short by the end of its phase.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    /// `[T x d_raw]` per-frame features.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub boundaries: Vec<Segment>,
    pub num_phases: usize,
    pub seed: u64,
    /// Generation metadata; empty for ingested sequences.
    #[serde(default)]
    pub action_runs: Vec<ActionRun>,
    #[serde(default)]
    pub artifacts: Vec<(usize, usize)>,
}

impl LabeledSequence {
    /// Wraps externally computed features; boundaries are the label runs.
    pub fn from_parts(
        features: Tensor,
        labels: Vec<usize>,
        num_phases: usize,
        seed: u64,
    ) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return Err(Error::dim("labeled sequence", features.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_phases) {
            return Err(Error::Index {
                what: "phase label",
                index: bad,
                len: num_phases,
            });
        }
        let boundaries = runs(&labels)
            .into_iter()
            .map(|(phase, start, end)| Segment { phase, start, end })
            .collect();
        Ok(LabeledSequence {
            features,
            labels,
            boundaries,
            num_phases,
            seed,
            action_runs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_raw(&self) -> usize {
        self.features.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }
}

/// Maximal runs of equal values as `(value, start, end_exclusive)`.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push((labels[start], start, i));
            start = i;
        }
    }
    out
}

/// Generates one video whose length is drawn uniformly from `length_range`.
pub fn generate(
    schema: &WorkflowSchema,
    seed: u64,
    length_range: (usize, usize),
) -> Result<LabeledSequence> {
    schema.validate()?;
    let (lo, hi) = length_range;
    let mandatory = schema.phases.iter().filter(|p| p.skip_prob == 0.0).count().max(1);
    if lo > hi || lo < schema.phases.len() || hi == 0 {
        return Err(Error::Config(format!(
            "length range {length_range:?} infeasible for {} phases ({mandatory} mandatory)",
            schema.phases.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.random_range(lo..=hi);

    let mut present: Vec<usize> = (0..schema.phases.len())
        .filter(|&p| {
            let s = schema.phases[p].skip_prob;
            !(s > 0.0 && rng.random::<f64>() < s)
        })
        .collect();
    if present.is_empty() {
        present.push(0);
    }

    let shares: Vec<f64> = present
        .iter()
        .map(|&p| schema.phases[p].weight * rng.random_range(0.7..1.3))
        .collect();
    let lengths = apportion(total, &shares);

    let noise = normal(schema.noise_std)?;
    let art_noise = normal(schema.artifact_std)?;
    let d = schema.d_raw;
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut boundaries = Vec::new();
    let mut action_runs = Vec::new();
    let mut artifacts = Vec::new();

    for (&phase, &len) in present.iter().zip(&lengths) {
        let spec = &schema.phases[phase];
        let start = labels.len();
        let end = start + len;
        boundaries.push(Segment { phase, start, end });
        let mut t = start;
        while t < end {
            let action = spec.actions[rng.random_range(0..spec.actions.len())];
            let a = &schema.actions[action];
            let dur = rng.random_range(a.min_len..=a.max_len);
            let stop = (t + dur).min(end);
            action_runs.push(ActionRun {
                action,
                start: t,
                end: stop,
                truncated: t + dur > end,
            });
            for _ in t..stop {
                for c in 0..d {
                    data.push(a.prototype[c] + spec.bias[c] + noise.sample(&mut rng));
                }
                labels.push(phase);
            }
            t = stop;
        }
        if rng.random::<f64>() < schema.p_artifact {
            let blen = rng
                .random_range(schema.artifact_len.0..=schema.artifact_len.1)
                .min(len);
            let bstart = start + rng.random_range(0..=len - blen);
            for f in bstart..bstart + blen {
                for c in 0..d {
                    data[f * d + c] = art_noise.sample(&mut rng);
                }
            }
            artifacts.push((bstart, bstart + blen));
        }
    }

    Ok(LabeledSequence {
        features: Tensor::matrix(total, d, data)?,
        labels,
        boundaries,
        num_phases: schema.num_phases(),
        seed,
        action_runs,
        artifacts,
    })
}

/// Splits `total` into integer parts proportional to `shares`, each at least 1.
fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let n = shares.len();
    let sum: f64 = shares.iter().sum();
    let spare = total - n;
    let exact: Vec<f64> = shares.iter().map(|s| s / sum * spare as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - parts.iter().sum::<usize>();
    // largest remainders first, earliest phase on ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in &order {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts.iter().map(|p| p + 1).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

/// Video seeds for a dataset: consecutive offsets from a master-derived base,
/// so every video in the three splits gets a distinct seed.
pub fn split_seeds(master: u64, n_train: usize, n_val: usize, n_test: usize) -> [Vec<u64>; 3] {
    let base = master.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let seed = |i: usize| base.wrapping_add(i as u64);
    [
        (0..n_train).map(seed).collect(),
        (n_train..n_train + n_val).map(seed).collect(),
        (n_train + n_val..n_train + n_val + n_test).map(seed).collect(),
    ]
}

pub fn make_dataset(
    schema: &WorkflowSchema,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    length_range: (usize, usize),
) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one video".into()));
    }
    let [tr, va, te] = split_seeds(seed, n_train, n_val, n_test);
    debug_assert_eq!(
        tr.iter().chain(&va).chain(&te).collect::<HashSet<_>>().len(),
        n_train + n_val + n_test
    );
    let gen = |seeds: &[u64]| -> Result<Vec<LabeledSequence>> {
        seeds.iter().map(|&s| generate(schema, s, length_range)).collect()
    };
    Ok(Dataset {
        train: gen(&tr)?,
        val: gen(&va)?,
        test: gen(&te)?,
    })
}
