//! Full recognition model and its ablation variants.
//!
//! | mode           | context | temporal variation | operator |
//! |----------------|---------|--------------------|----------|
//! | `baseline-sr`  | clip    | -                  | -        |
//! | `tmrnet-minus` | bank    | -                  | non-local|
//! | `tmrnet-prime` | bank    | yes                | weighted average |
//! | `tmrnet`       | bank    | yes                | non-local|
//!
//! A bank length of 0 always means the clip-only path.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eval, Mode};
use crate::bank::BankWindow;
use crate::encoder::{encode_clips, EncoderParams};
use crate::error::{Error, Result};
use crate::nonlocal::{attend, attend_wave, classify, head_logits, HeadParams, NloParams, WaveParams};
use crate::ops;
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;
use crate::tvl::{self, Fusion, TvlParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    BaselineSr,
    TmrnetMinus,
    TmrnetPrime,
    Tmrnet,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::BaselineSr,
        AblationMode::TmrnetMinus,
        AblationMode::TmrnetPrime,
        AblationMode::Tmrnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::BaselineSr => "baseline-sr",
            AblationMode::TmrnetMinus => "tmrnet-minus",
            AblationMode::TmrnetPrime => "tmrnet-prime",
            AblationMode::Tmrnet => "tmrnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }

    fn uses_tvl(self) -> bool {
        matches!(self, AblationMode::TmrnetPrime | AblationMode::Tmrnet)
    }
}

/// How multi-scale kernels are combined with the non-local operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fashion {
    /// One non-local operator per branch, outputs fused afterwards.
    I1,
    /// Enhance the window first, then a single non-local operator.
    I2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_raw: usize,
    pub d: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub num_phases: usize,
    /// Frames per encoder clip (`n + 1`).
    pub clip_len: usize,
    /// Bank window length `L`; 0 disables the bank.
    pub bank_len: usize,
    pub mode: AblationMode,
    pub fashion: Fashion,
    pub kernels: Vec<usize>,
    pub fusion: Fusion,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_raw: 16,
            d: 64,
            d_embed: 32,
            d_hidden: 64,
            num_phases: 7,
            clip_len: 10,
            bank_len: 30,
            mode: AblationMode::Tmrnet,
            fashion: Fashion::I2,
            kernels: tvl::DEFAULT_KERNELS.to_vec(),
            fusion: Fusion::Max,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    /// The mode actually run: any mode without a bank is the clip-only path.
    pub fn effective_mode(&self) -> AblationMode {
        if self.bank_len == 0 {
            AblationMode::BaselineSr
        } else {
            self.mode
        }
    }

    pub fn uses_bank(&self) -> bool {
        self.effective_mode() != AblationMode::BaselineSr
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_raw, self.d, self.d_embed, self.d_hidden, self.clip_len]
            .contains(&0)
        {
            return Err(Error::Config("model widths and clip length must be positive".into()));
        }
        if self.num_phases < 2 {
            return Err(Error::Config("need at least two phases".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.kernels.is_empty() {
            return Err(Error::Config("kernel set is empty".into()));
        }
        for &k in &self.kernels {
            ops::check_odd_kernel(k)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operator {
    NonLocal(NloParams),
    PerBranch(Vec<NloParams>),
    Wave(WaveParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRange {
    pub tvl: Option<TvlParams>,
    pub operator: Operator,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub short_head: HeadParams,
    pub long: Option<LongRange>,
}

/// Seeds for the two initialization streams, so the encoder initialization
/// does not depend on which long-range parts exist.
fn init_seeds(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1417);
    (rng.next_u64(), rng.next_u64())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (enc_seed, long_seed) = init_seeds(seed);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(enc_seed);
        let encoder = EncoderParams::init(&mut store, config.d_raw, config.d, &mut rng);
        let short_head = HeadParams::init(
            &mut store,
            "short_head",
            Group::ShortHead,
            config.d,
            config.d_hidden,
            config.num_phases,
            &mut rng,
        );

        let mode = config.effective_mode();
        let long = if mode == AblationMode::BaselineSr {
            None
        } else {
            let rng = &mut ChaCha8Rng::seed_from_u64(long_seed);
            let tvl = if mode.uses_tvl() {
                Some(TvlParams::init(
                    &mut store,
                    "tvl",
                    config.d,
                    &config.kernels,
                    config.fusion,
                    rng,
                )?)
            } else {
                None
            };
            let nlo = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| {
                NloParams::init(store, prefix, config.d, config.d_embed, config.dropout, rng)
            };
            let operator = match (mode, &tvl) {
                (AblationMode::TmrnetPrime, _) => {
                    Operator::Wave(WaveParams::init(&mut store, "wave", config.bank_len))
                }
                (_, Some(t)) if config.fashion == Fashion::I1 && t.num_branches() > 1 => {
                    let ops = (0..t.num_branches())
                        .map(|i| nlo(&mut store, &format!("nl{i}"), rng))
                        .collect::<Result<_>>()?;
                    Operator::PerBranch(ops)
                }
                _ => Operator::NonLocal(nlo(&mut store, "nl", rng)?),
            };
            let head = HeadParams::init(
                &mut store,
                "head",
                Group::Head,
                2 * config.d,
                config.d_hidden,
                config.num_phases,
                rng,
            );
            Some(LongRange {
                tvl,
                operator,
                head,
            })
        };
        Ok(Model {
            config,
            store,
            encoder,
            short_head,
            long,
        })
    }

    pub fn uses_bank(&self) -> bool {
        self.long.is_some()
    }

    /// Installs `params` after checking they match this model's layout.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.store.len(),
                params.len()
            )));
        }
        for ((_, mine), (_, theirs)) in self.store.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.group != theirs.group {
                return Err(Error::Format(format!(
                    "parameter {} does not match {}",
                    theirs.name, mine.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(Error::dim("load_params", mine.value.shape(), theirs.value.shape()));
            }
        }
        self.store = params.clone();
        Ok(())
    }
}

/// A window as the model consumes it: features plus validity mask.
#[derive(Debug, Clone, Copy)]
pub struct WindowRef<'a> {
    pub features: &'a Tensor,
    pub mask: &'a [bool],
}

impl<'a> From<&'a BankWindow> for WindowRef<'a> {
    fn from(w: &'a BankWindow) -> Self {
        WindowRef {
            features: &w.features,
            mask: &w.mask,
        }
    }
}

pub struct Forward<T> {
    /// `[N x C]` phase logits.
    pub logits: T,
    /// Per-sample attention weights (`[k x ℓ]`, one row per operator), when a
    /// bank operator ran.
    pub attention: Vec<Option<T>>,
}

/// Logits for the long-range path given current features `c: [N x d]`.
pub fn long_range_logits<B: Backend>(
    b: &mut B,
    long: &LongRange,
    c: &B::T,
    windows: &[WindowRef<'_>],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Forward<B::T>> {
    let n = b.value(c).rows();
    if windows.len() != n {
        return Err(Error::dim("long_range_logits", &[n], &[windows.len()]));
    }
    let mut rs = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    for (i, w) in windows.iter().enumerate() {
        let ci = if n == 1 { c.clone() } else { b.slice_rows(c, i, i + 1)? };
        let win = b.constant(w.features.clone());
        let (r, att) = match (&long.tvl, &long.operator) {
            (Some(t), Operator::PerBranch(ops)) => {
                let outs = tvl::branches(b, t, &win, w.mask)?;
                let mut r_parts = Vec::with_capacity(ops.len());
                let mut atts = Vec::with_capacity(ops.len());
                for (op, out) in ops.iter().zip(&outs) {
                    let (r, a) = attend(b, op, &ci, out, w.mask, mode, rng)?;
                    r_parts.push(r);
                    atts.push(a);
                }
                let r = tvl::fuse(b, t.fusion, &r_parts)?;
                (r, b.concat_rows(&atts)?)
            }
            (tvl_params, op) => {
                let ltil = match tvl_params {
                    Some(t) => tvl::apply(b, t, &win, w.mask)?,
                    None => win,
                };
                match op {
                    Operator::NonLocal(p) => attend(b, p, &ci, &ltil, w.mask, mode, rng)?,
                    Operator::Wave(p) => attend_wave(b, p, &ltil, w.mask)?,
                    Operator::PerBranch(_) => {
                        return Err(Error::Contract(
                            "per-branch operators need a temporal variation layer".into(),
                        ))
                    }
                }
            }
        };
        rs.push(r);
        attention.push(Some(att));
    }
    let r = if n == 1 { rs.pop().expect("one row") } else { b.concat_rows(&rs)? };
    let logits = classify(b, &long.head, &r, c)?;
    Ok(Forward { logits, attention })
}

/// Full forward pass from raw clips (and bank windows when the model uses them).
pub fn forward<B: Backend>(
    b: &mut B,
    model: &Model,
    clips: &[&Tensor],
    windows: &[WindowRef<'_>],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Forward<B::T>> {
    let c = encode_clips(b, &model.encoder, clips)?;
    features_forward(b, model, &c, windows, mode, rng)
}

/// Clip-only logits through the short head, whatever the model's mode.
pub fn short_range_forward<B: Backend>(
    b: &mut B,
    model: &Model,
    clips: &[&Tensor],
) -> Result<B::T> {
    let c = encode_clips(b, &model.encoder, clips)?;
    head_logits(b, &model.short_head, &c)
}

/// Forward pass from already encoded current features `c: [N x d]`.
pub fn features_forward<B: Backend>(
    b: &mut B,
    model: &Model,
    c: &B::T,
    windows: &[WindowRef<'_>],
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Forward<B::T>> {
    match &model.long {
        None => {
            let n = b.value(c).rows();
            Ok(Forward {
                logits: head_logits(b, &model.short_head, c)?,
                attention: (0..n).map(|_| None).collect(),
            })
        }
        Some(long) => long_range_logits(b, long, c, windows, mode, rng),
    }
}

/// Eval-mode phase probabilities for one frame from its current feature
/// `c_t: [1 x d]` and its bank window. Shared by streaming and offline inference.
pub fn predict_frame(
    model: &Model,
    c: &Tensor,
    window: Option<&BankWindow>,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut e = Eval::new(&model.store);
    // eval mode draws no random numbers; the generator is never advanced
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let windows: Vec<WindowRef<'_>> = match (model.uses_bank(), window) {
        (true, Some(w)) => vec![w.into()],
        (true, None) => {
            return Err(Error::Contract("model needs a bank window".into()));
        }
        (false, _) => Vec::new(),
    };
    let out = features_forward(&mut e, model, c, &windows, Mode::Eval, &mut rng)?;
    let probs = ops::softmax(&out.logits, 1, None)?;
    Ok((probs, out.attention.into_iter().next().flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tape;
    use crate::bank::MemoryBank;

    fn cfg(mode: AblationMode) -> ModelConfig {
        ModelConfig {
            d: 8,
            d_embed: 4,
            d_hidden: 8,
            num_phases: 4,
            bank_len: 6,
            mode,
            ..ModelConfig::default()
        }
    }

    fn random(rows: usize, d: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_bank_length_builds_the_baseline() {
        let mut c = cfg(AblationMode::Tmrnet);
        c.bank_len = 0;
        let a = Model::new(c, 3).unwrap();
        let b = Model::new(cfg(AblationMode::BaselineSr), 3).unwrap();
        assert!(a.long.is_none());
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn encoder_init_is_shared_across_modes() {
        let a = Model::new(cfg(AblationMode::BaselineSr), 9).unwrap();
        for mode in AblationMode::ALL {
            let m = Model::new(cfg(mode), 9).unwrap();
            for g in [Group::Frame, Group::Recurrent, Group::ShortHead] {
                for id in a.store.group_ids(g) {
                    let name = &a.store.param(id).name;
                    assert_eq!(a.store.get(id), m.store.get(m.store.find(name).unwrap()));
                }
            }
        }
    }

    #[test]
    fn every_mode_runs_forward_and_backward() {
        for fashion in [Fashion::I1, Fashion::I2] {
            for mode in AblationMode::ALL {
                let mut c = cfg(mode);
                c.fashion = fashion;
                let model = Model::new(c, 1).unwrap();
                let bank = MemoryBank::from_features(&random(12, 8, 2), true).unwrap();
                let wins = [bank.window(3, 6).unwrap(), bank.window(11, 6).unwrap()];
                let refs: Vec<WindowRef> = wins.iter().map(|w| w.into()).collect();
                let clip_a = random(10, 16, 3);
                let clip_b = random(4, 16, 4);
                let mut tape = Tape::new(&model.store);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = forward(
                    &mut tape,
                    &model,
                    &[&clip_a, &clip_b],
                    &refs,
                    Mode::Train,
                    &mut rng,
                )
                .unwrap();
                let loss = tape.cross_entropy(&out.logits, &[1, 3]).unwrap();
                tape.backward(&loss).unwrap();
                let grads = tape.param_grads();
                for g in [Group::Frame, Group::Recurrent] {
                    for id in model.store.group_ids(g) {
                        assert!(grads[&id].norm() > 0.0, "{mode:?} {}", model.store.param(id).name);
                    }
                }
                if model.uses_bank() {
                    let nl = model.store.group_ids(Group::NonLocal);
                    assert!(nl.iter().any(|id| grads[id].norm() > 0.0));
                }
            }
        }
    }
}
