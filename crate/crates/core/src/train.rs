//! Three-stage training.
//!
//! 1. Pretrain the clip encoder and short head on clips alone, then encode every
//!    training and validation video into a frozen memory bank.
//! 2. Train the full model end to end against the frozen banks. The encoder
//!    starts from stage 1; the long-range parts start from random.
//! 3. Fine-tune on training plus validation videos at constant rates.
//!
//! Stages 1 and 2 divide every learning rate by `decay_factor` when the
//! validation loss plateaus.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eval, Mode, Tape};
use crate::bank::{build_offline, BankWindow, MemoryBank};
use crate::encoder::Clip;
use crate::error::{Error, Result};
use crate::model::{forward, short_range_forward, Model, ModelConfig, WindowRef};
use crate::params::{Group, ParamId, ParamStore};
use crate::synth::LabeledSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Train, Stage::Finetune];

    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::Train => 2,
            Stage::Finetune => 3,
        }
    }

    fn uses_plateau(self) -> bool {
        self != Stage::Finetune
    }
}

/// Stage-1 rates: per-frame network and recurrent cell (the short head shares
/// the recurrent rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRates {
    pub backbone: f64,
    pub recurrent: f64,
}

/// Stage-2/3 rates: the pretrained encoder and everything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineRates {
    pub encoder: f64,
    pub others: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clips per batch.
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    /// Multiplies every configured rate. The configured rates keep their
    /// relative sizes; the scale adapts them to the toy encoder.
    pub lr_scale: f64,
    pub stage1_lr: PretrainRates,
    pub fine_lr: FineRates,
    /// Iterations between validation-loss evaluations.
    pub eval_every: usize,
    pub patience: usize,
    /// A validation loss counts as an improvement only if it beats the best
    /// so far by more than this.
    pub plateau_threshold: f64,
    pub decay_factor: f64,
    /// Size of the fixed validation subsample used for the plateau check.
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 5e-4,
            stage1_iters: 300,
            stage2_iters: 400,
            stage3_iters: 100,
            lr_scale: 2000.0,
            stage1_lr: PretrainRates {
                backbone: 5e-6,
                recurrent: 5e-5,
            },
            fine_lr: FineRates {
                encoder: 5e-7,
                others: 5e-6,
            },
            eval_every: 50,
            patience: 3,
            plateau_threshold: 1e-4,
            decay_factor: 10.0,
            val_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.stage1_lr.backbone,
            self.stage1_lr.recurrent,
            self.fine_lr.encoder,
            self.fine_lr.others,
            self.lr_scale,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.patience == 0 || self.eval_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "patience, eval_every and batch_size must be >= 1".into(),
            ));
        }
        if self.decay_factor <= 1.0 {
            return Err(Error::Config("decay factor must exceed 1".into()));
        }
        Ok(())
    }

    pub fn iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.stage1_iters,
            Stage::Train => self.stage2_iters,
            Stage::Finetune => self.stage3_iters,
        }
    }

    /// Initial per-group rates of a stage. Groups a stage does not train get 0.
    pub fn initial_rates(&self, stage: Stage) -> GroupRates {
        let s = self.lr_scale;
        let mut r = GroupRates::default();
        match stage {
            Stage::Pretrain => {
                r.set(Group::Frame, s * self.stage1_lr.backbone);
                r.set(Group::Recurrent, s * self.stage1_lr.recurrent);
                r.set(Group::ShortHead, s * self.stage1_lr.recurrent);
            }
            Stage::Train | Stage::Finetune => {
                for g in Group::ALL {
                    let base = if g.is_encoder() {
                        self.fine_lr.encoder
                    } else {
                        self.fine_lr.others
                    };
                    r.set(g, s * base);
                }
            }
        }
        r
    }
}

/// One learning rate per parameter group, indexed by [`Group::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupRates(pub [f64; 6]);

impl GroupRates {
    pub fn get(&self, g: Group) -> f64 {
        self.0[g.index()]
    }

    pub fn set(&mut self, g: Group, lr: f64) {
        self.0[g.index()] = lr;
    }

    pub fn divide(&mut self, factor: f64) {
        for r in &mut self.0 {
            *r /= factor;
        }
    }

    pub fn by_name(&self) -> BTreeMap<String, f64> {
        Group::ALL
            .iter()
            .map(|&g| (g.name().to_string(), self.get(g)))
            .collect()
    }
}

/// `v <- momentum * v + (grad + wd * param)`, then `param <- param - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim("sgd_step", param.shape(), grad.shape()));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Applies one SGD step to every parameter that has a gradient and a positive
/// rate. Non-finite gradients abort before any parameter changes.
pub fn apply_gradients(
    store: &mut ParamStore,
    velocity: &mut [Tensor],
    grads: &HashMap<ParamId, Tensor>,
    rates: &GroupRates,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    for &id in &ids {
        if !grads[&id].all_finite() {
            let p = store.param(id);
            return Err(Error::Numeric(format!(
                "non-finite gradient in group {} (parameter {})",
                p.group, p.name
            )));
        }
    }
    for id in ids {
        let lr = rates.get(store.param(id).group);
        if lr <= 0.0 {
            continue;
        }
        sgd_step(
            store.get_mut(id),
            &grads[&id],
            &mut velocity[id.0],
            lr,
            momentum,
            weight_decay,
        )?;
    }
    Ok(())
}

/// Divides the learning rate after `patience` consecutive evaluations without
/// an improvement larger than `threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub stagnant: usize,
    pub decays: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, threshold: f64) -> Self {
        PlateauScheduler {
            patience,
            threshold,
            best: None,
            stagnant: 0,
            decays: 0,
        }
    }

    /// Records a validation loss; returns true when the rate should drop now.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(best) if loss >= best - self.threshold => {
                self.stagnant += 1;
                if self.stagnant >= self.patience {
                    self.stagnant = 0;
                    self.decays += 1;
                    return true;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stagnant = 0;
            }
        }
        false
    }
}

/// A training target: frame `t` of video `video`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub video: usize,
    pub t: usize,
    pub label: usize,
}

/// `n` frames drawn uniformly from all frames of all videos.
pub fn sample_batch<R: Rng + ?Sized>(
    videos: &[LabeledSequence],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let mut ends = Vec::with_capacity(videos.len());
    let mut total = 0;
    for v in videos {
        total += v.len();
        ends.push(total);
    }
    if total == 0 {
        return Err(Error::Contract("cannot sample from an empty training set".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random_range(0..total);
            let video = ends.partition_point(|&e| e <= u);
            let t = u - (ends[video] - videos[video].len());
            Sample {
                video,
                t,
                label: videos[video].labels[t],
            }
        })
        .collect())
}

/// Training data for one stage. Banks are indexed like the videos.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [LabeledSequence],
    pub train_banks: &'a [MemoryBank],
    pub val: &'a [LabeledSequence],
    pub val_banks: &'a [MemoryBank],
}

/// Mean cross-entropy over `samples`. Stage 1 always takes the clip-only path.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<B: Backend>(
    b: &mut B,
    model: &Model,
    stage: Stage,
    videos: &[LabeledSequence],
    banks: &[MemoryBank],
    samples: &[Sample],
    mode: Mode,
    rng: &mut dyn rand::RngCore,
) -> Result<B::T> {
    let clip_len = model.config.clip_len;
    let clips: Vec<Tensor> = samples
        .iter()
        .map(|s| Clip::from_sequence(&videos[s.video], s.t, clip_len).map(|c| c.frames))
        .collect::<Result<_>>()?;
    let clip_refs: Vec<&Tensor> = clips.iter().collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();

    let logits = if stage == Stage::Pretrain || !model.uses_bank() {
        short_range_forward(b, model, &clip_refs)?
    } else {
        if banks.len() != videos.len() {
            return Err(Error::Contract(format!(
                "{} banks for {} videos",
                banks.len(),
                videos.len()
            )));
        }
        let windows: Vec<BankWindow> = samples
            .iter()
            .map(|s| banks[s.video].window(s.t, model.config.bank_len))
            .collect::<Result<_>>()?;
        let refs: Vec<WindowRef<'_>> = windows.iter().map(WindowRef::from).collect();
        forward(b, model, &clip_refs, &refs, mode, rng)?.logits
    };
    b.cross_entropy(&logits, &targets)
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode mean loss over `samples`.
pub fn evaluate_loss(
    model: &Model,
    stage: Stage,
    videos: &[LabeledSequence],
    banks: &[MemoryBank],
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut e = Eval::new(&model.store);
        let loss = batch_loss(&mut e, model, stage, videos, banks, chunk, Mode::Eval, &mut rng)?;
        total += loss.item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub iteration: usize,
    pub loss: f64,
    pub lr: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub decayed: bool,
}

/// Everything besides parameters that determines the rest of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub iteration: usize,
    pub rates: GroupRates,
    pub scheduler: PlateauScheduler,
    pub val_samples: Vec<Sample>,
    pub rng: ChaCha8Rng,
}

fn stage_rng(seed: u64, stage: Stage, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * 16 + stage.number() as u64);
    rng
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainState,
    velocity: Vec<Tensor>,
}

impl Trainer {
    /// Fresh optimizer state for `stage`. Randomness depends on `seed` and the
    /// stage only, never on the model variant.
    pub fn new(
        model: Model,
        config: TrainConfig,
        stage: Stage,
        seed: u64,
        val: &[LabeledSequence],
    ) -> Result<Self> {
        config.validate()?;
        let val_samples = if stage.uses_plateau() && !val.is_empty() {
            sample_batch(val, config.val_samples, &mut stage_rng(seed, stage, 1))?
        } else {
            Vec::new()
        };
        let velocity = model
            .store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        let state = TrainState {
            stage,
            iteration: 0,
            rates: config.initial_rates(stage),
            scheduler: PlateauScheduler::new(config.patience, config.plateau_threshold),
            val_samples,
            rng: stage_rng(seed, stage, 0),
        };
        Ok(Trainer {
            model,
            config,
            state,
            velocity,
        })
    }

    pub fn total_iterations(&self) -> usize {
        self.config.iterations(self.state.stage)
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.total_iterations()
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, data: &StageData<'_>) -> Result<LogRecord> {
        let stage = self.state.stage;
        let samples = sample_batch(data.train, self.config.batch_size, &mut self.state.rng)?;
        let (loss, grads) = {
            let mut tape = Tape::new(&self.model.store);
            let loss = batch_loss(
                &mut tape,
                &self.model,
                stage,
                data.train,
                data.train_banks,
                &samples,
                Mode::Train,
                &mut self.state.rng,
            )?;
            tape.backward(&loss)?;
            (tape.graph().value(loss).item(), tape.param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {loss} at stage {} iteration {}",
                stage.number(),
                self.state.iteration
            )));
        }
        let lr = self.state.rates.by_name();
        apply_gradients(
            &mut self.model.store,
            &mut self.velocity,
            &grads,
            &self.state.rates,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        self.state.iteration += 1;

        let mut val_loss = None;
        let mut decayed = false;
        if stage.uses_plateau()
            && !self.state.val_samples.is_empty()
            && self.state.iteration.is_multiple_of(self.config.eval_every)
        {
            let v = evaluate_loss(
                &self.model,
                stage,
                data.val,
                data.val_banks,
                &self.state.val_samples,
            )?;
            if self.state.scheduler.observe(v) {
                self.state.rates.divide(self.config.decay_factor);
                decayed = true;
            }
            val_loss = Some(v);
        }
        Ok(LogRecord {
            stage: stage.number(),
            iteration: self.state.iteration,
            loss,
            lr,
            val_loss,
            decayed,
        })
    }

    /// Steps until iteration `until` (capped at the stage length).
    pub fn run_until(
        &mut self,
        data: &StageData<'_>,
        until: usize,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.total_iterations());
        while self.state.iteration < until {
            let rec = self.step(data)?;
            log(&rec)?;
        }
        Ok(())
    }

    pub fn run(
        &mut self,
        data: &StageData<'_>,
        log: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        self.run_until(data, usize::MAX, log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.config.clone(),
            state: self.state.clone(),
            params: self.model.store.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.to_model()?;
        Ok(Trainer {
            model,
            config: ckpt.train,
            state: ckpt.state,
            velocity: ckpt.velocity,
        })
    }
}

/// Parameters, optimizer momentum and the training state at one point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: ParamStore,
    pub velocity: Vec<Tensor>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TMRC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    params: Vec<ParamEntry>,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    /// Layout: magic, `u16` version, `u64` header length, JSON header, then
    /// every parameter and every momentum buffer as little-endian `f64`, in
    /// header order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, p) in self.params.iter() {
            write_f64s(w, p.value.data())?;
        }
        for v in &self.velocity {
            write_f64s(w, v.data())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;

        let mut params = ParamStore::new();
        for e in &header.params {
            let n = e.shape.iter().product();
            params.add(e.name.clone(), e.group, Tensor::new(e.shape.clone(), read_f64s(r, n)?)?);
        }
        let mut velocity = Vec::with_capacity(header.params.len());
        for e in &header.params {
            let n = e.shape.iter().product();
            velocity.push(Tensor::new(e.shape.clone(), read_f64s(r, n)?)?);
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            state: header.state,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model.clone(), 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

/// Frozen banks for the training and validation videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub train: Vec<MemoryBank>,
    pub val: Vec<MemoryBank>,
}

pub fn build_banks(model: &Model, videos: &[LabeledSequence]) -> Result<Vec<MemoryBank>> {
    videos
        .iter()
        .map(|v| build_offline(&model.store, &model.encoder, v, model.config.clip_len))
        .collect()
}

type LogFn<'a> = &'a mut dyn FnMut(&LogRecord) -> Result<()>;

/// Stage 1. Updates `model` in place and returns the stage checkpoint and the
/// frozen banks built with the trained encoder.
pub fn stage1_pretrain(
    model: &mut Model,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    log: LogFn<'_>,
) -> Result<(Checkpoint, Banks)> {
    let mut trainer = Trainer::new(model.clone(), cfg.clone(), Stage::Pretrain, seed, val)?;
    let data = StageData {
        train,
        train_banks: &[],
        val,
        val_banks: &[],
    };
    trainer.run(&data, log)?;
    *model = trainer.model.clone();
    let banks = Banks {
        train: build_banks(model, train)?,
        val: build_banks(model, val)?,
    };
    Ok((trainer.checkpoint(), banks))
}

fn check_frozen(banks: &[MemoryBank]) -> Result<()> {
    if banks.iter().all(MemoryBank::is_frozen) {
        Ok(())
    } else {
        Err(Error::Contract("training needs frozen memory banks".into()))
    }
}

/// Stage 2: end-to-end training of the full model against frozen banks.
pub fn stage2_train(
    model: &mut Model,
    banks: &Banks,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    log: LogFn<'_>,
) -> Result<Checkpoint> {
    check_frozen(&banks.train)?;
    check_frozen(&banks.val)?;
    let mut trainer = Trainer::new(model.clone(), cfg.clone(), Stage::Train, seed, val)?;
    let data = StageData {
        train,
        train_banks: &banks.train,
        val,
        val_banks: &banks.val,
    };
    trainer.run(&data, log)?;
    *model = trainer.model.clone();
    Ok(trainer.checkpoint())
}

/// Training and validation videos (and banks) as one set.
pub fn merge_sets(
    banks: &Banks,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
) -> (Vec<LabeledSequence>, Vec<MemoryBank>) {
    let videos = train.iter().chain(val).cloned().collect();
    let merged = banks.train.iter().chain(&banks.val).cloned().collect();
    (videos, merged)
}

/// Stage 3: constant-rate fine-tuning on training plus validation videos.
pub fn stage3_finetune(
    model: &mut Model,
    banks: &Banks,
    train: &[LabeledSequence],
    val: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
    log: LogFn<'_>,
) -> Result<Checkpoint> {
    check_frozen(&banks.train)?;
    check_frozen(&banks.val)?;
    let (videos, merged) = merge_sets(banks, train, val);
    let mut trainer = Trainer::new(model.clone(), cfg.clone(), Stage::Finetune, seed, &[])?;
    let data = StageData {
        train: &videos,
        train_banks: &merged,
        val: &[],
        val_banks: &[],
    };
    trainer.run(&data, log)?;
    *model = trainer.model.clone();
    Ok(trainer.checkpoint())
}
