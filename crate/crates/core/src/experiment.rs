//! Experiment configuration, the end-to-end pipeline and ablation sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{smooth_moving_average, MetricsReport};
use crate::model::{AblationMode, Fashion, Model, ModelConfig};
use crate::params::Group;
use crate::stream::{argmax_labels, offline_probs};
use crate::synth::{make_dataset, Dataset, LabeledSequence, SchemaConfig, WorkflowSchema};
use crate::train::{
    build_banks, merge_sets, Banks, Checkpoint, LogRecord, Stage, StageData, TrainConfig, Trainer,
};
use crate::tvl::Fusion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 24,
            n_val: 6,
            n_test: 10,
            min_len: 150,
            max_len: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Causal moving-average window over probabilities; 1 disables smoothing.
    pub smoothing_window: usize,
    /// Number of test videos that get a ribbon figure.
    pub ribbons: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            smoothing_window: 1,
            ribbons: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Baseline, bank only, bank with weighted average, full model.
    Modes,
    /// Bank-only model at L = 0, 10, 20, 30, 40.
    Length,
    /// Incorporation fashion x kernel set x fusion for the full model.
    Incorporation,
    /// The five runs the acceptance checks need.
    Acceptance,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "modes" => Ok(Grid::Modes),
            "length" => Ok(Grid::Length),
            "incorporation" => Ok(Grid::Incorporation),
            "acceptance" => Ok(Grid::Acceptance),
            _ => Err(Error::Config(format!("unknown ablation grid {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub grid: Grid,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3, 4, 5],
            grid: Grid::Acceptance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub schema: SchemaConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            schema: SchemaConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_raw != self.schema.d_raw || self.model.num_phases != self.schema.num_phases
        {
            return Err(Error::Config(format!(
                "model expects {} features / {} phases but the schema has {} / {}",
                self.model.d_raw, self.model.num_phases, self.schema.d_raw, self.schema.num_phases
            )));
        }
        if self.data.min_len > self.data.max_len {
            return Err(Error::Config("data.min_len exceeds data.max_len".into()));
        }
        if self.eval.smoothing_window.is_multiple_of(2) {
            return Err(Error::Config("eval.smoothing_window must be odd".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn schema(&self) -> Result<WorkflowSchema> {
        WorkflowSchema::from_config(&self.schema)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        make_dataset(
            &self.schema()?,
            d.n_train,
            d.n_val,
            d.n_test,
            self.seed,
            (d.min_len, d.max_len),
        )
    }

    /// Same experiment with another master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            ..self.clone()
        }
    }
}

type LogFn<'a> = Box<dyn FnMut(&LogRecord) -> Result<()> + 'a>;
type CheckpointFn<'a> = Box<dyn FnMut(&Checkpoint) -> Result<()> + 'a>;

/// Runs the rest of a stage, reporting a checkpoint every `every` iterations
/// (0: only at the end) and always at the end.
fn run_stage(
    trainer: &mut Trainer,
    data: &StageData<'_>,
    hooks: &mut Hooks<'_>,
) -> Result<Checkpoint> {
    let every = hooks.checkpoint_every;
    while !trainer.is_done() {
        let rec = trainer.step(data)?;
        (hooks.log)(&rec)?;
        if every > 0 && trainer.state.iteration.is_multiple_of(every) && !trainer.is_done() {
            (hooks.on_checkpoint)(&trainer.checkpoint())?;
        }
    }
    let ckpt = trainer.checkpoint();
    (hooks.on_checkpoint)(&ckpt)?;
    Ok(ckpt)
}

/// Output of the three training stages.
pub struct TrainedRun {
    pub model: Model,
    pub banks: Banks,
    /// End-of-stage checkpoints, in stage order.
    pub checkpoints: Vec<Checkpoint>,
}

/// Where to pick up an interrupted run.
pub struct Resume {
    pub checkpoint: Checkpoint,
    /// Banks from stage 1; required when resuming stage 2 or 3.
    pub banks: Option<Banks>,
}

/// Callbacks for log records and checkpoints.
pub struct Hooks<'a> {
    pub log: LogFn<'a>,
    pub on_checkpoint: CheckpointFn<'a>,
    pub checkpoint_every: usize,
}

impl Hooks<'_> {
    pub fn silent() -> Hooks<'static> {
        Hooks {
            log: Box::new(|_| Ok(())),
            on_checkpoint: Box::new(|_| Ok(())),
            checkpoint_every: 0,
        }
    }
}

/// Stage 1 only: returns the pretrained model, its checkpoint and the banks.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    hooks: &mut Hooks<'_>,
) -> Result<(Model, Checkpoint, Banks)> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt)?,
        None => Trainer::new(
            Model::new(cfg.model.clone(), cfg.seed)?,
            cfg.train.clone(),
            Stage::Pretrain,
            cfg.seed,
            &data.val,
        )?,
    };
    let stage_data = StageData {
        train: &data.train,
        train_banks: &[],
        val: &data.val,
        val_banks: &[],
    };
    let ckpt = run_stage(
        &mut trainer,
        &stage_data,
        hooks,
    )?;
    let banks = Banks {
        train: build_banks(&trainer.model, &data.train)?,
        val: build_banks(&trainer.model, &data.val)?,
    };
    Ok((trainer.model, ckpt, banks))
}

/// Stages 2 and 3 for `cfg.model`, starting from a stage-1 encoder. The
/// stage-1 model may have been built for another variant; only its encoder
/// and short head are used.
pub fn finish_training(
    cfg: &ExperimentConfig,
    data: &Dataset,
    stage1: &Model,
    banks: &Banks,
    resume: Option<Checkpoint>,
    hooks: &mut Hooks<'_>,
) -> Result<(Model, Vec<Checkpoint>)> {
    let mut checkpoints = Vec::new();
    let resume_stage = resume.as_ref().map(|c| c.state.stage);
    let mut model = if resume_stage == Some(Stage::Finetune) {
        None
    } else {
        let mut trainer = match resume {
            Some(ref ckpt) if ckpt.state.stage == Stage::Train => {
                Trainer::from_checkpoint(ckpt.clone())?
            }
            _ => {
                let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
                model.store.copy_from(
                    &stage1.store,
                    &[Group::Frame, Group::Recurrent, Group::ShortHead],
                )?;
                Trainer::new(model, cfg.train.clone(), Stage::Train, cfg.seed, &data.val)?
            }
        };
        let stage_data = StageData {
            train: &data.train,
            train_banks: &banks.train,
            val: &data.val,
            val_banks: &banks.val,
        };
        checkpoints.push(run_stage(
            &mut trainer,
            &stage_data,
            hooks,
        )?);
        Some(trainer.model)
    };

    let mut trainer = match (model.take(), resume) {
        (Some(m), _) => Trainer::new(m, cfg.train.clone(), Stage::Finetune, cfg.seed, &[])?,
        (None, Some(ckpt)) => Trainer::from_checkpoint(ckpt)?,
        (None, None) => unreachable!("stage 3 resumes only from a checkpoint"),
    };
    let (videos, merged) = merge_sets(banks, &data.train, &data.val);
    let stage_data = StageData {
        train: &videos,
        train_banks: &merged,
        val: &[],
        val_banks: &[],
    };
    checkpoints.push(run_stage(
        &mut trainer,
        &stage_data,
        hooks,
    )?);
    Ok((trainer.model, checkpoints))
}

/// All three stages, optionally resuming from a checkpoint of any stage.
pub fn train_pipeline(
    cfg: &ExperimentConfig,
    data: &Dataset,
    resume: Option<Resume>,
    hooks: &mut Hooks<'_>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    match resume {
        Some(Resume {
            checkpoint,
            banks: Some(banks),
        }) if checkpoint.state.stage != Stage::Pretrain => {
            let stage1 = checkpoint.to_model()?;
            let (model, checkpoints) =
                finish_training(cfg, data, &stage1, &banks, Some(checkpoint), hooks)?;
            Ok(TrainedRun {
                model,
                banks,
                checkpoints,
            })
        }
        Some(Resume { checkpoint, .. }) if checkpoint.state.stage != Stage::Pretrain => Err(
            Error::Contract("resuming stage 2 or 3 needs the stage-1 banks".into()),
        ),
        resume => {
            let (stage1, ckpt1, banks) =
                pretrain(cfg, data, resume.map(|r| r.checkpoint), hooks)?;
            let (model, rest) = finish_training(cfg, data, &stage1, &banks, None, hooks)?;
            let mut checkpoints = vec![ckpt1];
            checkpoints.extend(rest);
            Ok(TrainedRun {
                model,
                banks,
                checkpoints,
            })
        }
    }
}

/// Predictions and scores on a set of videos.
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Vec<usize>>,
}

pub fn run_description(model: &ModelConfig, seed: u64) -> BTreeMap<String, String> {
    let mut run = BTreeMap::new();
    run.insert("mode".into(), model.effective_mode().name().into());
    run.insert("bank_len".into(), model.bank_len.to_string());
    run.insert("fashion".into(), format!("{:?}", model.fashion));
    run.insert("kernels".into(), format!("{:?}", model.kernels));
    run.insert("fusion".into(), format!("{:?}", model.fusion).to_lowercase());
    run.insert("seed".into(), seed.to_string());
    run
}

/// Offline inference over `videos` followed by scoring.
pub fn evaluate(
    model: &Model,
    videos: &[LabeledSequence],
    eval: &EvalConfig,
    run: BTreeMap<String, String>,
) -> Result<Evaluation> {
    let mut items = Vec::with_capacity(videos.len());
    let mut predictions = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let probs = offline_probs(model, v)?;
        let pred = if eval.smoothing_window > 1 {
            smooth_moving_average(&probs, eval.smoothing_window)?
        } else {
            argmax_labels(&probs)
        };
        items.push((format!("test-{i:03}"), v.labels.clone(), pred.clone()));
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: MetricsReport::build(&items, model.config.num_phases, run)?,
        predictions,
    })
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: AblationMode,
    pub bank_len: usize,
    pub fashion: Fashion,
    pub kernels: Vec<usize>,
    pub fusion: Fusion,
}

impl Variant {
    fn new(name: impl Into<String>, mode: AblationMode, bank_len: usize) -> Self {
        Variant {
            name: name.into(),
            mode,
            bank_len,
            fashion: Fashion::I2,
            kernels: crate::tvl::DEFAULT_KERNELS.to_vec(),
            fusion: Fusion::Max,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            bank_len: self.bank_len,
            fashion: self.fashion,
            kernels: self.kernels.clone(),
            fusion: self.fusion,
            ..base.clone()
        }
    }
}

pub const LENGTHS: [usize; 5] = [0, 10, 20, 30, 40];

pub fn grid_variants(grid: Grid) -> Vec<Variant> {
    use AblationMode::*;
    match grid {
        Grid::Modes => vec![
            Variant::new("baseline-sr", BaselineSr, 0),
            Variant::new("tmrnet-minus", TmrnetMinus, 30),
            Variant::new("tmrnet-prime", TmrnetPrime, 30),
            Variant::new("tmrnet", Tmrnet, 30),
        ],
        Grid::Length => LENGTHS
            .iter()
            .map(|&l| Variant::new(format!("L={l}"), TmrnetMinus, l))
            .collect(),
        Grid::Incorporation => {
            let mut out = Vec::new();
            for fashion in [Fashion::I1, Fashion::I2] {
                for kernels in [vec![3], vec![5], vec![7], vec![3, 5, 7]] {
                    for fusion in [Fusion::Ave, Fusion::Max] {
                        let ks = kernels.iter().map(|k| k.to_string()).collect::<Vec<_>>();
                        let mut v = Variant::new(
                            format!("{fashion:?} k={} {fusion:?}", ks.join("/")),
                            Tmrnet,
                            30,
                        );
                        v.fashion = fashion;
                        v.kernels = kernels.clone();
                        v.fusion = fusion;
                        out.push(v);
                    }
                }
            }
            out
        }
        Grid::Acceptance => vec![
            Variant::new("baseline-sr", BaselineSr, 0),
            Variant::new("tmrnet-minus L=10", TmrnetMinus, 10),
            Variant::new("tmrnet-minus L=20", TmrnetMinus, 20),
            Variant::new("tmrnet-minus L=30", TmrnetMinus, 30),
            Variant::new("tmrnet L=30", Tmrnet, 30),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub results: Vec<SeedResult>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_of(&self, f: fn(&SeedResult) -> f64) -> f64 {
        median(&self.results.iter().map(f).collect::<Vec<_>>())
    }

    pub fn median_jaccard(&self) -> f64 {
        self.median_of(|r| r.jaccard)
    }

    pub fn median_accuracy(&self) -> f64 {
        self.median_of(|r| r.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    /// Median test metrics per variant, in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| variant | L | AC | PR | RE | JA | JA per seed |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let per_seed: Vec<String> = r
                .results
                .iter()
                .map(|x| format!("{:.1}", 100.0 * x.jaccard))
                .collect();
            let _ = writeln!(
                s,
                "| {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {} |",
                r.variant.name,
                r.variant.bank_len,
                100.0 * r.median_accuracy(),
                100.0 * r.median_of(|x| x.precision),
                100.0 * r.median_of(|x| x.recall),
                100.0 * r.median_jaccard(),
                per_seed.join(" ")
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "mode", "bank_len", "seed", "AC", "PR", "RE", "JA"])?;
        for r in &self.rows {
            for x in &r.results {
                w.write_record([
                    r.variant.name.clone(),
                    r.variant.mode.name().to_string(),
                    r.variant.bank_len.to_string(),
                    x.seed.to_string(),
                    x.accuracy.to_string(),
                    x.precision.to_string(),
                    x.recall.to_string(),
                    x.jaccard.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Trains and evaluates every variant for every seed. Stage 1 runs once per
/// seed and is shared by all variants of that seed.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    cfg.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            variant: v.clone(),
            results: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let scfg = cfg.with_seed(seed);
        let data = scfg.dataset()?;
        let (stage1, _, banks) = pretrain(&scfg, &data, None, &mut Hooks::silent())?;
        progress(&format!("seed {seed}: stage 1 done"));
        for row in rows.iter_mut() {
            let vcfg = ExperimentConfig {
                model: row.variant.apply(&scfg.model),
                ..scfg.clone()
            };
            vcfg.validate()?;
            let (model, _) =
                finish_training(&vcfg, &data, &stage1, &banks, None, &mut Hooks::silent())?;
            let ev = evaluate(
                &model,
                &data.test,
                &vcfg.eval,
                run_description(&vcfg.model, seed),
            )?;
            let a = ev.report.aggregate;
            row.results.push(SeedResult {
                seed,
                accuracy: a.accuracy.mean,
                precision: a.precision.mean,
                recall: a.recall.mean,
                jaccard: a.jaccard.mean,
            });
            progress(&format!(
                "seed {seed}: {} JA {:.1} AC {:.1}",
                row.variant.name,
                100.0 * a.jaccard.mean,
                100.0 * a.accuracy.mean
            ));
        }
    }
    Ok(AblationTable {
        version: 1,
        seeds: seeds.to_vec(),
        rows,
    })
}
