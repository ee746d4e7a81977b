use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tmrnet::container::{load_banks, load_dataset, load_sequence, save_banks, save_dataset};
use tmrnet::eval::{ribbon_svg, PredictionSet};
use tmrnet::experiment::{
    evaluate, grid_variants, run_ablation, run_description, train_pipeline, ExperimentConfig,
    Grid, Hooks, Resume,
};
use tmrnet::model::{AblationMode, Fashion};
use tmrnet::stream::{serve, write_frame_record};
use tmrnet::train::{Checkpoint, LogRecord, Stage};
use tmrnet::tvl::Fusion;
use tmrnet::{Error, ErrorKind, Result};

/// Online phase recognition with a long-range memory bank, on synthetic workflows.
#[derive(Parser)]
#[command(name = "tmrnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root directory.
    #[arg(long, global = true, env = "TMRNET_OUT", default_value = "runs")]
    out: PathBuf,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// baseline-sr, tmrnet-minus, tmrnet-prime or tmrnet.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    bank_len: Option<usize>,
    /// i1 or i2.
    #[arg(long, global = true)]
    fashion: Option<String>,
    /// Comma-separated odd kernel sizes, e.g. 3,5,7.
    #[arg(long, global = true)]
    kernels: Option<String>,
    /// ave or max.
    #[arg(long, global = true)]
    fusion: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test dataset.
    Gen,
    /// Run the three training stages.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write a checkpoint every N iterations.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Score a checkpoint on the test split.
    Eval {
        /// Defaults to the final checkpoint under the output root.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score a grid of model variants over several seeds.
    Ablate {
        /// modes, length, incorporation or acceptance.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Serve the frame stream protocol, or record a video into it.
    Stream {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Frame records to read; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Prediction lines to write; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Convert this sequence file into frame records instead of serving.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Draw colour ribbons comparing prediction files.
    Plot {
        /// Prediction files written by `eval`.
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<AblationMode> {
    AblationMode::parse(s)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid {what} {p:?}")))
        })
        .collect()
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.mode {
        cfg.model.mode = parse_mode(m)?;
    }
    if let Some(l) = c.bank_len {
        cfg.model.bank_len = l;
    }
    if let Some(f) = &c.fashion {
        cfg.model.fashion = match f.to_ascii_lowercase().as_str() {
            "i1" => Fashion::I1,
            "i2" => Fashion::I2,
            _ => return Err(Error::Config(format!("unknown fashion {f:?}"))),
        };
    }
    if let Some(k) = &c.kernels {
        cfg.model.kernels = parse_list(k, "kernel size")?;
    }
    if let Some(f) = &c.fusion {
        cfg.model.fusion = match f.to_ascii_lowercase().as_str() {
            "ave" => Fusion::Ave,
            "max" => Fusion::Max,
            _ => return Err(Error::Config(format!("unknown fusion {f:?}"))),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_file(stage: Stage, iteration: Option<usize>) -> String {
    match iteration {
        Some(i) => format!("stage{}-iter{i:06}.ckpt", stage.number()),
        None => format!("stage{}.ckpt", stage.number()),
    }
}

/// Uses the dataset under `out/data` when present, otherwise regenerates it.
fn dataset(cfg: &ExperimentConfig, out: &Path) -> Result<tmrnet::synth::Dataset> {
    let dir = out.join("data");
    if dir.join("manifest.json").exists() {
        info!("loading dataset from {}", dir.display());
        load_dataset(&dir)
    } else {
        cfg.dataset()
    }
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = cfg.dataset()?;
    let dir = out.join("data");
    save_dataset(&dir, &data)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    info!(
        "wrote {} train, {} val, {} test videos to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: usize,
) -> Result<()> {
    let data = dataset(cfg, out)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let resume = match resume {
        Some(p) => {
            let checkpoint = Checkpoint::load(p)?;
            let banks = if checkpoint.state.stage == Stage::Pretrain {
                None
            } else {
                Some(load_banks(&out.join("banks"))?)
            };
            info!(
                "resuming stage {} at iteration {}",
                checkpoint.state.stage.number(),
                checkpoint.state.iteration
            );
            Some(Resume { checkpoint, banks })
        }
        None => None,
    };
    let log_path = out.join("train_log.jsonl");
    let mut log_file = BufWriter::new(if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    });

    let banks_dir = out.join("banks");
    let mut hooks = Hooks {
        log: Box::new(|rec| {
            log_line(&mut log_file, rec)?;
            if rec.iteration % 50 == 0 {
                info!("stage {} iter {} loss {:.4}", rec.stage, rec.iteration, rec.loss);
            }
            Ok(())
        }),
        on_checkpoint: Box::new(|ckpt| {
            let s = &ckpt.state;
            let name = if s.iteration >= ckpt.train.iterations(s.stage) {
                stage_file(s.stage, None)
            } else {
                stage_file(s.stage, Some(s.iteration))
            };
            ckpt.save(&ckpt_dir.join(&name))?;
            info!("wrote {name}");
            Ok(())
        }),
        checkpoint_every,
    };
    let run = train_pipeline(cfg, &data, resume, &mut hooks)?;
    drop(hooks);
    save_banks(&banks_dir, &run.banks)?;
    Ok(())
}

fn log_line(w: &mut impl Write, rec: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn final_checkpoint(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.join("checkpoints").join(stage_file(Stage::Finetune, None)))
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(&final_checkpoint(out, checkpoint))?;
    let model = ckpt.to_model()?;
    let data = dataset(cfg, out)?;
    let ev = evaluate(
        &model,
        &data.test,
        &cfg.eval,
        run_description(&model.config, cfg.seed),
    )?;
    let dir = out.join("eval");
    fs::create_dir_all(dir.join("ribbons"))?;
    ev.report.write_json(&dir.join("metrics.json"))?;
    ev.report.write_csv(&dir.join("metrics.csv"))?;
    let set = PredictionSet {
        version: 1,
        run: ev.report.run.clone(),
        videos: ev.report.videos.iter().map(|v| v.video.clone()).collect(),
        ground_truth: data.test.iter().map(|v| v.labels.clone()).collect(),
        predictions: ev.predictions.clone(),
    };
    set.write_json(&dir.join("predictions.json"))?;
    let name = model.config.effective_mode().name();
    for (i, (v, pred)) in data.test.iter().zip(&ev.predictions).take(cfg.eval.ribbons).enumerate() {
        ribbon_svg(
            &v.labels,
            &[(name, pred)],
            &dir.join("ribbons").join(format!("test-{i:03}.svg")),
        )?;
    }
    let a = ev.report.aggregate;
    println!(
        "AC {:.1} ± {:.1}  PR {:.1} ± {:.1}  RE {:.1} ± {:.1}  JA {:.1} ± {:.1}  ({} videos)",
        100.0 * a.accuracy.mean,
        100.0 * a.accuracy.std,
        100.0 * a.precision.mean,
        100.0 * a.precision.std,
        100.0 * a.recall.mean,
        100.0 * a.recall.std,
        100.0 * a.jaccard.mean,
        100.0 * a.jaccard.std,
        a.videos
    );
    Ok(())
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    grid: Option<String>,
    seeds: Option<String>,
) -> Result<()> {
    let grid = match grid {
        Some(g) => Grid::parse(&g)?,
        None => cfg.ablation.grid,
    };
    let seeds = match seeds {
        Some(s) => parse_list(&s, "seed")?,
        None => cfg.ablation.seeds.clone(),
    };
    let variants = grid_variants(grid);
    let table = run_ablation(cfg, &variants, &seeds, &mut |msg| info!("{msg}"))?;
    let dir = out.join("ablation");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("table.md"), table.to_markdown())?;
    table.write_csv(&dir.join("table.csv"))?;
    table.write_json(&dir.join("table.json"))?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn cmd_stream(
    out: &Path,
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    record: Option<PathBuf>,
) -> Result<()> {
    if let Some(seq_path) = record {
        let seq = load_sequence(&seq_path)?;
        let mut w: Box<dyn Write> = match output {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        };
        for t in 0..seq.len() {
            write_frame_record(&mut w, seq.frame(t))?;
        }
        w.flush()?;
        return Ok(());
    }
    let model = Checkpoint::load(&final_checkpoint(out, checkpoint))?.to_model()?;
    let mut r: Box<dyn Read> = match input {
        Some(p) => Box::new(BufReader::new(File::open(p)?)),
        None => Box::new(BufReader::new(io::stdin().lock())),
    };
    let mut w: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let n = serve(&model, &mut r, &mut w)?;
    info!("streamed {n} frames");
    Ok(())
}

fn cmd_plot(out: &Path, files: &[PathBuf]) -> Result<()> {
    let sets: Vec<PredictionSet> = files
        .iter()
        .map(|p| PredictionSet::read_json(p))
        .collect::<Result<_>>()?;
    let first = &sets[0];
    for s in &sets[1..] {
        if s.ground_truth != first.ground_truth {
            return Err(Error::Format(
                "prediction files cover different ground truth".into(),
            ));
        }
    }
    let names: Vec<String> = sets
        .iter()
        .map(|s| {
            let mode = s.run.get("mode").map(String::as_str).unwrap_or("run");
            match s.run.get("bank_len") {
                Some(l) if mode != "baseline-sr" => format!("{mode} L={l}"),
                _ => mode.to_string(),
            }
        })
        .collect();
    let dir = out.join("plots");
    fs::create_dir_all(&dir)?;
    for (i, video) in first.videos.iter().enumerate() {
        let rows: Vec<(&str, &[usize])> = names
            .iter()
            .zip(&sets)
            .map(|(n, s)| (n.as_str(), s.predictions[i].as_slice()))
            .collect();
        ribbon_svg(&first.ground_truth[i], &rows, &dir.join(format!("{video}.svg")))?;
    }
    info!("wrote {} ribbons to {}", first.videos.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = &cli.common.out;
    fs::create_dir_all(out)?;
    match cli.command {
        None => Err(Error::Config(
            "no command given (gen, train, eval, ablate, stream, plot)".into(),
        )),
        Some(Command::Gen) => cmd_gen(&cfg, out),
        Some(Command::Train {
            resume,
            checkpoint_every,
        }) => cmd_train(&cfg, out, resume.as_deref(), checkpoint_every),
        Some(Command::Eval { checkpoint }) => cmd_eval(&cfg, out, checkpoint),
        Some(Command::Ablate { grid, seeds }) => cmd_ablate(&cfg, out, grid, seeds),
        Some(Command::Stream {
            checkpoint,
            input,
            output,
            record,
        }) => cmd_stream(out, checkpoint, input, output, record),
        Some(Command::Plot { predictions }) => cmd_plot(out, &predictions),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
