use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beampred::config::{scene_preset, RunConfig};
use beampred::model::ModelKind;
use beampred::pipeline;
use beampred::scene::Split;
use beampred::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Beam prediction from vehicle position and multi-view depth images.
#[derive(Parser)]
#[command(name = "beampred", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOverrides {
    /// Training seed (shuffling, dropout, initialization).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset (manifest.json + samples.bin).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Dataset seed (scene layout, lane wander, split).
        #[arg(long)]
        seed: Option<u64>,
        /// Scene preset: default, empty or blockage.
        #[arg(long)]
        scene: Option<String>,
        /// Number of samples when trajectories are generated.
        #[arg(long)]
        samples: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and report test accuracy.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        dataset: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// mlm-bp, dnn-pos, cnn-vis or fusion.
        #[arg(long, default_value = "mlm-bp")]
        model: String,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Checkpoint directory or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        dataset: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot grid: models × training ratios × seeds.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        dataset: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Comma-separated training fractions.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated model names.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Summarize a dataset, checkpoint or tensor file.
    Inspect { path: PathBuf },
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
    }
}

fn print_report(report: &beampred::train::EvalReport) {
    println!(
        "{} on {} ({} samples): top1 {:.4}  top3 {:.4}  loss {:.6}",
        report.model,
        report.split,
        report.n_samples,
        report.top1(),
        report.top3(),
        report.mean_loss
    );
}

fn write_json(path: &Path, value: &beampred::train::EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, seed, scene, samples, force } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(name) = scene {
                cfg.scene = scene_preset(&name)?;
            }
            if let Some(n) = samples {
                cfg.data.samples = n;
                cfg.data.trajectories = None;
            }
            let ds = pipeline::gen_data(&cfg, &out, force)?;
            let c = ds.manifest.counts;
            println!("wrote {} samples to {}", ds.len(), out.display());
            println!("split train {} / val {} / test {}", c[0], c[1], c[2]);
            println!("line of sight {:.4}", ds.manifest.los_fraction);
        }
        Command::Train { common, dataset, out, model, overrides, resume } => {
            let mut cfg = load(&common)?;
            overrides.apply(&mut cfg);
            let kind = ModelKind::parse(&model)?;
            let run = pipeline::train(&cfg, kind, &dataset, &out, resume, progress)?;
            if run.resumed {
                eprintln!("resumed from {}", out.display());
            }
            print_report(&run.report);
        }
        Command::Eval { checkpoint, dataset, split, out } => {
            let report = pipeline::eval(&checkpoint, &dataset, parse_split(&split)?)?;
            print_report(&report);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Fewshot { common, dataset, out, ratios, seeds, models, overrides } => {
            let mut cfg = load(&common)?;
            overrides.apply(&mut cfg);
            if let Some(r) = ratios {
                cfg.fewshot.ratios = r;
            }
            if let Some(s) = seeds {
                cfg.fewshot.seeds = s;
            }
            if let Some(m) = models {
                cfg.fewshot.models = m.iter().map(|n| ModelKind::parse(n)).collect::<Result<_>>()?;
            }
            let report = pipeline::fewshot(&cfg, &dataset, &out, progress)?;
            print!("{}", report.table.to_csv());
        }
        Command::Inspect { path } => print!("{}", pipeline::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
