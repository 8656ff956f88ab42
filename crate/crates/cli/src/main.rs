use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use refnet::checkpoint::Checkpoint;
use refnet::config::{RunConfig, Seeds};
use refnet::datamodel::{Dataset, MANIFEST_FILE};
use refnet::nn::{FusionMode, Tasks};
use refnet::pipeline;

#[derive(Parser, Debug)]
#[command(name = "refnet", version, about = "Camera/radar fusion in the BEV-polar domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset with train/val/test splits.
    Generate,
    /// Train a model; resumes when --checkpoint is given.
    Train,
    /// Score a checkpoint on a split and write a metrics report.
    Eval,
    /// Decode detections for every frame of a split.
    Infer,
    /// Measure per-frame inference throughput.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Fusion,
    CameraOnly,
    RadarOnly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Detection,
    Segmentation,
    Multitask,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct Options {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root (generate, train) or split directory (eval, infer, bench).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint to evaluate, or to resume training from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    tasks: Option<TaskArg>,
    #[arg(long, global = true, value_enum)]
    variational: Option<Switch>,
    #[arg(long, global = true)]
    width_mult: Option<f64>,
    /// Sets every seed of the run from one value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    conf_threshold: Option<f64>,
    /// Report path (eval, infer, bench) or output directory (train).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Split evaluated when --dataset points at a dataset root.
    #[arg(long, global = true, default_value = "test")]
    split: String,
}

impl Options {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = match m {
                Mode::Fusion => FusionMode::Fusion,
                Mode::CameraOnly => FusionMode::CameraOnly,
                Mode::RadarOnly => FusionMode::RadarOnly,
            };
        }
        if let Some(t) = self.tasks {
            cfg.tasks = match t {
                TaskArg::Detection => Tasks::Detection,
                TaskArg::Segmentation => Tasks::Segmentation,
                TaskArg::Multitask => Tasks::Multitask,
            };
        }
        if let Some(v) = self.variational {
            cfg.variational = matches!(v, Switch::On);
        }
        if let Some(w) = self.width_mult {
            cfg.width_mult = w;
        }
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::all(s);
        }
        if let Some(t) = self.conf_threshold {
            cfg.eval.conf_threshold = t;
        }
        if let Some(d) = &self.dataset {
            cfg.paths.dataset = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.paths.output = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self.checkpoint.as_ref().context("--checkpoint is required")?;
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
    }

    /// A directory holding a manifest is used as is; otherwise `split` is
    /// looked up beneath it.
    fn split_dataset(&self, root: &Path, split: &str) -> Result<Dataset> {
        let dir = if root.join(MANIFEST_FILE).exists() {
            root.to_path_buf()
        } else {
            root.join(split)
        };
        Dataset::open(&dir).with_context(|| format!("opening dataset {}", dir.display()))
    }

    fn eval_dataset(&self, ck: &Checkpoint) -> Result<Dataset> {
        let root = self.dataset.clone().unwrap_or_else(|| ck.config.paths.dataset.clone());
        self.split_dataset(&root, &self.split)
    }

    fn write_report(&self, json: String) -> Result<()> {
        match &self.out {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
                log::info!("report written to {}", p.display());
            }
            None => println!("{json}"),
        }
        Ok(())
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let o = &cli.opts;
    match cli.command {
        Command::Generate => {
            let cfg = o.run_config()?;
            let manifests = pipeline::run_generate(&cfg, &cfg.paths.dataset)?;
            for m in manifests {
                println!("{}: {} frames", m.split, m.frames.len());
            }
        }
        Command::Train => {
            let cfg = o.run_config()?;
            let resume = o.checkpoint.as_ref().map(|_| o.checkpoint()).transpose()?;
            let train = o.split_dataset(&cfg.paths.dataset, "train")?;
            let outcome = pipeline::run_training(&cfg, &train, &cfg.paths.output, resume.as_ref())?;
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval => {
            let ck = o.checkpoint()?;
            let ds = o.eval_dataset(&ck)?;
            let report = pipeline::run_eval(&ck, &ds, o.conf_threshold)?;
            o.write_report(serde_json::to_string_pretty(&report)?)?;
        }
        Command::Infer => {
            let ck = o.checkpoint()?;
            let ds = o.eval_dataset(&ck)?;
            let records = pipeline::run_infer(&ck, &ds, o.conf_threshold)?;
            o.write_report(serde_json::to_string_pretty(&records)?)?;
        }
        Command::Bench => {
            let ck = o.checkpoint()?;
            let ds = o.eval_dataset(&ck)?;
            let report = pipeline::run_bench(&ck, &ds)?;
            o.write_report(serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}
