use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, paths or checkpoints. Exit code 1.
    Usage(String),
    /// Divergence or failed gradient checks. Exit code 2.
    Numeric(String),
}

impl From<attfd::Error> for CliError {
    fn from(e: attfd::Error) -> Self {
        match e {
            attfd::Error::Diverged { .. } | attfd::Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "attfd", version, about = "Attentive few-shot object detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; nested objects or flat dotted keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set loss.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, relative to $ATTFD_OUT when that is set.
    #[arg(long)]
    out: Option<String>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the benchmark scenes as PPM images with JSON sidecars.
    GenData(Common),
    /// Train the base detector and evaluate it.
    TrainBase(Common),
    /// Imprint novel classes into a base checkpoint and fine-tune.
    TrainNovel(Common),
    /// Evaluate a checkpoint on the test scenes.
    Eval(Common),
    /// Finite-difference checks of every primitive and objective.
    Gradcheck(Common),
    /// Write image, saliency, top-down map and detections for one scene.
    RenderAttention(Common),
    /// Grid over loss weights, splits, shots and seeds; resumable CSV.
    Sweep(Common),
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(o) = &self.out {
            overrides.push(format!("out_dir={}", serde_json::to_string(o)?));
        }
        if let Some(c) = &self.checkpoint {
            overrides.push(format!("checkpoint={}", serde_json::to_string(c)?));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::TrainBase(c) => commands::train_base_cmd(&c.resolve()?),
        Command::TrainNovel(c) => commands::train_novel_cmd(&c.resolve()?),
        Command::Eval(c) => commands::eval_cmd(&c.resolve()?),
        Command::Gradcheck(c) => commands::gradcheck_cmd(&c.resolve()?),
        Command::RenderAttention(c) => commands::render_cmd(&c.resolve()?),
        Command::Sweep(c) => commands::sweep_cmd(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}
