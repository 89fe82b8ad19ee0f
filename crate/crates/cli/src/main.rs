use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod dataset;
mod manifest;
mod plots;

use config::PipelineConfig;

/// Phase-aware ECG biometrics pipeline.
#[derive(Parser, Debug)]
#[command(name = "hpaf", version, about)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset directory or segments file.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with planted R peaks.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert WFDB records (.hea) or CSV exports into a dataset directory.
    Ingest {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Preprocess, detect beats and write the phase segments.
    Segment {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes per-epoch checkpoints and the loss history.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a prototype gallery from labelled beats.
    Enroll {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify every beat against a gallery.
    Identify {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accept or reject each beat's identity claim.
    Verify {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Claimed subject for every beat; defaults to each beat's own label.
        #[arg(long)]
        claim: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-set protocol: chronological halves of every subject.
    EvalClosed {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-set protocol: disjoint training and test subjects.
    EvalOpen {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render ROC, CMC and loss curves of an evaluation directory as SVG.
    ExportPlots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Segment { .. } => "segment",
            Command::Train { .. } => "train",
            Command::Enroll { .. } => "enroll",
            Command::Identify { .. } => "identify",
            Command::Verify { .. } => "verify",
            Command::EvalClosed { .. } => "eval-closed",
            Command::EvalOpen { .. } => "eval-open",
            Command::ExportPlots { .. } => "export-plots",
        }
    }

    fn out(&self) -> &PathBuf {
        match self {
            Command::Synth { out }
            | Command::Ingest { out, .. }
            | Command::Segment { out, .. }
            | Command::Train { out, .. }
            | Command::Enroll { out, .. }
            | Command::Identify { out, .. }
            | Command::Verify { out, .. }
            | Command::EvalClosed { out, .. }
            | Command::EvalOpen { out, .. }
            | Command::ExportPlots { out, .. } => out,
        }
    }
}

fn resolve_config(cli: &Cli) -> hpaf_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for item in &cli.overrides {
        cfg.apply_override(item)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> hpaf_core::Result<()> {
    use commands::*;
    match &cli.command {
        Command::Synth { out } => synth(cfg, out),
        Command::Ingest { out, inputs } => ingest(cfg, inputs, out),
        Command::Segment { data, out } => segment(cfg, &data.data, out),
        Command::Train { data, out } => train(cfg, &data.data, out),
        Command::Enroll { data, model, out } => enroll(cfg, &data.data, model, out),
        Command::Identify {
            data,
            model,
            gallery,
            out,
        } => identify(cfg, &data.data, model, gallery, out),
        Command::Verify {
            data,
            model,
            gallery,
            claim,
            out,
        } => verify(cfg, &data.data, model, gallery, claim.as_deref(), out),
        Command::EvalClosed { data, out } => evaluate(cfg, &data.data, out, Protocol::Closed),
        Command::EvalOpen { data, out } => evaluate(cfg, &data.data, out, Protocol::Open),
        Command::ExportPlots { report, out } => plots::export(report, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Clap exits with status 2 and usage text on unknown flags.
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let started = manifest::now();
    let result = run(&cli, &cfg);
    let code: u8 = match &result {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    };
    let dir = dataset::manifest_dir(cli.command.out());
    if dir.is_dir() {
        if let Err(e) = manifest::append(&dir, cli.command.name(), &cfg, started, code) {
            eprintln!("warning: could not write manifest: {e}");
        }
    }
    if let Err(e) = result {
        eprintln!("error: {e}");
    }
    ExitCode::from(code)
}
