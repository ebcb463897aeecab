mod commands;
mod error;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abpem::objective::Mode;
use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::error::{exit, CliError};
use crate::manifest::Recorder;
use crate::settings::Settings;

/// Test-time adaptation of an attention-based audio-visual fusion model on
/// synthetic benchmarks.
#[derive(Parser, Debug)]
#[command(name = "abpem", version)]
struct Cli {
    /// TOML settings file, or a previous run's manifest.json. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen(GenArgs),
    /// Train the fusion module on the clean training split.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint over a test stream and log per-batch metrics.
    Adapt(AdaptArgs),
    /// Check analytic gradients against finite differences on a toy model.
    Gradcheck(GradcheckArgs),
    /// Measure attention gaps of a frozen checkpoint.
    Gap(GapArgs),
    /// Aggregate adapt runs into a table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// kin-like, vgg-like or toy.
    #[arg(long)]
    preset: Option<String>,
    /// Corruption applied to the test split, as KIND:MODALITY:SEVERITY.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// raw, em, abpem, ab_only or pem_only.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Split to stream [default: test_corrupted if present, else test].
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check a single mode instead of ab_only, pem_only and abpem.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories written by `adapt`.
    #[arg(long = "run", num_args = 1..)]
    runs: Vec<PathBuf>,
    /// With --checkpoint, also reports gradient alignment on this dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    common: Common,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Pretrain(_) => "pretrain",
            Command::Adapt(_) => "adapt",
            Command::Gradcheck(_) => "gradcheck",
            Command::Gap(_) => "gap",
            Command::Report(_) => "report",
        }
    }

    fn settings(&self) -> Settings {
        let base = |c: &Common| Settings { seed: c.seed, out: c.out.clone(), ..Default::default() };
        match self {
            Command::Gen(a) => Settings {
                preset: a.preset.clone(),
                corrupt: a.corrupt.clone(),
                n_train: a.n_train,
                n_test: a.n_test,
                ..base(&a.common)
            },
            Command::Pretrain(a) => Settings {
                dataset: a.dataset.clone(),
                epochs: a.epochs,
                lr: a.lr,
                batch_size: a.batch_size,
                ..base(&a.common)
            },
            Command::Adapt(a) => Settings {
                dataset: a.dataset.clone(),
                checkpoint: a.checkpoint.clone(),
                mode: a.mode,
                k: a.k,
                lambda: a.lambda,
                lr: a.lr,
                batch_size: a.batch_size,
                split: a.split.clone(),
                ..base(&a.common)
            },
            Command::Gradcheck(a) => Settings { mode: a.mode, k: a.k, lambda: a.lambda, ..base(&a.common) },
            Command::Gap(a) => Settings {
                dataset: a.dataset.clone(),
                checkpoint: a.checkpoint.clone(),
                batch_size: a.batch_size,
                split: a.split.clone(),
                ..base(&a.common)
            },
            Command::Report(a) => Settings {
                runs: (!a.runs.is_empty()).then(|| a.runs.clone()),
                dataset: a.dataset.clone(),
                checkpoint: a.checkpoint.clone(),
                mode: a.mode,
                k: a.k,
                batch_size: a.batch_size,
                split: a.split.clone(),
                ..base(&a.common)
            },
        }
    }
}

fn usage_of(command: &str) -> String {
    let mut cli = Cli::command();
    cli.build();
    match cli.find_subcommand_mut(command) {
        Some(sub) => sub.render_usage().to_string(),
        None => cli.render_usage().to_string(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let flags = cli.command.settings();
    let settings = match &cli.config {
        Some(path) => flags.over(Settings::load(path)?),
        None => flags,
    };
    let missing = |flag: &str| CliError::Usage { msg: format!("missing required {flag}"), usage: usage_of(name) };
    let missing: commands::Missing = &missing;
    let out = settings.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let mut rec = Recorder::new();
    let outcome = match &cli.command {
        Command::Gen(_) => commands::gen(&settings, &out, &mut rec, missing)?,
        Command::Pretrain(_) => commands::pretrain(&settings, &out, &mut rec, missing)?,
        Command::Adapt(_) => commands::adapt(&settings, &out, &mut rec, missing)?,
        Command::Gradcheck(_) => commands::gradcheck(&settings, &out, &mut rec)?,
        Command::Gap(_) => commands::gap(&settings, &out, &mut rec, missing)?,
        Command::Report(_) => commands::report(&settings, &out, &mut rec, missing)?,
    };
    let manifest = rec.finish(name, outcome.config, outcome.seed, &out)?;
    eprintln!("manifest {}", manifest.display());
    match outcome.breach {
        Some(msg) => Err(CliError::Tolerance(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
