mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neuroforge::Error;

use stages::{Context, Split};

/// Simulate, align, train, generate and evaluate paired
/// electrophysiology/hemodynamics data.
///
/// Configuration layers, lowest first: defaults, --config FILE, NFORGE_*
/// environment variables (`__` separates keys, e.g. NFORGE_TRAIN__EPOCHS),
/// --set key.path=value, --seed.
#[derive(Debug, Parser)]
#[command(name = "neuroforge", version)]
struct Cli {
    /// TOML pipeline config.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed; also overwrites every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Leave wall times out of run manifests so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    quiet: bool,
    /// Override one config key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a paired dataset with ground truth.
    Simulate,
    /// Bandpass the source (and optionally target) signals.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Map source epochs onto the target grid.
    Align {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the conditional generator.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Train on the imbalanced subset used by `fairness`.
        #[arg(long)]
        fairness_subset: bool,
    },
    /// Generate targets from the source epochs of a container.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Score generated targets against a reference container.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Adds band attribution for this generator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Minority-class F1 before and after generative rebalancing.
    Fairness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run every stage under <out>/<stage>.
    Demo,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Schema(_)
        | Error::Integrity { .. }
        | Error::CorruptBlob { .. }
        | Error::Version { .. }
        | Error::InvalidArgument(_)
        | Error::Stratification(_)
        | Error::Json(_) => 3,
        Error::NumericalFailure { .. }
        | Error::Divergence { .. }
        | Error::UndefinedCorrelation(_)
        | Error::DegenerateRow { .. } => 4,
        Error::Io { .. } => 5,
    }
}

fn run(cli: Cli) -> neuroforge::Result<()> {
    let env = config::env_overrides(std::env::vars());
    let config = config::resolve(cli.config.as_deref(), &env, &cli.sets, cli.seed)?;
    let ctx = Context {
        config,
        deterministic: cli.deterministic,
        quiet: cli.quiet,
    };
    let out = cli.out.as_path();
    match &cli.command {
        Command::Simulate => stages::simulate(&ctx, out),
        Command::Preprocess { input } => stages::preprocess(&ctx, input, out),
        Command::Align { input } => stages::align(&ctx, input, out),
        Command::Train { input, fairness_subset } => stages::train(&ctx, input, *fairness_subset, out),
        Command::Generate { checkpoint, input, split } => stages::generate(&ctx, checkpoint, input, *split, out),
        Command::Eval {
            generated,
            reference,
            checkpoint,
        } => stages::eval(&ctx, generated, reference, checkpoint.as_deref(), out),
        Command::Fairness { checkpoint, input } => stages::fairness(&ctx, checkpoint, input, out),
        Command::Demo => stages::demo(&ctx, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            let record = serde_json::json!({
                "error": e.kind(),
                "exit_code": code,
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
