use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod cmd;
mod config;

use cmd::{analyze, build_chains, report, scan, synth, train, Context, UsageError};
use config::Config;

#[derive(Debug, Parser)]
#[command(
    name = "dgreason",
    version,
    about = "Reasoning-chain construction, training and analysis"
)]
struct Cli {
    /// TOML configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; also replaces the training seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives every output of the command.
    #[arg(long, global = true, default_value = "dgreason-out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    /// Continue from progress or checkpoints left in the output directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    /// Chat-completion service; endpoint and key come from the environment.
    Wire,
    /// In-process trainable model.
    Toy,
    /// Scripted teacher for token-file datasets.
    Mock,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Summarize a `<domain>/<class>/<file>` dataset tree.
    Scan(scan::Args),
    /// Generate and filter reasoning chains for the source domains.
    BuildChains(build_chains::Args),
    /// Train and evaluate on the toy backend.
    Train(train::Args),
    /// Divergence, probability, entropy and rejection reports.
    Analyze(analyze::Args),
    /// Summarize a finished training run.
    Report(report::Args),
    /// Write the bundled synthetic task and a matching config.
    Synth(synth::Args),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Scan(_) => "scan",
            Command::BuildChains(_) => "build-chains",
            Command::Train(_) => "train",
            Command::Analyze(_) => "analyze",
            Command::Report(_) => "report",
            Command::Synth(_) => "synth",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    let ctx = Context {
        config,
        config_path: cli.config,
        out_dir: cli.out_dir,
        backend: cli.backend,
        resume: cli.resume,
    };
    match cli.command {
        Command::Scan(args) => scan::run(&ctx, args),
        Command::BuildChains(args) => build_chains::run(ctx, args),
        Command::Train(args) => train::run(ctx, args),
        Command::Analyze(args) => analyze::run(&ctx, args),
        Command::Report(args) => report::run(&ctx, args),
        Command::Synth(args) => synth::run(&ctx, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if !err.use_stderr() => err.exit(),
        Err(err) => {
            let record = serde_json::json!({
                "error": "UsageError",
                "message": err.kind().as_str().unwrap_or("invalid arguments"),
                "detail": err.to_string(),
            });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "command": command,
                "error": cmd::error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            if err.chain().any(|e| e.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
