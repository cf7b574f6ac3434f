mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcnas::costmodel::CostScope;
use rcnas::Result;

use commands::{execute, exit_code, load_arch, load_config, Command, Manifest};

#[derive(Parser)]
#[command(name = "rcnas", version, about = "Resource-constrained differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the search and retrain seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Edges counted by the expected cost.
    #[arg(long)]
    scope: Option<CostScope>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the constrained search and derive an architecture.
    Search(Common),
    /// Exact parameter and FLOP count of an architecture.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Enumerate a micro space and write its Pareto CSV.
    Enumerate(Common),
    /// Retrain an architecture from scratch and report its metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Render an architecture as Graphviz DOT.
    ExportDot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arch: PathBuf,
    },
    /// Repeat a run from its manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepare(command: Command, c: &Common, arch: Option<&Path>) -> Result<(Manifest, PathBuf)> {
    let mut cfg = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.search.seed = s;
        cfg.retrain.seed = s;
    }
    if let Some(scope) = c.scope {
        cfg.scope = scope;
    }
    let arch = arch.map(load_arch).transpose()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rcnas-out"));
    Ok((Manifest::new(command, cfg, arch.as_ref()), out))
}

fn run(cli: Cli) -> Result<()> {
    let (manifest, out) = match &cli.command {
        Cmd::Search(c) => prepare(Command::Search, c, None)?,
        Cmd::Cost { common, arch } => prepare(Command::Cost, common, Some(arch))?,
        Cmd::Enumerate(c) => prepare(Command::Enumerate, c, None)?,
        Cmd::Eval { common, arch } => prepare(Command::Eval, common, Some(arch))?,
        Cmd::ExportDot { common, arch } => prepare(Command::ExportDot, common, Some(arch))?,
        Cmd::Rerun { manifest, out } => (Manifest::load(manifest)?, out.clone()),
    };
    execute(&manifest, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
