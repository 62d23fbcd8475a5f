use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use edgepipe::config::{ExperimentConfig, Mode, PlanConfig};
use edgepipe::harness::{cmd_plan, cmd_restore, cmd_run, cmd_verify};

#[derive(Parser)]
#[command(
    name = "edgepipe",
    version,
    about = "Asynchronous pipeline-parallel training across heterogeneous nodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sim,
    Live,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics file; the newest checkpoint is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train as configured and write the metrics log.
    Run(RunArgs),
    /// Print the optimal partition of a profiled model.
    Plan {
        #[arg(long)]
        config: PathBuf,
        /// Cross-check against exhaustive search.
        #[arg(long)]
        oracle: bool,
    },
    /// Check a metrics log against the pipeline invariants.
    Verify { metrics: PathBuf },
    /// Resume training from a checkpoint file.
    Restore {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, edgepipe::Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Sim => Mode::Sim,
            ModeArg::Live => Mode::Live,
        };
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.display().to_string());
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => load(&args).and_then(|cfg| cmd_run(&cfg)).map(|s| {
            println!("{s}");
            true
        }),
        Command::Restore { run, checkpoint } => load(&run)
            .and_then(|cfg| cmd_restore(&cfg, &checkpoint))
            .map(|s| {
                println!("{s}");
                true
            }),
        Command::Plan { config, oracle } => PlanConfig::load(&config)
            .map_err(edgepipe::Error::from)
            .and_then(|p| cmd_plan(&p, oracle))
            .map(|r| {
                println!("{r}");
                r.oracle_agrees() != Some(false)
            }),
        Command::Verify { metrics } => cmd_verify(&metrics).map(|r| {
            print!("{r}");
            r.passed()
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
