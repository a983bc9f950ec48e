use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use difftune::harness::{emit_plotdata, eval_run, run_experiment, ExperimentKind, RunConfig};
use difftune::Error;

/// Fine-tune and guide toy diffusion models against exact oracles.
#[derive(Parser)]
#[command(name = "difftune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the configured base distribution.
    Pretrain(RunArgs),
    /// Fine-tune a pre-trained policy with one of the RL algorithms.
    Finetune(RunArgs),
    /// Sample with value-gradient guidance and a frozen policy.
    Guide(RunArgs),
    /// Check the exact grid, two-state or MALA oracles.
    Oracle(RunArgs),
    /// Class-conditional generation from a mixture base.
    Conditional(RunArgs),
    /// Run a grid of seeds and alphas concurrently.
    Sweep(RunArgs),
    /// Score a finished run's samples.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Reference sample CSV; defaults to the run's analytic target.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write plot-ready CSVs for a finished run.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and DIFFTUNE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else if e.is_numeric() {
        3
    } else {
        1
    }
}

fn load(args: &RunArgs, expected: ExperimentKind) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&args.config)?;
    if config.kind != expected {
        return Err(Error::Config(format!(
            "config kind is `{}` but the `{}` subcommand was used",
            config.kind.name(),
            expected.name()
        )));
    }
    if let Ok(s) = std::env::var("DIFFTUNE_SEED") {
        config.seed = s
            .parse()
            .map_err(|_| Error::Config(format!("DIFFTUNE_SEED must be an unsigned integer, got `{s}`")))?;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = &args.out {
        config.out = o.clone();
    }
    Ok(config)
}

fn run(args: &RunArgs, kind: ExperimentKind) -> Result<(), Error> {
    let config = load(args, kind)?;
    let summary = run_experiment(&config)?;
    println!("{}", summary.dir.display());
    for r in &summary.metrics {
        match r.value {
            Some(v) => println!("{:<36} {v:.6e}", r.metric),
            None => println!("{:<36} -", r.metric),
        }
    }
    Ok(())
}

fn eval(run: &Path, reference: Option<&Path>) -> Result<(), Error> {
    let m = eval_run(run, reference)?;
    for (k, v) in m.entries() {
        println!("{k:<20} {v:.6e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => run(a, ExperimentKind::Pretrain),
        Command::Finetune(a) => run(a, ExperimentKind::Finetune),
        Command::Guide(a) => run(a, ExperimentKind::Guide),
        Command::Oracle(a) => run(a, ExperimentKind::Oracle),
        Command::Conditional(a) => run(a, ExperimentKind::Conditional),
        Command::Sweep(a) => run(a, ExperimentKind::Sweep),
        Command::Eval { run, reference } => eval(run, reference.as_deref()),
        Command::Plotdata { run } => emit_plotdata(run).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
