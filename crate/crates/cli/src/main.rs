use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use gwsel_core::eval::Policy;
use gwsel_core::pipeline::protocols::{run_protocol, Protocol};
use gwsel_core::pipeline::{report, Run, RunConfig};
use gwsel_core::{Error, Task};

/// Environment variable consulted when `--out-dir` is not given.
const OUT_DIR_ENV: &str = "GWSEL_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "runs/default";

#[derive(Parser, Debug)]
#[command(
    name = "gwsel",
    version,
    about = "Global workspace fusion with a learned modality selector"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $GWSEL_OUT_DIR, then the config's out_dir, then runs/default].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and cache the dataset splits.
    GenData(RunArgs),
    /// Stage 1: train the workspace on clean data.
    TrainGw(RunArgs),
    /// Stage 2: train the task probes on the frozen workspace.
    TrainProbes(RunArgs),
    /// Stage 3: train the attention selector on the configured schedule.
    TrainAttention(RunArgs),
    /// Evaluate a fusion policy on the configured schedule.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["random", "uniform", "attention"])]
        policy: String,
    },
    /// Run one generalization protocol (stages 1-2 must be complete).
    Experiment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["noise-grid", "leave-out-task", "modality-gen-1", "modality-gen-2"])]
        protocol: String,
    },
    /// Render the metrics of a run directory as text tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn open(args: &RunArgs) -> Result<Run, Error> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    eprintln!("run directory {}", out_dir.display());
    Run::open(config, out_dir)
}

fn fmt_acc(acc: &[f64; 5]) -> String {
    Task::ALL
        .iter()
        .zip(acc)
        .map(|(t, a)| format!("{t}={a:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(args) => {
            let mut run = open(&args)?;
            run.gen_data()?;
            let ds = run.dataset()?;
            println!(
                "gen-data seed={} representation={} validation={} classification={} test={}",
                ds.seed, ds.config.representation, ds.config.validation, ds.config.classification, ds.config.test
            );
        }
        Command::TrainGw(args) => {
            let mut run = open(&args)?;
            let s = run.train_gw()?;
            let total = s.final_losses.map_or(f64::NAN, |r| r.losses.total);
            let tr: Vec<String> = s
                .validation
                .iter()
                .map(|(a, b, v)| format!("{a}->{b}={v:.4}"))
                .collect();
            println!("train-gw final_total={total:.6} validation_mse {}", tr.join(" "));
        }
        Command::TrainProbes(args) => {
            let mut run = open(&args)?;
            let acc = run.train_probes()?;
            println!("train-probes clean_accuracy {}", fmt_acc(&acc));
        }
        Command::TrainAttention(args) => {
            let mut run = open(&args)?;
            let cell = run.train_attention()?;
            println!(
                "train-attention schedule={} sigma={} macro={:.4} {}",
                run.config.schedule,
                run.config.schedule.sigma,
                cell.macro_mean(),
                fmt_acc(&cell.mean())
            );
        }
        Command::Eval { run: args, policy } => {
            let policy: Policy = policy.parse()?;
            let mut run = open(&args)?;
            let cell = run.eval(policy)?;
            println!(
                "eval policy={policy} schedule={} sigma={} macro={:.4} {}",
                run.config.schedule,
                run.config.schedule.sigma,
                cell.macro_mean(),
                fmt_acc(&cell.mean())
            );
        }
        Command::Experiment { run: args, protocol } => {
            let protocol: Protocol = protocol.parse()?;
            let mut run = open(&args)?;
            let outcome = run_protocol(&mut run, protocol)?;
            println!("{}", outcome.summary());
        }
        Command::Report { input } => {
            let written = report::render(&input)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => {
                    eprint!("{}", Cli::command().render_usage());
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}
