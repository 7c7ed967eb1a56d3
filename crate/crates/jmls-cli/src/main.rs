//! Command-line front end for the JMLS two-filter smoother.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (including a failed model validation), 3 reference-experiment
//! mismatch from the `paper` subcommand.

mod commands;
mod io;
mod paper;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::{parse_caps, InputSpec, Source};
use jmls::backward::ReductionTols;
use jmls::smoother::Caps;

#[derive(Parser)]
#[command(
    name = "jmls",
    about = "Two-filter smoothing for jump Markov linear systems",
    version
)]
struct Cli {
    /// Bound the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SmoothArgs {
    /// Model file (JSON schema, see README).
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Component caps "F,B" or "F,B,S" (forward, backward, optional
    /// smoothed); each a positive integer or "inf".
    #[arg(long, default_value = "inf,inf")]
    caps: String,
    /// Relative rank tolerance of the range-space factorization.
    #[arg(long, default_value_t = 1e-9)]
    rank_tol: f64,
    /// Principal-angle tolerance (radians) for matching range-spaces.
    #[arg(long, default_value_t = 1e-7)]
    angle_tol: f64,
    /// Also write per-step density grids with this many points per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file against the structural invariants.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Simulate a model and write the dataset (with ground truth).
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Number of steps.
        #[arg(long)]
        steps: usize,
        /// RNG seed; identical seeds give identical datasets.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input generator: gaussian | constant:<v> | sinusoid:<amp>,<rate>.
        #[arg(long, default_value = "gaussian")]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-filter smoother and write mixtures, marginals and
    /// optional density grids.
    Smooth(SmoothArgs),
    /// Evaluate two smoothed-density sources on a common grid and report
    /// per-step KL divergence and density differences.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Reference source: enum | rts | smooth:F,B[,S] | <mixture file>.
        #[arg(long)]
        truth: String,
        /// Estimate source, same forms as --truth.
        #[arg(long)]
        estimate: String,
        /// Grid points per axis.
        #[arg(long, default_value_t = 501)]
        grid_points: usize,
        /// Density floor inside the KL logarithm.
        #[arg(long, default_value_t = 1e-300)]
        floor: f64,
        /// Optional per-step report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproduce a reference experiment with pinned seeds and check its
    /// expected figures.
    Paper {
        /// entropy-counterexample | example1 | example2 | example3.
        example: String,
    },
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::Validate { model } => commands::cmd_validate(&model),
        Command::Simulate {
            model,
            steps,
            seed,
            input,
            out,
        } => {
            let spec = InputSpec::parse(&input)?;
            commands::cmd_simulate(&model, steps, seed, &spec, &out)
        }
        Command::Smooth(args) => {
            let caps: Caps = parse_caps(&args.caps)?;
            let tols = ReductionTols {
                rank_tol: args.rank_tol,
                angle_tol: args.angle_tol,
            };
            commands::cmd_smooth(&args.model, &args.data, caps, tols, args.grid, &args.out)
        }
        Command::Compare {
            model,
            data,
            truth,
            estimate,
            grid_points,
            floor,
            out,
        } => {
            let truth = Source::parse(&truth)?;
            let estimate = Source::parse(&estimate)?;
            commands::cmd_compare(
                &model,
                &data,
                &truth,
                &estimate,
                grid_points,
                floor,
                out.as_deref(),
            )
        }
        Command::Paper { example } => paper::run(&example),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits with 2 by default; this tool reserves 2 for
            // numerical failures, so usage problems map to 1.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<jmls::Error>().is_some() {
                2
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
