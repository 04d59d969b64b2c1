//! `sparsevi`: generate synthetic problems, run IAS and VIAS, select
//! hyperparameters, and run the uncertainty studies, writing CSV/JSON outputs
//! and a replayable manifest for every run.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{ExperimentKind, Invocation, SolverKind};
use error::CliError;

#[derive(Parser)]
#[command(name = "sparsevi", version, about = "Sparse Bayesian inversion with IAS and VIAS")]
struct Cli {
    /// Worker threads for the parallel regions. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Overrides the config's `seed` for commands that draw random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic problem bundle and its truth.
    Generate {
        experiment: ExperimentKind,
        #[command(flatten)]
        common: Common,
    },
    /// Run IAS (with a Laplace approximation) or VIAS on a problem file.
    Solve {
        method: SolverKind,
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Run exactly this many iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// auto, direct, kalman (IAS) or woodbury (VIAS).
        #[arg(long)]
        solver_method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid search over (alpha, beta) by final VIAS ELBO.
    Select {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        iters_per_cell: Option<usize>,
        /// Re-solve at the best cell with the full iteration budget.
        #[arg(long)]
        refit: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Repeated-noise coverage study of 95% credible intervals.
    Coverage {
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Principal components of a VIAS posterior covariance.
    Pca {
        /// `result.json` written by `solve vias`.
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Scan the one-dimensional ELBO along its stationary manifold.
    Landscape {
        #[arg(long)]
        ata: Option<f64>,
        #[arg(long)]
        ya: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        s: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long)]
        mesh: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn invocation(command: Command, seed: Option<u64>) -> Result<(Invocation, PathBuf), CliError> {
    Ok(match command {
        Command::Generate { experiment, common } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "seed", seed);
            (Invocation::Generate { experiment, config }, common.out)
        }
        Command::Solve {
            method,
            problem,
            alpha,
            beta,
            max_iter,
            iterations,
            solver_method,
            common,
        } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "alpha", alpha);
            config::set(&mut config, "beta", beta);
            config::set(&mut config, "max_iter", max_iter);
            config::set(&mut config, "fixed_iterations", iterations);
            config::set(&mut config, "method", solver_method);
            (Invocation::Solve { method, problem, config }, common.out)
        }
        Command::Select {
            problem,
            iters_per_cell,
            refit,
            common,
        } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "iters_per_cell", iters_per_cell);
            (Invocation::Select { problem, refit, config }, common.out)
        }
        Command::Coverage { reps, common } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "reps", reps);
            config::set(&mut config, "seed", seed);
            (Invocation::Coverage { config }, common.out)
        }
        Command::Pca { result, k, common } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "k", k);
            (Invocation::Pca { result, config }, common.out)
        }
        Command::Landscape {
            ata,
            ya,
            s,
            b,
            mesh,
            common,
        } => {
            let mut config = config::load(common.config.as_deref())?;
            config::set(&mut config, "ata", ata);
            config::set(&mut config, "ya", ya);
            config::set(&mut config, "s", s);
            config::set(&mut config, "b", b);
            config::set(&mut config, "mesh", mesh);
            (Invocation::Landscape { config }, common.out)
        }
        Command::Replay { manifest, out } => (commands::read_manifest(&manifest)?.invocation, out),
    })
}

fn main_inner() -> Result<(), CliError> {
    let cli = Cli::parse();
    if cli.threads == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(CliError::runtime)?;
    let (inv, out) = invocation(cli.command, cli.seed)?;
    let manifest = pool.install(|| commands::run(&inv, &out, cli.threads))?;
    for f in &manifest.outputs {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
