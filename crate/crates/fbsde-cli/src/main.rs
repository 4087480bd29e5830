//! Command-line driver: quantizer training, PDE solves, reference fields,
//! comparisons, path simulation and convergence studies, all reproducible
//! from config files and emitted manifests.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CmdError;
use fbsde::quantizer::TrainingSchedule;

#[derive(Parser)]
#[command(
    name = "fbsde",
    version,
    about = "Quantized forward-backward solver for quasi-linear parabolic PDEs"
)]
struct Cli {
    /// Cap the worker thread count (results are identical at any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Quantizer cache directory (default: FBSDE_CACHE_DIR or
    /// .fbsde-quantizer-cache).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or fetch) an M-point Gaussian quantizer and write its file.
    Quantize(QuantizeArgs),
    /// Run the backward solver on a config file.
    Solve(SolveArgs),
    /// Sample the closed-form reference of a configured problem.
    Reference(ReferenceArgs),
    /// Compare an exported slice against the reference or another export.
    Compare(CompareArgs),
    /// Simulate the discrete forward-backward triple under a solution.
    Simulate(SimulateArgs),
    /// Convergence study over a list of time steps.
    Study(StudyArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Spatial dimension d.
    #[arg(long)]
    dim: usize,
    /// Number of quantizer points M.
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write the grid file here (the cache always keeps a copy).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lloyd_samples: Option<usize>,
    #[arg(long)]
    clvq_samples: Option<usize>,
    #[arg(long)]
    weight_samples: Option<usize>,
}

#[derive(Args)]
struct SolveArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for slice CSVs, budget report and manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReferenceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Real evaluation time.
    #[arg(long)]
    t: f64,
    /// Gauss-Hermite nodes per axis.
    #[arg(long, default_value_t = 200)]
    quad_nodes: usize,
    /// Append reference gradient columns.
    #[arg(long)]
    grad: bool,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    /// Exported slice CSV to check.
    #[arg(long)]
    solution: PathBuf,
    /// Compare against another exported slice instead of the reference.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    quad_nodes: usize,
    /// Comparison window as per-axis pairs: lo,hi[,lo,hi...].
    #[arg(long, value_delimiter = ',')]
    window: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    /// Starting point, comma-separated coordinates (defaults to the
    /// origin).
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 60)]
    quad_nodes: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Decreasing list of time steps.
    #[arg(long, value_delimiter = ',')]
    h_list: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 4.0)]
    p: f64,
    #[arg(long, default_value_t = 0.25)]
    eta_extra: f64,
    #[arg(long, default_value_t = 200)]
    quad_nodes: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CmdError> {
    let cache = commands::cache_dir(cli.cache_dir.as_deref());
    match cli.command {
        Command::Quantize(args) => {
            let mut schedule = TrainingSchedule::default();
            if let Some(v) = args.lloyd_samples {
                schedule.lloyd_samples = v;
            }
            if let Some(v) = args.clvq_samples {
                schedule.clvq_samples = v;
            }
            if let Some(v) = args.weight_samples {
                schedule.weight_samples = v;
            }
            commands::cmd_quantize(
                args.dim,
                args.points,
                args.seed,
                args.out.as_deref(),
                &cache,
                &schedule,
            )
        }
        Command::Solve(args) => commands::cmd_solve(&args.config, &args.out, &cache),
        Command::Reference(args) => commands::cmd_reference(
            &args.config,
            args.t,
            args.quad_nodes,
            args.grad,
            args.out.as_deref(),
        ),
        Command::Compare(args) => {
            let window = match args.window {
                Some(flat) => {
                    if flat.len() % 2 != 0 {
                        return Err(CmdError::Usage(
                            "--window needs an even number of values (lo,hi per axis)".into(),
                        ));
                    }
                    Some(flat.chunks(2).map(|c| (c[0], c[1])).collect())
                }
                None => None,
            };
            commands::cmd_compare(
                &args.config,
                &args.solution,
                args.against.as_deref(),
                args.quad_nodes,
                window,
                args.out.as_deref(),
            )
        }
        Command::Simulate(args) => commands::cmd_simulate(
            &args.config,
            args.paths,
            args.x0.as_deref().unwrap_or(&[]),
            args.seed,
            args.quad_nodes,
            &args.out,
            &cache,
        ),
        Command::Study(args) => commands::cmd_study(
            &args.config,
            &args.h_list,
            args.gamma,
            args.p,
            args.eta_extra,
            args.quad_nodes,
            &args.out,
            &cache,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Results do not depend on the pool size; this only caps workers.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CmdError::Usage(_) => ExitCode::from(2),
                CmdError::Io(_) => ExitCode::from(3),
                CmdError::Numeric(_) => ExitCode::from(4),
            }
        }
    }
}
