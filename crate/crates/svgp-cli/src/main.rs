use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svgp_cli::commands::{self, ElboArgs, GenArgs, PredictArgs};

/// Sparse variational Gaussian process engine.
///
/// Set SVGP_LOG to error|warn|info|debug to control diagnostics; jitter
/// escalations are logged at warn.
#[derive(Parser)]
#[command(name = "svgp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration; writes a checkpoint and
    /// a `step,elbo,wall_ms` trace file next to it.
    Fit {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path (default model.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive summaries per data row. Output columns: `mean,var`, plus
    /// `log_density` when --density-at provides targets.
    Predict {
        /// Checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Input data (CSV with x columns; y columns are ignored).
        #[arg(long)]
        data: PathBuf,
        /// Number of posterior sample paths pooled into the summaries.
        #[arg(long, default_value_t = 100)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV with a y0 column (one row per data row) at which to evaluate
        /// the pooled log predictive density.
        #[arg(long)]
        density_at: Option<PathBuf>,
        /// Output CSV path (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic datasets.
    GenData {
        /// steps | mixture | letters | prior-draw
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample count (steps, mixture).
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Observation/coordinate noise standard deviation.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Distance between the two mixture branches.
        #[arg(long, default_value_t = 1.0)]
        gap: f64,
        /// Piecewise-constant segment count (steps).
        #[arg(long, default_value_t = 4)]
        segments: usize,
        /// Text to rasterize (letters).
        #[arg(long, default_value = "DGP")]
        text: String,
        /// Coordinate scale (letters).
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Cascade depth (prior-draw).
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Grid resolution (prior-draw).
        #[arg(long, default_value_t = 101)]
        grid_n: usize,
        /// Grid lower bound (prior-draw).
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        /// Grid upper bound (prior-draw).
        #[arg(long, default_value_t = 10.0)]
        hi: f64,
        /// Number of sampled functions (prior-draw); one y column each.
        #[arg(long, default_value_t = 10)]
        draws: usize,
        /// Kernel variance (prior-draw).
        #[arg(long, default_value_t = 1.0)]
        variance: f64,
        /// Kernel lengthscale (prior-draw).
        #[arg(long, default_value_t = 0.7)]
        lengthscale: f64,
    },
    /// Evaluate an objective on a dataset; prints `mean=<v> se=<v>` over
    /// --mc repetitions of the stochastic estimator.
    Elbo {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// elbo | deep | lv | iw_lv
        #[arg(long)]
        objective: String,
        /// Importance-weighting replicate count (iw_lv).
        #[arg(long = "S", default_value_t = 1)]
        s: usize,
        /// Outer repetitions for the mean/standard-error estimate.
        #[arg(long, default_value_t = 1)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SVGP_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { config, out } => commands::cmd_fit(&config, out),
        Command::Predict { model, data, paths, seed, density_at, out } => {
            commands::cmd_predict(&PredictArgs { model, data, paths, seed, density_at, out })
        }
        Command::GenData {
            kind,
            out,
            seed,
            n,
            noise,
            gap,
            segments,
            text,
            scale,
            depth,
            grid_n,
            lo,
            hi,
            draws,
            variance,
            lengthscale,
        } => commands::cmd_gen_data(&GenArgs {
            kind,
            out,
            seed,
            n,
            noise,
            gap,
            segments,
            text,
            scale,
            depth,
            grid_n,
            lo,
            hi,
            draws,
            variance,
            lengthscale,
        }),
        Command::Elbo { model, data, objective, s, mc, seed } => {
            commands::cmd_elbo(&ElboArgs { model, data, objective, s, mc, seed })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
