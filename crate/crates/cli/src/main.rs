use std::path::PathBuf;
use std::process::ExitCode;

use bridge_spatial::data::{FitMode, KnotGrid};
use bridge_spatial::kernels::KernelFamily;
use bridge_spatial::predict::PredictOptions;
use bridge_spatial::simulate::SimDesign;
use bridge_spatial_cli::commands::{
    cmd_diagnose, cmd_fit, cmd_fit_experiment, cmd_predict, cmd_simulate, DiagnoseOptions, FitOverrides, DIAGNOSTICS_SUBDIR,
};
use bridge_spatial_cli::config::{load_toml, RunConfig};
use bridge_spatial_cli::error::{CliError, CliResult};
use bridge_spatial_cli::report::cmd_report;
use clap::{Args, Parser, Subcommand};

/// Spatial logistic regression with bridge-distributed site effects.
#[derive(Parser)]
#[command(name = "bsp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate replicate datasets with known truth.
    Simulate(SimulateArgs),
    /// Fit one dataset, or every replicate of an experiment.
    Fit(FitArgs),
    /// Predictive probabilities at new sites.
    Predict(PredictArgs),
    /// ESS, WAIC, held-out scores and residual diagnostics of a fit.
    Diagnose(DiagnoseArgs),
    /// Aggregate the replicate fits of an experiment.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML design file; defaults to the unit-square design.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Use the [0,2]^2 design with this many training sites.
    #[arg(long)]
    large_square: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitFlags {
    /// eb or fb.
    #[arg(long)]
    mode: Option<String>,
    /// exponential, matern_3_2 or matern_5_2.
    #[arg(long)]
    kernel: Option<String>,
    /// Knot grid such as 7x7; enables the low-rank kernel.
    #[arg(long)]
    knots_grid: Option<String>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    coord_scale: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset to fit.
    #[arg(long, required_unless_present = "experiment", conflicts_with = "experiment")]
    data: Option<PathBuf>,
    /// Experiment directory from `simulate`; fits every replicate.
    #[arg(long)]
    experiment: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (single dataset only).
    #[arg(long, required_unless_present = "experiment")]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Fit directory.
    #[arg(long)]
    fit: PathBuf,
    /// CSV of new sites with coordinate and covariate columns.
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    samples_per_draw: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Fit directory.
    #[arg(long)]
    fit: PathBuf,
    /// Training dataset used for the fit.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Defaults to a `diagnostics` directory inside the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 9999)]
    permutations: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    experiment: PathBuf,
    /// Defaults to the experiment directory's `report` subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = bridge_spatial::Error>>(flag: &str, v: &Option<String>) -> CliResult<Option<T>> {
    v.as_deref()
        .map(|s| s.parse::<T>().map_err(|e| CliError::validation(flag, e.to_string())))
        .transpose()
}

fn overrides(f: &FitFlags) -> CliResult<FitOverrides> {
    Ok(FitOverrides {
        mode: parse::<FitMode>("--mode", &f.mode)?,
        kernel: parse::<KernelFamily>("--kernel", &f.kernel)?,
        knots_grid: parse::<KnotGrid>("--knots-grid", &f.knots_grid)?,
        chains: f.chains,
        iters: f.iters,
        burn: f.burn,
        thin: f.thin,
        seed: f.seed,
        coord_scale: f.coord_scale,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => {
            let mut d: SimDesign = match &a.design {
                Some(p) => load_toml(p)?,
                None => SimDesign::default(),
            };
            if let Some(n) = a.large_square {
                d = SimDesign { seed: d.seed, ..SimDesign::large_square(n, n / 4, d.rho) };
            }
            if let Some(v) = a.n_train {
                d.n_train = v;
            }
            if let Some(v) = a.n_test {
                d.n_test = v;
            }
            if let Some(v) = a.phi {
                d.phi = v;
            }
            if let Some(v) = a.rho {
                d.rho = v;
            }
            if let Some(v) = a.seed {
                d.seed = v;
            }
            cmd_simulate(&d, a.replicates, &a.out)
        }
        Command::Fit(a) => {
            let mut cfg: RunConfig = match &a.config {
                Some(p) => load_toml(p)?,
                None => RunConfig::default(),
            };
            overrides(&a.flags)?.apply(&mut cfg.fit);
            cfg.fit.validate().map_err(|e| CliError::validation("config", e.to_string()))?;
            match (&a.data, &a.experiment) {
                (Some(data), _) => cmd_fit(&cfg, data, a.out.as_deref().expect("clap requires --out")).map(|_| ()),
                (None, Some(root)) => cmd_fit_experiment(&cfg, root, &DiagnoseOptions::default()),
                (None, None) => unreachable!("clap requires --data or --experiment"),
            }
        }
        Command::Predict(a) => {
            let opts = PredictOptions { samples_per_draw: a.samples_per_draw, seed: a.seed, keep_effects: false };
            cmd_predict(&a.fit, &a.sites, &a.out, &opts)
        }
        Command::Diagnose(a) => {
            let opts = DiagnoseOptions { seed: a.seed, permutations: a.permutations, ..DiagnoseOptions::default() };
            let out = a.out.unwrap_or_else(|| a.fit.join(DIAGNOSTICS_SUBDIR));
            cmd_diagnose(&a.fit, &a.data, a.test.as_deref(), &out, &opts).map(|_| ())
        }
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(|| a.experiment.join("report"));
            let r = cmd_report(&a.experiment, &out)?;
            print!("{}", bridge_spatial_cli::report::render_report(&r));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
