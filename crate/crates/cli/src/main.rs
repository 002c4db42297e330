use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mnp_core::io::{FitMethod, MomentChoice, RunConfig};
use mnp_core::mvn::SampleMethod;
use mnp_core::pfm::SweepOrder;
use mnp_core::sun::Provenance;
use mnp_core::{MnpError, Result};
use mnp_cli::{
    cmd_fit, cmd_predict, cmd_simulate, cmd_summarize, exit_code, write_text, SimulateArgs,
    EXIT_OK,
};

/// Bayesian multinomial probit: exact posterior sampling and a fast
/// variational approximation.
///
/// Exit status: 0 success, 1 I/O error, 2 invalid input or configuration,
/// 3 numerical failure, 4 variational fit did not converge.
#[derive(Parser, Debug)]
#[command(name = "mnp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset from the latent-utility model.
    Simulate(SimulateCmd),
    /// Fit the posterior (exact, variational or both) and write a result directory.
    Fit(FitCmd),
    /// Posterior predictive class probabilities for new covariate rows.
    ///
    /// Each row's probabilities are the Monte Carlo average, over stored
    /// posterior draws of the coefficients, of the model's choice
    /// probabilities at those covariates (a plug-in predictive).
    Predict(PredictCmd),
    /// Re-summarize a stored draws file.
    Summarize(SummarizeCmd),
}

#[derive(Args, Debug)]
struct SimulateCmd {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    /// Number of classes.
    #[arg(long = "L")]
    n_classes: usize,
    #[arg(long)]
    seed: u64,
    /// Prior variance; coefficients are drawn from the prior unless `--beta` is given.
    #[arg(long)]
    nu2: Option<f64>,
    /// Comma-separated true coefficients, class-major (length p (L-1)).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    /// `identity` or an L x L CSV file.
    #[arg(long, default_value = "identity")]
    sigma: String,
    /// Make the first covariate a constant 1.
    #[arg(long)]
    intercept: bool,
    #[arg(long)]
    out: PathBuf,
    /// Truth record path (default: `<out stem>.truth.json`).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitCmd {
    /// TOML run configuration; command-line flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<FitMethod>,
    #[arg(long)]
    nu2: Option<f64>,
    #[arg(long)]
    sigma: Option<String>,
    /// Override the number of classes inferred from the data.
    #[arg(long = "L")]
    n_classes: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    moment_method: Option<MomentChoice>,
    #[arg(long)]
    sweep_order: Option<String>,
    #[arg(long)]
    trunc_method: Option<SampleMethod>,
    #[arg(long)]
    cdf_tol: Option<f64>,
    /// Comma-separated quantile levels; pass an empty string for none.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    quantiles: Option<Vec<f64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip writing draws files.
    #[arg(long)]
    no_draws: bool,
}

#[derive(Args, Debug)]
struct PredictCmd {
    /// Result directory written by `fit`.
    #[arg(long)]
    result: PathBuf,
    /// CSV with header `x1,...,xp` (a `y` column, if present, is ignored).
    #[arg(long)]
    x: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_draws: usize,
    /// Which draws to use: exact or vb (default: exact when available).
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 1e-7)]
    cdf_tol: f64,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SummarizeCmd {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "0.025,0.5,0.975")]
    quantiles: Vec<f64>,
    /// Covariates per class, for labelling (default: from the sibling result.json).
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn fit_config(cmd: FitCmd) -> Result<RunConfig> {
    let mut cfg = match &cmd.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = cmd.$field {
                cfg.$field = v.into();
            }
        )*};
    }
    set!(method, sigma, n_samples, eps, max_sweeps, quantiles, output_dir);
    cfg.seed = cmd.seed.or(cfg.seed);
    cfg.nu2 = cmd.nu2.or(cfg.nu2);
    cfg.data = cmd.data.or(cfg.data);
    cfg.n_classes = cmd.n_classes.or(cfg.n_classes);
    cfg.moment_method = cmd.moment_method.or(cfg.moment_method);
    if let Some(t) = cmd.trunc_method {
        cfg.trunc_method = t;
    }
    if let Some(t) = cmd.cdf_tol {
        cfg.cdf_tol = t;
    }
    if let Some(o) = cmd.sweep_order {
        cfg.sweep_order = match o.as_str() {
            "forward" => SweepOrder::Forward,
            "reverse" => SweepOrder::Reverse,
            _ => return Err(MnpError::Config(format!("unknown sweep order `{o}`"))),
        };
    }
    if cmd.no_draws {
        cfg.save_draws = false;
    }
    if cfg.seed.is_none() {
        return Err(MnpError::Config("--seed is required for fit".into()));
    }
    Ok(cfg)
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(&path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let (data, truth) = cmd_simulate(&SimulateArgs {
                n: c.n,
                p: c.p,
                n_classes: c.n_classes,
                seed: c.seed,
                nu2: c.nu2,
                beta: c.beta,
                sigma: c.sigma,
                intercept: c.intercept,
                out: c.out,
                truth: c.truth,
            })?;
            eprintln!("wrote {} and {}", data.display(), truth.display());
        }
        Command::Fit(c) => {
            let cfg = fit_config(c)?;
            let outcome = cmd_fit(&cfg)?;
            for p in &outcome.written {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Predict(c) => {
            let method = match c.method.as_deref() {
                None => None,
                Some("exact") => Some(Provenance::ExactMc),
                Some("vb") => Some(Provenance::PfmB),
                Some(m) => return Err(MnpError::Validation(format!("unknown method `{m}`"))),
            };
            let pred = cmd_predict(&c.result, &c.x, c.n_draws, method, c.cdf_tol)?;
            emit(c.out, &pred.to_csv())?;
        }
        Command::Summarize(c) => {
            let table = cmd_summarize(&c.draws, &c.quantiles, c.p)?;
            emit(c.out, &table.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
