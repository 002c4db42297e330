//! Commands behind the `mnp` binary: simulate, fit, predict and summarize.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mnp_core::io::{
    self, compare, fmt_f64, ComparisonRow, DataShape, ExactResult, ResultRecord, RunConfig,
    SummaryTable, Timing, VbResult,
};
use mnp_core::model::{
    build_design_expansion, choice_probabilities_with, simulate_dataset, validate_sigma, BetaSpec,
    CovariateSampler, MnpModel, SimulationSpec,
};
use mnp_core::mvn::{CdfOptions, GibbsConfig};
use mnp_core::pfm::{
    run_cavi_with, vb_beta_moments, vb_sample_beta, CaviOptions, InitPolicy, PfmCheckpoint,
    SweepConfig,
};
use mnp_core::sun::{
    evidence_with, posterior_params, sun_sample, summarize, Provenance, SunSampleOptions,
};
use mnp_core::{MnpError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

pub fn exit_code(err: &MnpError) -> i32 {
    match err {
        MnpError::Io { .. } => EXIT_IO,
        MnpError::NotConverged { .. } => EXIT_NOT_CONVERGED,
        MnpError::Numeric { .. }
        | MnpError::Singular { .. }
        | MnpError::Capacity { .. }
        | MnpError::InfeasibleMethod { .. } => EXIT_NUMERIC,
        MnpError::Argument(_)
        | MnpError::Model(_)
        | MnpError::Validation(_)
        | MnpError::Config(_)
        | MnpError::Parse { .. } => EXIT_VALIDATION,
    }
}

/// Prefixes numeric failures with the pipeline stage that raised them.
fn in_stage(stage: &'static str) -> impl Fn(MnpError) -> MnpError {
    move |e| match e {
        MnpError::Numeric { context, message } => MnpError::Numeric {
            context: format!("{stage}: {context}"),
            message,
        },
        MnpError::Singular { name, max_jitter } => MnpError::Numeric {
            context: stage.to_string(),
            message: MnpError::Singular { name, max_jitter }.to_string(),
        },
        other => other,
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| MnpError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, content).map_err(|e| MnpError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Clone, Debug)]
pub struct SimulateArgs {
    pub n: usize,
    pub p: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Prior variance used when `beta` is not given.
    pub nu2: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub sigma: String,
    pub intercept: bool,
    pub out: PathBuf,
    /// Defaults to `<out stem>.truth.json` next to the dataset.
    pub truth: Option<PathBuf>,
}

/// Ground truth behind a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub n_classes: usize,
    pub nu2: Option<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
}

pub fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.truth.json"))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Writes a simulated dataset and its truth record; returns both paths.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<(PathBuf, PathBuf)> {
    if args.n_classes < 2 {
        return Err(MnpError::Validation(format!(
            "need at least 2 classes, got {}",
            args.n_classes
        )));
    }
    let beta = match (&args.beta, args.nu2) {
        (Some(b), _) => BetaSpec::Given(b.clone()),
        (None, Some(nu2)) if nu2 > 0.0 => BetaSpec::FromPrior,
        (None, Some(nu2)) => {
            return Err(MnpError::Validation(format!("nu2 must be positive, got {nu2}")))
        }
        (None, None) => {
            return Err(MnpError::Validation(
                "give either explicit coefficients or a prior variance".into(),
            ))
        }
    };
    let sigma = io::read_sigma(&args.sigma, args.n_classes)?;
    let spec = SimulationSpec {
        n: args.n,
        p: args.p,
        n_classes: args.n_classes,
        sigma: sigma.clone(),
        nu2: args.nu2.unwrap_or(1.0),
        beta,
        covariates: if args.intercept {
            CovariateSampler::InterceptNormal
        } else {
            CovariateSampler::StandardNormal
        },
    };
    let sim = simulate_dataset(&spec, args.seed)?;
    write(&args.out, &io::dataset_to_csv(&sim.dataset))?;
    let truth = TruthRecord {
        seed: args.seed,
        n: args.n,
        p: args.p,
        n_classes: args.n_classes,
        nu2: args.nu2,
        sigma: rows_of(&sigma),
        beta: sim.beta.iter().copied().collect(),
    };
    let truth_file = args.truth.clone().unwrap_or_else(|| truth_path(&args.out));
    write(&truth_file, &(serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n"))?;
    Ok((args.out.clone(), truth_file))
}

#[derive(Debug)]
pub struct FitOutcome {
    pub record: ResultRecord,
    pub written: Vec<PathBuf>,
}

/// Seed offset that keeps approximate-posterior draws on streams disjoint
/// from the exact sampler's.
const VB_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

pub const CHECKPOINT_FILE: &str = "pfm_state.txt";

/// Runs the configured method(s) and writes the result directory.
///
/// A variational run that hits `max_sweeps` still writes its record (flagged
/// `converged = false`) and then fails with [`MnpError::NotConverged`].
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let nu2 = cfg.nu2()?;
    let data_path = cfg
        .data
        .as_ref()
        .ok_or_else(|| MnpError::Config("`data` is required".into()))?;
    let mut timing = Vec::new();
    let clock = Instant::now();
    let data = io::read_dataset(data_path, cfg.n_classes)?;
    let sigma = io::read_sigma(&cfg.sigma, data.n_classes())?;
    let shape = DataShape {
        n: data.n(),
        p: data.p(),
        n_classes: data.n_classes(),
    };
    let p = data.p();
    let model = MnpModel::new(data, &sigma, nu2)?;
    let expansion = build_design_expansion(&model)?;
    timing.push(Timing {
        phase: "load".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });
    let cdf = CdfOptions::default().with_abs_tol(cfg.cdf_tol);
    let gibbs = GibbsConfig {
        burn_in: cfg.gibbs_burn_in,
        thin: cfg.gibbs_thin,
    };
    let mut draws_out: Vec<(Provenance, DMatrix<f64>)> = Vec::new();

    let exact = if cfg.method.exact() {
        let clock = Instant::now();
        let stage = in_stage("exact");
        let params = posterior_params(&model, &expansion).map_err(&stage)?;
        let ev = evidence_with(&model, &expansion, &cdf).map_err(&stage)?;
        let opts = SunSampleOptions {
            trunc_method: cfg.trunc_method,
            gibbs,
            shards: cfg.shards,
            keep_latent: false,
            cdf: cdf.clone(),
        };
        let draws = sun_sample(&params, cfg.n_samples, seed, &opts).map_err(&stage)?;
        let summary = summarize(&draws.samples, &cfg.quantiles, Provenance::ExactMc)?;
        timing.push(Timing {
            phase: "exact".into(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        let result = ExactResult {
            log_evidence: ev.log_prob,
            evidence_error: ev.error,
            summary: SummaryTable::from_summary(&summary, p),
            diagnostics: draws.diagnostics.clone(),
        };
        if cfg.save_draws {
            draws_out.push((Provenance::ExactMc, draws.samples));
        }
        Some(result)
    } else {
        None
    };

    let mut not_converged = None;
    let mut checkpoint = None;
    let vb = if cfg.method.vb() {
        let clock = Instant::now();
        let stage = in_stage("vb");
        let opts = CaviOptions {
            eps: cfg.eps,
            max_sweeps: cfg.max_sweeps,
            init: InitPolicy::HalfNormal,
            sweep: SweepConfig {
                moment_method: cfg.moment_method(seed),
                order: cfg.sweep_order,
                cdf: cdf.clone(),
            },
            track_elbo: true,
        };
        let post = run_cavi_with(&model, &expansion, &opts).map_err(&stage)?;
        checkpoint = Some(PfmCheckpoint::from_posterior(&post, seed));
        let final_elbo = post.elbo_trace.last().copied();
        let (summary, diagnostics) = if post.converged() {
            let (mean, cov) = vb_beta_moments(&post)?;
            let draws = vb_sample_beta(
                &post,
                cfg.n_samples,
                seed.wrapping_add(VB_SEED_OFFSET),
                &gibbs,
                &cdf,
            )
            .map_err(&stage)?;
            let mut s = summarize(&draws.samples, &cfg.quantiles, Provenance::PfmB)?;
            s.mean = mean;
            s.sd = cov.diagonal().map(f64::sqrt);
            s.cov = cov;
            let diag = draws.diagnostics.clone();
            if cfg.save_draws {
                draws_out.push((Provenance::PfmB, draws.samples));
            }
            (SummaryTable::from_summary(&s, p), Some(diag))
        } else {
            not_converged = Some(MnpError::NotConverged {
                sweeps: post.state.sweep_count,
                last_delta: post.state.last_delta,
            });
            let empty = SummaryTable {
                provenance: Provenance::PfmB,
                draws: 0,
                quantile_levels: cfg.quantiles.clone(),
                coefficients: Vec::new(),
            };
            (empty, None)
        };
        timing.push(Timing {
            phase: "vb".into(),
            seconds: clock.elapsed().as_secs_f64(),
        });
        Some(VbResult {
            converged: post.converged(),
            sweeps: post.state.sweep_count,
            last_delta: post.state.last_delta,
            elbo: final_elbo,
            elbo_trace: post.elbo_trace.clone(),
            summary,
            diagnostics,
        })
    } else {
        None
    };

    let comparison: Option<Vec<ComparisonRow>> = match (&exact, &vb) {
        (Some(e), Some(v)) if v.converged => Some(compare(&e.summary, &v.summary)),
        _ => None,
    };
    let record = ResultRecord {
        version: io::ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        data: shape,
        sigma: rows_of(&sigma),
        exact,
        vb,
        comparison,
        timing,
    };
    let draws_ref: Vec<(Provenance, &DMatrix<f64>)> =
        draws_out.iter().map(|(p, d)| (*p, d)).collect();
    let mut written = io::write_results(&record, &cfg.output_dir, &draws_ref)?;
    if let Some(ck) = checkpoint {
        let path = cfg.output_dir.join(CHECKPOINT_FILE);
        ck.write(&path)?;
        written.push(path);
    }
    if let Some(e) = not_converged {
        return Err(e);
    }
    Ok(FitOutcome { record, written })
}

/// Per-row class probabilities averaged over posterior draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub provenance: Provenance,
    pub draws_used: usize,
    /// `rows × L`.
    pub probs: DMatrix<f64>,
}

impl Predictions {
    pub fn to_csv(&self) -> String {
        let method = match self.provenance {
            Provenance::ExactMc => "exact",
            Provenance::PfmB => "vb",
        };
        let mut out = String::from("row,method");
        for l in 1..=self.probs.ncols() {
            out.push_str(&format!(",p{l}"));
        }
        out.push('\n');
        for (i, row) in self.probs.row_iter().enumerate() {
            out.push_str(&format!("{},{method}", i + 1));
            for v in row.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Plug-in Monte Carlo predictive: the average of the class probabilities
/// over the first `n_draws` stored posterior draws. `method` picks the draw
/// set; by default exact draws are used when present.
pub fn cmd_predict(
    result_dir: &Path,
    x_file: &Path,
    n_draws: usize,
    method: Option<Provenance>,
    cdf_tol: f64,
) -> Result<Predictions> {
    if n_draws == 0 {
        return Err(MnpError::Validation("need at least one draw".into()));
    }
    let record = ResultRecord::read(result_dir)?;
    let provenance = match method {
        Some(p) => p,
        None if result_dir.join(io::draws_file(Provenance::ExactMc)).exists() => Provenance::ExactMc,
        None => Provenance::PfmB,
    };
    let draws = io::read_draws(&result_dir.join(io::draws_file(provenance)))?;
    let sigma = record.sigma_matrix();
    let l = sigma.nrows();
    validate_sigma(&sigma, l)?;
    let x = io::read_covariates(x_file)?;
    if x.ncols() != record.data.p || draws.ncols() != x.ncols() * (l - 1) {
        return Err(MnpError::Validation(format!(
            "covariate file has {} columns but the fit used p = {}",
            x.ncols(),
            record.data.p
        )));
    }
    let used = n_draws.min(draws.nrows());
    let cdf = CdfOptions::default().with_abs_tol(cdf_tol);
    let mut probs = DMatrix::zeros(x.nrows(), l);
    for i in 0..x.nrows() {
        let xi = x.row(i).transpose();
        let mut acc = DVector::zeros(l);
        for d in 0..used {
            let beta = draws.row(d).transpose();
            acc += choice_probabilities_with(&beta, &xi, &sigma, &cdf)?;
        }
        probs.row_mut(i).copy_from(&(acc / used as f64).transpose());
    }
    Ok(Predictions {
        provenance,
        draws_used: used,
        probs,
    })
}

/// Re-summarizes a stored draws file. `p` labels coefficients by class and
/// covariate; without it the sibling `result.json` is consulted.
pub fn cmd_summarize(draws_file: &Path, quantiles: &[f64], p: Option<usize>) -> Result<SummaryTable> {
    let draws = io::read_draws(draws_file)?;
    let provenance = match draws_file.file_name().and_then(|f| f.to_str()) {
        Some(f) if f == io::draws_file(Provenance::PfmB) => Provenance::PfmB,
        _ => Provenance::ExactMc,
    };
    let p = match p {
        Some(p) => p,
        None => draws_file
            .parent()
            .and_then(|d| ResultRecord::read(d).ok())
            .map_or(draws.ncols(), |r| r.data.p),
    };
    if p == 0 || draws.ncols() % p != 0 {
        return Err(MnpError::Validation(format!(
            "{} coefficients cannot be split into blocks of p = {p}",
            draws.ncols()
        )));
    }
    let s = summarize(&draws, quantiles, provenance)?;
    Ok(SummaryTable::from_summary(&s, p))
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    write(path, content)
}
