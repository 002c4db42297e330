//! Normal laws truncated to `{z : z >= lower}` (upper bounds are `+∞`).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::cdf::CdfOptions;
use super::normal::{log_norm_pdf, sample_std_normal_above};
use super::pd::{symmetrize, PdMatrix};
use super::sample::substream;
use crate::error::{MnpError, Result};

/// Largest dimension handled by the closed-form moment recursions.
pub const ANALYTIC_MOMENT_CAP: usize = 8;

/// `auto` uses rejection when the region probability is at least this.
pub const AUTO_REJECTION_THRESHOLD: f64 = 0.01;

/// Explicit rejection refuses regions with smaller probability.
pub const MIN_REJECTION_ACCEPTANCE: f64 = 1e-12;

const MIN_REGION_LOG_PROB: f64 = -690.775_527_898_213_7; // ln(1e-300)

#[derive(Clone, Debug)]
pub struct TruncatedMvn {
    mean: DVector<f64>,
    cov: PdMatrix,
    lower: DVector<f64>,
    log_region_prob: f64,
}

impl TruncatedMvn {
    pub fn new(mean: DVector<f64>, cov: PdMatrix, lower: DVector<f64>) -> Result<Self> {
        Self::with_cdf(mean, cov, lower, &CdfOptions::default())
    }

    /// Truncation to the nonnegative orthant.
    pub fn orthant(mean: DVector<f64>, cov: PdMatrix) -> Result<Self> {
        let h = mean.len();
        Self::new(mean, cov, DVector::zeros(h))
    }

    pub fn with_cdf(
        mean: DVector<f64>,
        cov: PdMatrix,
        lower: DVector<f64>,
        cdf: &CdfOptions,
    ) -> Result<Self> {
        let h = mean.len();
        if cov.dim() != h || lower.len() != h {
            return Err(MnpError::Argument(format!(
                "truncated normal dimensions disagree: mean {h}, cov {}, bounds {}",
                cov.dim(),
                lower.len()
            )));
        }
        if lower.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(MnpError::Argument(
                "lower bounds must be finite or -inf".into(),
            ));
        }
        let log_region_prob = cdf.cdf(&(&mean - &lower), cov.values())?.log_prob;
        if !(log_region_prob > MIN_REGION_LOG_PROB) {
            return Err(MnpError::numeric(
                "truncated normal",
                format!("region probability too small (log {log_region_prob})"),
            ));
        }
        Ok(TruncatedMvn {
            mean,
            cov,
            lower,
            log_region_prob,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &PdMatrix {
        &self.cov
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn region_prob(&self) -> f64 {
        self.log_region_prob.exp()
    }

    pub fn log_region_prob(&self) -> f64 {
        self.log_region_prob
    }

    fn contains(&self, z: &[f64]) -> bool {
        z.iter().zip(self.lower.iter()).all(|(z, a)| z >= a)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    #[default]
    Auto,
    Rejection,
    Gibbs,
}

impl std::str::FromStr for SampleMethod {
    type Err = MnpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SampleMethod::Auto),
            "rejection" => Ok(SampleMethod::Rejection),
            "gibbs" => Ok(SampleMethod::Gibbs),
            other => Err(MnpError::Config(format!("unknown sampling method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GibbsConfig {
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            burn_in: 500,
            thin: 5,
        }
    }
}

/// What the sampler actually did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub method: SampleMethod,
    /// Draws are independent and exactly distributed.
    pub exact: bool,
    pub estimated_acceptance: f64,
    pub acceptance_rate: Option<f64>,
    /// Smallest per-coordinate `N (1 - ρ₁) / (1 + ρ₁)` over the Gibbs output.
    pub ess_proxy: Option<f64>,
    pub draws: usize,
}

pub fn tmvn_sample<R: Rng + ?Sized>(
    t: &TruncatedMvn,
    count: usize,
    rng: &mut R,
    method: SampleMethod,
) -> Result<(DMatrix<f64>, SamplerDiagnostics)> {
    tmvn_sample_with(t, count, rng, method, &GibbsConfig::default())
}

pub fn tmvn_sample_with<R: Rng + ?Sized>(
    t: &TruncatedMvn,
    count: usize,
    rng: &mut R,
    method: SampleMethod,
    gibbs: &GibbsConfig,
) -> Result<(DMatrix<f64>, SamplerDiagnostics)> {
    let acceptance = t.region_prob();
    let resolved = match method {
        SampleMethod::Auto if acceptance >= AUTO_REJECTION_THRESHOLD => SampleMethod::Rejection,
        SampleMethod::Auto => SampleMethod::Gibbs,
        m => m,
    };
    match resolved {
        SampleMethod::Rejection => {
            if acceptance < MIN_REJECTION_ACCEPTANCE {
                return Err(MnpError::InfeasibleMethod { acceptance });
            }
            rejection(t, count, rng)
        }
        _ => gibbs_chain(t, count, rng, gibbs),
    }
}

fn rejection<R: Rng + ?Sized>(
    t: &TruncatedMvn,
    count: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, SamplerDiagnostics)> {
    let h = t.dim();
    let l = t.cov.factor();
    let max_attempts = (1e7f64).max(100.0 * count as f64 / t.region_prob()) as u64;
    let mut out = DMatrix::zeros(count, h);
    let mut eps = DVector::zeros(h);
    let mut accepted = 0usize;
    let mut attempts = 0u64;
    while accepted < count {
        if attempts >= max_attempts {
            return Err(MnpError::numeric(
                "tmvn_sample",
                format!("rejection sampler exhausted {attempts} attempts"),
            ));
        }
        attempts += 1;
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let z = &t.mean + &l * &eps;
        if t.contains(z.as_slice()) {
            out.row_mut(accepted).copy_from(&z.transpose());
            accepted += 1;
        }
    }
    Ok((
        out,
        SamplerDiagnostics {
            method: SampleMethod::Rejection,
            exact: true,
            estimated_acceptance: t.region_prob(),
            acceptance_rate: Some(count as f64 / attempts as f64),
            ess_proxy: None,
            draws: count,
        },
    ))
}

fn gibbs_chain<R: Rng + ?Sized>(
    t: &TruncatedMvn,
    count: usize,
    rng: &mut R,
    cfg: &GibbsConfig,
) -> Result<(DMatrix<f64>, SamplerDiagnostics)> {
    let h = t.dim();
    let precision = t.cov.inverse();
    let cond_sd: Vec<f64> = (0..h).map(|k| (1.0 / precision[(k, k)]).sqrt()).collect();
    let mut x: Vec<f64> = (0..h)
        .map(|k| {
            let (m, a) = (t.mean[k], t.lower[k]);
            if m >= a {
                m
            } else {
                a + 0.5 * t.cov.values()[(k, k)].sqrt()
            }
        })
        .collect();
    let mut dev: Vec<f64> = (0..h).map(|k| x[k] - t.mean[k]).collect();
    let thin = cfg.thin.max(1);
    let total = cfg.burn_in + count * thin;
    let mut out = DMatrix::zeros(count, h);
    let mut kept = 0;
    for sweep in 0..total {
        for k in 0..h {
            let row = precision.row(k);
            let mut acc = 0.0;
            for j in 0..h {
                if j != k {
                    acc += row[j] * dev[j];
                }
            }
            let cond_mean = t.mean[k] - acc / precision[(k, k)];
            let sd = cond_sd[k];
            let z = sample_std_normal_above((t.lower[k] - cond_mean) / sd, rng);
            x[k] = cond_mean + sd * z;
            dev[k] = x[k] - t.mean[k];
        }
        if sweep >= cfg.burn_in && (sweep - cfg.burn_in + 1).is_multiple_of(thin) {
            for k in 0..h {
                out[(kept, k)] = x[k];
            }
            kept += 1;
        }
    }
    Ok((
        out.clone(),
        SamplerDiagnostics {
            method: SampleMethod::Gibbs,
            exact: false,
            estimated_acceptance: t.region_prob(),
            acceptance_rate: None,
            ess_proxy: Some(ess_proxy(&out)),
            draws: count,
        },
    ))
}

fn ess_proxy(draws: &DMatrix<f64>) -> f64 {
    let n = draws.nrows();
    if n < 3 {
        return n as f64;
    }
    let mut worst = n as f64;
    for col in draws.column_iter() {
        let mean = col.mean();
        let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        if var == 0.0 {
            continue;
        }
        let lag: f64 = (1..n).map(|i| (col[i] - mean) * (col[i - 1] - mean)).sum();
        let rho = (lag / var).clamp(-0.99, 0.999);
        worst = worst.min(n as f64 * (1.0 - rho) / (1.0 + rho));
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MomentMethod {
    Analytic,
    Mc { draws: usize, seed: u64 },
}

impl MomentMethod {
    /// Analytic up to [`ANALYTIC_MOMENT_CAP`], Monte Carlo with `10⁴` draws above.
    pub fn auto_for(dim: usize) -> Self {
        if dim <= ANALYTIC_MOMENT_CAP {
            MomentMethod::Analytic
        } else {
            MomentMethod::Mc {
                draws: 10_000,
                seed: 0,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmvnMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `ln P(region)` under the untruncated law.
    pub log_prob: f64,
}

pub fn tmvn_moments(t: &TruncatedMvn, method: MomentMethod) -> Result<TmvnMoments> {
    tmvn_moments_with(t, method, &CdfOptions::default())
}

pub fn tmvn_moments_with(
    t: &TruncatedMvn,
    method: MomentMethod,
    cdf: &CdfOptions,
) -> Result<TmvnMoments> {
    match method {
        MomentMethod::Analytic => analytic_moments(t, cdf),
        MomentMethod::Mc { draws, seed } => {
            if draws < 2 {
                return Err(MnpError::Argument("Monte Carlo moments need at least 2 draws".into()));
            }
            let mut rng = substream(seed, 0x006d_6f6d);
            let (samples, _) = tmvn_sample(t, draws, &mut rng, SampleMethod::Auto)?;
            let (mean, cov) = sample_moments(&samples);
            Ok(TmvnMoments {
                mean,
                cov,
                log_prob: t.log_region_prob,
            })
        }
    }
}

/// Row-wise sample mean and unbiased covariance.
pub fn sample_moments(draws: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = draws.nrows() as f64;
    let mean = draws.row_mean().transpose();
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, symmetrize(&cov))
}

/// First and second moments of the lower-truncated normal through the
/// Tallis-type recursions: `E[W]` and `E[WWᵀ]` for `W = μ - X`, which is a
/// zero-mean normal truncated from above at `b = μ - a`, expressed with the
/// one- and two-coordinate marginal densities of the truncated law.
fn analytic_moments(t: &TruncatedMvn, cdf: &CdfOptions) -> Result<TmvnMoments> {
    let h = t.dim();
    if h > ANALYTIC_MOMENT_CAP {
        return Err(MnpError::Capacity {
            what: "analytic truncated moments (use the mc method)",
            dim: h,
            cap: ANALYTIC_MOMENT_CAP,
        });
    }
    let s = t.cov.values();
    let b: Vec<f64> = (0..h).map(|i| t.mean[i] - t.lower[i]).collect();
    let log_alpha = t.log_region_prob;

    // one-dimensional marginal densities F_k(b_k)
    let mut f1 = vec![0.0; h];
    for k in 0..h {
        if !b[k].is_finite() {
            continue;
        }
        let skk = s[(k, k)];
        let rest: Vec<usize> = (0..h).filter(|&j| j != k).collect();
        let mut log_f = log_norm_pdf(b[k] / skk.sqrt()) - 0.5 * skk.ln();
        if !rest.is_empty() {
            let m = rest.len();
            let bound = DVector::from_fn(m, |r, _| b[rest[r]] - s[(rest[r], k)] * b[k] / skk);
            let cov = DMatrix::from_fn(m, m, |r, c| {
                s[(rest[r], rest[c])] - s[(rest[r], k)] * s[(k, rest[c])] / skk
            });
            log_f += cdf.cdf(&bound, &symmetrize(&cov))?.log_prob;
        }
        f1[k] = (log_f - log_alpha).exp();
    }

    // two-dimensional marginal densities F_kq(b_k, b_q)
    let mut f2 = DMatrix::zeros(h, h);
    for k in 0..h {
        for q in (k + 1)..h {
            if !b[k].is_finite() || !b[q].is_finite() {
                continue;
            }
            let (skk, sqq, skq) = (s[(k, k)], s[(q, q)], s[(k, q)]);
            let det = skk * sqq - skq * skq;
            if det <= 0.0 {
                return Err(MnpError::numeric(
                    "tmvn_moments",
                    format!("2x2 block ({k}, {q}) is singular"),
                ));
            }
            let inv = [[sqq / det, -skq / det], [-skq / det, skk / det]];
            let quad = b[k] * (inv[0][0] * b[k] + inv[0][1] * b[q])
                + b[q] * (inv[1][0] * b[k] + inv[1][1] * b[q]);
            let mut log_f = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
            let rest: Vec<usize> = (0..h).filter(|&j| j != k && j != q).collect();
            if !rest.is_empty() {
                let m = rest.len();
                // regression coefficients of the remaining coordinates on (k, q)
                let coef: Vec<[f64; 2]> = rest
                    .iter()
                    .map(|&r| {
                        let (srk, srq) = (s[(r, k)], s[(r, q)]);
                        [
                            srk * inv[0][0] + srq * inv[1][0],
                            srk * inv[0][1] + srq * inv[1][1],
                        ]
                    })
                    .collect();
                let bound = DVector::from_fn(m, |r, _| {
                    b[rest[r]] - coef[r][0] * b[k] - coef[r][1] * b[q]
                });
                let cov = DMatrix::from_fn(m, m, |r, c| {
                    let rc = rest[c];
                    s[(rest[r], rc)] - coef[r][0] * s[(k, rc)] - coef[r][1] * s[(q, rc)]
                });
                log_f += cdf.cdf(&bound, &symmetrize(&cov))?.log_prob;
            }
            let v = (log_f - log_alpha).exp();
            f2[(k, q)] = v;
            f2[(q, k)] = v;
        }
    }

    let mut ew = DVector::zeros(h);
    for i in 0..h {
        ew[i] = -(0..h).map(|k| s[(i, k)] * f1[k]).sum::<f64>();
    }
    let mut eww = DMatrix::zeros(h, h);
    for i in 0..h {
        for j in 0..=i {
            let mut v = s[(i, j)];
            for k in 0..h {
                if f1[k] != 0.0 {
                    v -= s[(i, k)] * s[(j, k)] * b[k] * f1[k] / s[(k, k)];
                }
                let mut inner = 0.0;
                for q in 0..h {
                    if q != k && f2[(k, q)] != 0.0 {
                        inner += (s[(j, q)] - s[(k, q)] * s[(j, k)] / s[(k, k)]) * f2[(k, q)];
                    }
                }
                v += s[(i, k)] * inner;
            }
            eww[(i, j)] = v;
            eww[(j, i)] = v;
        }
    }
    let cov = symmetrize(&(eww - &ew * ew.transpose()));
    if cov.iter().chain(ew.iter()).any(|v| !v.is_finite()) {
        return Err(MnpError::numeric(
            "tmvn_moments",
            "analytic moments are not finite",
        ));
    }
    Ok(TmvnMoments {
        mean: &t.mean - ew,
        cov,
        log_prob: log_alpha,
    })
}
