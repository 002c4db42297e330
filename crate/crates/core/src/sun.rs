//! Unified skew-normal laws and the exact multinomial probit posterior.
//!
//! Under the prior `β ~ N(0, ν² I)` the posterior is
//! `SUN_{q,h}(0, ν² I, Δ, 0, Γ)` with `q = p(L-1)`, `h = n(L-1)`,
//! `Δ = ν X̄ᵀ s⁻¹`, `Γ = s⁻¹ (ν² X̄ X̄ᵀ + Λ) s⁻¹` and
//! `s = diag(ν² X̄ X̄ᵀ + Λ)^{1/2}`. Draws use the additive representation
//! `β = ξ + ω (V₀ + Δ Γ⁻¹ V₁)` with `V₀` Gaussian and `V₁` orthant-truncated.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};
use crate::model::{DesignExpansion, MnpModel};
use crate::mvn::normal::LN_SQRT_2PI;
use crate::mvn::pd::symmetrize;
use crate::mvn::{
    chol_psd_named, mvn_sample, substream, tmvn_sample_with, CdfOptions, GibbsConfig, PdMatrix,
    SampleMethod, SamplerDiagnostics, TruncatedMvn, DEFAULT_MAX_JITTER,
};

const UNIT_DIAG_TOL: f64 = 1e-12;

/// Parameters `(ξ, Ω, Δ, γ, Γ)` of a `SUN_{q,h}` law.
#[derive(Clone, Debug)]
pub struct SunParams {
    xi: DVector<f64>,
    omega: PdMatrix,
    scale: DVector<f64>,
    omega_bar: PdMatrix,
    delta: DMatrix<f64>,
    gamma: DVector<f64>,
    gamma_mat: PdMatrix,
    /// Factor of `Ω̄ - Δ Γ⁻¹ Δᵀ`, the covariance of `V₀`.
    residual: PdMatrix,
}

impl SunParams {
    pub fn new(
        xi: DVector<f64>,
        omega: &DMatrix<f64>,
        delta: DMatrix<f64>,
        gamma: DVector<f64>,
        gamma_mat: &DMatrix<f64>,
    ) -> Result<Self> {
        let q = xi.len();
        let h = gamma.len();
        if omega.nrows() != q || delta.nrows() != q || delta.ncols() != h || gamma_mat.nrows() != h {
            return Err(MnpError::Argument(format!(
                "SUN dimensions disagree: xi {q}, Omega {}x{}, Delta {}x{}, gamma {h}, Gamma {}x{}",
                omega.nrows(),
                omega.ncols(),
                delta.nrows(),
                delta.ncols(),
                gamma_mat.nrows(),
                gamma_mat.ncols()
            )));
        }
        for i in 0..h {
            if (gamma_mat[(i, i)] - 1.0).abs() > UNIT_DIAG_TOL {
                return Err(MnpError::Argument(format!(
                    "Gamma must be a correlation matrix; diagonal {i} is {}",
                    gamma_mat[(i, i)]
                )));
            }
        }
        let omega = chol_psd_named(omega, DEFAULT_MAX_JITTER, "Omega")?;
        let scale = omega.values().diagonal().map(f64::sqrt);
        let omega_bar_m = DMatrix::from_fn(q, q, |i, j| {
            omega.values()[(i, j)] / (scale[i] * scale[j])
        });
        let omega_bar = chol_psd_named(&omega_bar_m, DEFAULT_MAX_JITTER, "Omega_bar")?;
        let gamma_mat = chol_psd_named(gamma_mat, DEFAULT_MAX_JITTER, "Gamma")?;
        let g_inv_dt = gamma_mat.solve_matrix(&delta.transpose());
        let resid = symmetrize(&(omega_bar.values() - &delta * g_inv_dt));
        let residual = chol_psd_named(&resid, DEFAULT_MAX_JITTER, "Omega_bar - Delta Gamma^-1 Delta^T")?;
        Ok(SunParams {
            xi,
            omega,
            scale,
            omega_bar,
            delta,
            gamma,
            gamma_mat,
            residual,
        })
    }

    pub fn q(&self) -> usize {
        self.xi.len()
    }

    pub fn h(&self) -> usize {
        self.gamma.len()
    }

    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    pub fn omega(&self) -> &PdMatrix {
        &self.omega
    }

    /// Diagonal of `ω = (Ω ⊙ I)^{1/2}`.
    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn omega_bar(&self) -> &PdMatrix {
        &self.omega_bar
    }

    pub fn delta(&self) -> &DMatrix<f64> {
        &self.delta
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn gamma_mat(&self) -> &PdMatrix {
        &self.gamma_mat
    }

    pub fn residual_cov(&self) -> &PdMatrix {
        &self.residual
    }
}

/// Exact posterior of `β` as a SUN law.
pub fn posterior_params(model: &MnpModel, expansion: &DesignExpansion) -> Result<SunParams> {
    let nu2 = model.nu2();
    let nu = nu2.sqrt();
    let s_mat = expansion.marginal_latent_cov(nu2);
    chol_psd_named(&s_mat, 0.0, "nu^2 Xbar Xbar^T + Lambda").map_err(|e| {
        MnpError::numeric("posterior_params", e.to_string())
    })?;
    let h = expansion.latent_dim();
    let q = expansion.coef_dim();
    let s = s_mat.diagonal().map(f64::sqrt);
    let mut delta = expansion.xbar().transpose() * nu;
    for (j, mut col) in delta.column_iter_mut().enumerate() {
        col /= s[j];
    }
    let mut gamma_mat = DMatrix::from_fn(h, h, |i, j| s_mat[(i, j)] / (s[i] * s[j]));
    for i in 0..h {
        gamma_mat[(i, i)] = 1.0;
    }
    SunParams::new(
        DVector::zeros(q),
        &DMatrix::from_diagonal_element(q, q, nu2),
        delta,
        DVector::zeros(h),
        &gamma_mat,
    )
}

/// Precomputed pieces of the SUN log density.
#[derive(Clone, Debug)]
pub struct SunDensity {
    params: SunParams,
    /// `Δᵀ Ω̄⁻¹`
    skew_map: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    log_normalizer: f64,
    cdf: CdfOptions,
}

impl SunDensity {
    pub fn new(params: &SunParams, cdf: &CdfOptions) -> Result<Self> {
        let skew_map = params.omega_bar.solve_matrix(&params.delta).transpose();
        let cond_cov = symmetrize(&(params.gamma_mat.values() - &skew_map * &params.delta));
        let log_normalizer = cdf
            .clone()
            .relative()
            .cdf(&params.gamma, params.gamma_mat.values())?
            .log_prob;
        Ok(SunDensity {
            params: params.clone(),
            skew_map,
            cond_cov,
            log_normalizer,
            cdf: cdf.clone(),
        })
    }

    /// `ln Φ_h(γ; Γ)`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn log_density(&self, beta: &DVector<f64>) -> Result<f64> {
        let p = &self.params;
        if beta.len() != p.q() {
            return Err(MnpError::Argument(format!(
                "beta has length {}, expected {}",
                beta.len(),
                p.q()
            )));
        }
        let centered = beta - &p.xi;
        let log_phi = -(p.q() as f64) * LN_SQRT_2PI
            - 0.5 * p.omega.ln_det()
            - 0.5 * p.omega.quad_form_inv(&centered);
        let standardized = centered.component_div(&p.scale);
        let arg = &p.gamma + &self.skew_map * standardized;
        let log_skew = self.cdf.cdf(&arg, &self.cond_cov)?.log_prob;
        Ok(log_phi + log_skew - self.log_normalizer)
    }
}

/// SUN density at `beta` (natural log when `log_scale`).
pub fn sun_density(beta: &DVector<f64>, params: &SunParams, log_scale: bool) -> Result<f64> {
    let ld = SunDensity::new(params, &CdfOptions::default())?.log_density(beta)?;
    Ok(if log_scale { ld } else { ld.exp() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub prob: f64,
    pub log_prob: f64,
    pub error: f64,
}

/// Marginal likelihood `p(y) = Φ_{n(L-1)}(0; Λ + ν² X̄ X̄ᵀ)`.
pub fn evidence(model: &MnpModel, expansion: &DesignExpansion) -> Result<Evidence> {
    evidence_with(model, expansion, &CdfOptions::default())
}

pub fn evidence_with(
    model: &MnpModel,
    expansion: &DesignExpansion,
    cdf: &CdfOptions,
) -> Result<Evidence> {
    let s = expansion.marginal_latent_cov(model.nu2());
    let v = cdf.clone().relative().cdf(&DVector::zeros(s.nrows()), &s)?;
    Ok(Evidence {
        prob: v.prob,
        log_prob: v.log_prob,
        error: v.error,
    })
}

#[derive(Clone, Debug)]
pub struct SunSampleOptions {
    pub trunc_method: SampleMethod,
    pub gibbs: GibbsConfig,
    /// Independent substreams; draws are concatenated in shard order.
    pub shards: usize,
    /// Keep the `V₀`/`V₁` intermediates.
    pub keep_latent: bool,
    pub cdf: CdfOptions,
}

impl Default for SunSampleOptions {
    fn default() -> Self {
        SunSampleOptions {
            trunc_method: SampleMethod::Auto,
            gibbs: GibbsConfig::default(),
            shards: 4,
            keep_latent: false,
            cdf: CdfOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawDiagnostics {
    pub sampler: SamplerDiagnostics,
    /// Jitter added to factor the covariance of `V₀`.
    pub residual_jitter: f64,
    pub shards: usize,
}

#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    /// `N × q`, one draw per row.
    pub samples: DMatrix<f64>,
    pub seed: u64,
    pub diagnostics: DrawDiagnostics,
    /// `(V₀, V₁)` per draw when requested.
    pub latent: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn shard_sizes(count: usize, shards: usize) -> Vec<usize> {
    let shards = shards.clamp(1, count.max(1));
    (0..shards)
        .map(|k| count / shards + usize::from(k < count % shards))
        .collect()
}

/// Combines per-shard sampler diagnostics.
pub(crate) fn merge_diagnostics(parts: &[SamplerDiagnostics]) -> SamplerDiagnostics {
    let draws: usize = parts.iter().map(|d| d.draws).sum();
    let first = &parts[0];
    let acceptance_rate = if parts.iter().all(|d| d.acceptance_rate.is_some()) {
        Some(
            parts
                .iter()
                .map(|d| d.acceptance_rate.unwrap() * d.draws as f64)
                .sum::<f64>()
                / draws.max(1) as f64,
        )
    } else {
        None
    };
    let ess_proxy = if parts.iter().any(|d| d.ess_proxy.is_some()) {
        Some(parts.iter().map(|d| d.ess_proxy.unwrap_or(d.draws as f64)).sum())
    } else {
        None
    };
    SamplerDiagnostics {
        method: first.method,
        exact: parts.iter().all(|d| d.exact),
        estimated_acceptance: first.estimated_acceptance,
        acceptance_rate,
        ess_proxy,
        draws,
    }
}

/// Draws from a SUN law through its additive representation.
pub fn sun_sample(
    params: &SunParams,
    count: usize,
    seed: u64,
    opts: &SunSampleOptions,
) -> Result<PosteriorDraws> {
    if count == 0 {
        return Err(MnpError::Argument("need at least one draw".into()));
    }
    let q = params.q();
    let h = params.h();
    let region = TruncatedMvn::with_cdf(
        DVector::zeros(h),
        params.gamma_mat.clone(),
        -&params.gamma,
        &opts.cdf,
    )?;
    let sizes = shard_sizes(count, opts.shards);
    let shards: Vec<(DMatrix<f64>, DMatrix<f64>, SamplerDiagnostics)> = sizes
        .par_iter()
        .enumerate()
        .map(|(k, &m)| {
            let mut rng = substream(seed, k as u64);
            let v0 = mvn_sample(&DVector::zeros(q), &params.residual, m, &mut rng)?;
            let (v1, diag) =
                tmvn_sample_with(&region, m, &mut rng, opts.trunc_method, &opts.gibbs)?;
            Ok((v0, v1, diag))
        })
        .collect::<Result<_>>()?;

    let mut v0 = DMatrix::zeros(count, q);
    let mut v1 = DMatrix::zeros(count, h);
    let mut row = 0;
    for (a, b, _) in &shards {
        v0.rows_mut(row, a.nrows()).copy_from(a);
        v1.rows_mut(row, b.nrows()).copy_from(b);
        row += a.nrows();
    }
    let diags: Vec<SamplerDiagnostics> = shards.into_iter().map(|(_, _, d)| d).collect();

    // β = ξ + ω (V₀ + Δ Γ⁻¹ V₁)
    let skew = &params.delta * params.gamma_mat.solve_matrix(&v1.transpose());
    let mut samples = v0.transpose() + skew;
    for mut col in samples.column_iter_mut() {
        col.component_mul_assign(&params.scale);
        col += &params.xi;
    }
    Ok(PosteriorDraws {
        samples: samples.transpose(),
        seed,
        diagnostics: DrawDiagnostics {
            sampler: merge_diagnostics(&diags),
            residual_jitter: params.residual.jitter_applied(),
            shards: sizes.len(),
        },
        latent: opts.keep_latent.then_some((v0, v1)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// Monte Carlo from the exact SUN posterior.
    ExactMc,
    /// Partially-factorized blocked mean-field approximation.
    PfmB,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSummary {
    pub provenance: Provenance,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    /// `(level, per-coordinate quantile)` pairs.
    pub quantiles: Vec<(f64, DVector<f64>)>,
    pub cov: DMatrix<f64>,
    pub draws: usize,
}

/// Linear-interpolation (type 7) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(
    draws: &DMatrix<f64>,
    levels: &[f64],
    provenance: Provenance,
) -> Result<PosteriorSummary> {
    let n = draws.nrows();
    if n < 2 {
        return Err(MnpError::Argument(format!("need at least 2 draws, got {n}")));
    }
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(MnpError::Argument(format!("quantile level {l} outside [0, 1]")));
    }
    let (mean, cov) = crate::mvn::sample_moments(draws);
    let sd = cov.diagonal().map(|v| v.max(0.0).sqrt());
    let sorted: Vec<Vec<f64>> = draws
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let quantiles = levels
        .iter()
        .map(|&l| {
            (
                l,
                DVector::from_iterator(sorted.len(), sorted.iter().map(|c| quantile_sorted(c, l))),
            )
        })
        .collect();
    Ok(PosteriorSummary {
        provenance,
        mean,
        sd,
        quantiles,
        cov,
        draws: n,
    })
}
