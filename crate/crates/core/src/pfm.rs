//! Partially-factorized blocked mean-field (PFM-B) approximation.
//!
//! The joint posterior of `(β, z̄)` is approximated by
//! `q(β | z̄) ∏ᵢ q(z̄ᵢ)`. The conditional factor is exact,
//! `q*(β | z̄) = N(V X̄ᵀ Λ⁻¹ z̄, V)` with `V = (ν⁻² I + X̄ᵀ Λ⁻¹ X̄)⁻¹`, and
//! each block `q*(z̄ᵢ)` is an `(L-1)`-variate normal truncated to the
//! positive orthant with covariance `Σᵢ* = (Λ_{[ii]}⁻¹ - H_{[ii]})⁻¹`, where
//! `H = Λ⁻¹ X̄ V X̄ᵀ Λ⁻¹` so that `(Λ + ν² X̄ X̄ᵀ)⁻¹ = Λ⁻¹ - H`. Only the
//! block locations `μᵢ = Σᵢ* Σ_{j≠i} H_{[ij]} E[z̄ⱼ]` are iterated.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};
use crate::model::{build_design_expansion, DesignExpansion, MnpModel};
use crate::mvn::pd::symmetrize;
use crate::mvn::{
    chol_psd, chol_psd_named, mvn_sample, substream, tmvn_moments_with, tmvn_sample_with,
    CdfOptions, GibbsConfig, MomentMethod, PdMatrix, SampleMethod, SamplerDiagnostics,
    TruncatedMvn, DEFAULT_MAX_JITTER,
};
use crate::sun::{merge_diagnostics, DrawDiagnostics, PosteriorDraws};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Quantities fixed for the whole CAVI run.
#[derive(Clone, Debug)]
pub struct PfmPrecomp {
    v: PdMatrix,
    /// `A = V X̄ᵀ Λ⁻¹`, `q × n(L-1)`.
    a: DMatrix<f64>,
    /// Dense `H`, addressed blockwise.
    h: DMatrix<f64>,
    sigma_star: Vec<PdMatrix>,
    /// `Σᵢ*⁻¹ = Λ_{[ii]}⁻¹ - H_{[ii]}`.
    precision_star: Vec<DMatrix<f64>>,
    block: usize,
    /// `ln |Λ + ν² X̄ X̄ᵀ|`.
    log_det_marginal: f64,
}

impl PfmPrecomp {
    pub fn v(&self) -> &PdMatrix {
        &self.v
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn h_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.block;
        self.h.view((i * d, j * d), (d, d)).into_owned()
    }

    pub fn sigma_star(&self, i: usize) -> &PdMatrix {
        &self.sigma_star[i]
    }

    pub fn n_blocks(&self) -> usize {
        self.sigma_star.len()
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    /// Max-norm of `(Λ + ν² X̄ X̄ᵀ)(Λ⁻¹ - H) - I`.
    pub fn woodbury_residual(&self, expansion: &DesignExpansion, nu2: f64) -> f64 {
        let s = expansion.marginal_latent_cov(nu2);
        let d = self.block;
        let mut split = -self.h.clone();
        for (i, lam) in expansion.lambda_blocks().iter().enumerate() {
            let mut view = split.view_mut((i * d, i * d), (d, d));
            view += lam.inverse();
        }
        let n = s.nrows();
        (s * split - DMatrix::<f64>::identity(n, n)).amax()
    }
}

pub fn precompute(model: &MnpModel, expansion: &DesignExpansion) -> Result<PfmPrecomp> {
    let q = expansion.coef_dim();
    let d = expansion.block_size();
    let n = expansion.n_blocks();
    // X̄ᵀ Λ⁻¹, assembled blockwise
    let mut xt_linv = DMatrix::zeros(q, n * d);
    let mut lambda_inv = Vec::with_capacity(n);
    let mut log_det_lambda = 0.0;
    for i in 0..n {
        let lam = expansion.lambda_block(i);
        let block = lam.solve_matrix(&expansion.xbar_block(i)).transpose();
        xt_linv.columns_mut(i * d, d).copy_from(&block);
        lambda_inv.push(lam.inverse());
        log_det_lambda += lam.ln_det();
    }
    let mut v_inv = &xt_linv * expansion.xbar();
    for k in 0..q {
        v_inv[(k, k)] += 1.0 / model.nu2();
    }
    let v_inv = chol_psd_named(&symmetrize(&v_inv), 0.0, "V^-1")
        .map_err(|e| MnpError::numeric("pfm precompute", e.to_string()))?;
    let v = chol_psd_named(&v_inv.inverse(), DEFAULT_MAX_JITTER, "V")?;
    let a = v.values() * &xt_linv;
    let h = symmetrize(&(xt_linv.transpose() * &a));

    let mut sigma_star = Vec::with_capacity(n);
    let mut precision_star = Vec::with_capacity(n);
    for (i, linv) in lambda_inv.iter().enumerate() {
        let p = symmetrize(&(linv - h.view((i * d, i * d), (d, d))));
        let name = format!("Sigma_star block {}", i + 1);
        let p_fact = chol_psd_named(&p, DEFAULT_MAX_JITTER, &name)
            .map_err(|e| MnpError::numeric("pfm precompute", e.to_string()))?;
        let s = chol_psd_named(&p_fact.inverse(), DEFAULT_MAX_JITTER, &name)
            .map_err(|e| MnpError::numeric("pfm precompute", e.to_string()))?;
        sigma_star.push(s);
        precision_star.push(p);
    }
    let log_det_marginal =
        log_det_lambda + q as f64 * model.nu2().ln() + v_inv.ln_det();
    Ok(PfmPrecomp {
        v,
        a,
        h,
        sigma_star,
        precision_star,
        block: d,
        log_det_marginal,
    })
}

/// Current factor `q(z̄ᵢ) = TN(μᵢ, Σᵢ*; [0, ∞)^{L-1})` and its moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockFactor {
    pub location: DVector<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `ln P(N(μᵢ, Σᵢ*) ≥ 0)`.
    pub log_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfmState {
    /// `mᵢ = E_q[z̄ᵢ]`.
    pub m: Vec<DVector<f64>>,
    /// Empty until the first sweep.
    pub factors: Vec<BlockFactor>,
    pub sweep_count: usize,
    pub converged: bool,
    pub last_delta: f64,
}

impl PfmState {
    pub fn stacked_mean(&self) -> DVector<f64> {
        let d = self.m.first().map_or(0, |v| v.len());
        let mut out = DVector::zeros(self.m.len() * d);
        for (i, mi) in self.m.iter().enumerate() {
            out.rows_mut(i * d, d).copy_from(mi);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "values")]
pub enum InitPolicy {
    /// `√(2/π) √diag(Λ_{[ii]})`, coordinatewise half-normal means.
    #[default]
    HalfNormal,
    Ones,
    /// Explicit starting means, e.g. from a checkpoint.
    Given(Vec<Vec<f64>>),
}

pub fn init_state(expansion: &DesignExpansion, init: &InitPolicy) -> Result<PfmState> {
    let d = expansion.block_size();
    let n = expansion.n_blocks();
    let m = match init {
        InitPolicy::HalfNormal => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            expansion
                .lambda_blocks()
                .iter()
                .map(|l| l.values().diagonal().map(|v| c * v.sqrt()))
                .collect()
        }
        InitPolicy::Ones => vec![DVector::from_element(d, 1.0); n],
        InitPolicy::Given(values) => {
            if values.len() != n || values.iter().any(|v| v.len() != d) {
                return Err(MnpError::Argument(format!(
                    "initial means must be {n} blocks of length {d}"
                )));
            }
            values.iter().map(|v| DVector::from_vec(v.clone())).collect()
        }
    };
    Ok(PfmState {
        m,
        factors: Vec::new(),
        sweep_count: 0,
        converged: false,
        last_delta: f64::INFINITY,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    /// `None` picks analytic moments up to the analytic cap and Monte Carlo above.
    pub moment_method: Option<MomentMethod>,
    pub order: SweepOrder,
    pub cdf: CdfOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            moment_method: None,
            order: SweepOrder::Forward,
            cdf: CdfOptions::default(),
        }
    }
}

fn block_factor(
    i: usize,
    location: DVector<f64>,
    precomp: &PfmPrecomp,
    method: MomentMethod,
    cdf: &CdfOptions,
) -> Result<BlockFactor> {
    let wrap = |e: MnpError| MnpError::numeric(format!("cavi block {}", i + 1), e.to_string());
    let t = TruncatedMvn::with_cdf(
        location.clone(),
        precomp.sigma_star[i].clone(),
        DVector::zeros(location.len()),
        cdf,
    )
    .map_err(wrap)?;
    let mom = tmvn_moments_with(&t, method, cdf).map_err(wrap)?;
    Ok(BlockFactor {
        location,
        mean: mom.mean,
        cov: mom.cov,
        log_norm: mom.log_prob,
    })
}

/// One pass of coordinate updates over all blocks, each reading the
/// freshest neighbor means.
pub fn cavi_sweep(state: &PfmState, precomp: &PfmPrecomp, cfg: &SweepConfig) -> Result<PfmState> {
    let n = precomp.n_blocks();
    let d = precomp.block;
    if state.m.len() != n || state.m.iter().any(|m| m.len() != d) {
        return Err(MnpError::Argument(format!(
            "state has {} blocks, expected {n} of length {d}",
            state.m.len()
        )));
    }
    let method = cfg.moment_method.unwrap_or_else(|| MomentMethod::auto_for(d));
    let mut next = state.clone();
    if next.factors.len() != n {
        next.factors = vec![
            BlockFactor {
                location: DVector::zeros(d),
                mean: DVector::zeros(d),
                cov: DMatrix::zeros(d, d),
                log_norm: f64::NAN,
            };
            n
        ];
    }
    let order: Vec<usize> = match cfg.order {
        SweepOrder::Forward => (0..n).collect(),
        SweepOrder::Reverse => (0..n).rev().collect(),
    };
    let mut delta: f64 = 0.0;
    for i in order {
        let mut r = DVector::zeros(d);
        for j in 0..n {
            if j != i {
                r += precomp.h.view((i * d, j * d), (d, d)) * &next.m[j];
            }
        }
        let location = precomp.sigma_star[i].values() * r;
        let factor = block_factor(i, location, precomp, method, &cfg.cdf)?;
        delta = delta.max((&factor.mean - &next.m[i]).amax());
        next.m[i] = factor.mean.clone();
        next.factors[i] = factor;
    }
    next.sweep_count += 1;
    next.last_delta = delta;
    next.converged = false;
    Ok(next)
}

/// `E_q[ln φ(z̄; 0, Λ + ν² X̄ X̄ᵀ)] + Σᵢ H[q(z̄ᵢ)]`, which equals
/// `ln p(y) - KL[q(z̄) ‖ p(z̄ | y)]`.
pub fn elbo(state: &PfmState, precomp: &PfmPrecomp) -> Result<f64> {
    let n = precomp.n_blocks();
    if state.factors.len() != n {
        return Err(MnpError::Argument(
            "ELBO needs block moments; run at least one sweep".into(),
        ));
    }
    let m = state.stacked_mean();
    let cross = (m.transpose() * &precomp.h * &m)[(0, 0)];
    let mut quad = -cross;
    let mut entropy = 0.0;
    for (i, f) in state.factors.iter().enumerate() {
        let p = &precomp.precision_star[i];
        let mi = &state.m[i];
        let hii = precomp.h.view((i * precomp.block, i * precomp.block), (precomp.block, precomp.block));
        // undo the diagonal block of mᵀ H m; P already carries -H_ii
        quad += (mi.transpose() * hii * mi)[(0, 0)];
        let second = &f.cov + mi * mi.transpose();
        quad += (p * second).trace();
        let dev = mi - &f.location;
        let centered = &f.cov + &dev * dev.transpose();
        entropy += f.log_norm + 0.5 * precomp.sigma_star[i].ln_det() + 0.5 * (p * centered).trace();
    }
    let h_dim = (n * precomp.block) as f64;
    let expected_log_joint = -0.5 * h_dim * LN_2PI - 0.5 * precomp.log_det_marginal - 0.5 * quad;
    let entropy_const = 0.5 * h_dim * LN_2PI;
    let value = expected_log_joint + entropy + entropy_const;
    if !value.is_finite() {
        return Err(MnpError::numeric("elbo", "ELBO is not finite"));
    }
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct CaviOptions {
    pub eps: f64,
    pub max_sweeps: usize,
    pub init: InitPolicy,
    pub sweep: SweepConfig,
    pub track_elbo: bool,
}

impl Default for CaviOptions {
    fn default() -> Self {
        CaviOptions {
            eps: 1e-8,
            max_sweeps: 1000,
            init: InitPolicy::HalfNormal,
            sweep: SweepConfig::default(),
            track_elbo: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VbPosterior {
    pub precomp: PfmPrecomp,
    pub state: PfmState,
    /// Covariances of the final `q*(z̄ᵢ)`.
    pub z_cov_blocks: Vec<DMatrix<f64>>,
    pub elbo_trace: Vec<f64>,
    pub eps: f64,
}

impl VbPosterior {
    pub fn converged(&self) -> bool {
        self.state.converged
    }

    fn require_converged(&self) -> Result<()> {
        if self.state.converged {
            Ok(())
        } else {
            Err(MnpError::NotConverged {
                sweeps: self.state.sweep_count,
                last_delta: self.state.last_delta,
            })
        }
    }
}

pub fn run_cavi(model: &MnpModel, opts: &CaviOptions) -> Result<VbPosterior> {
    let expansion = build_design_expansion(model)?;
    run_cavi_with(model, &expansion, opts)
}

/// Sweeps until the largest change in any block mean drops below `eps`.
/// Hitting `max_sweeps` returns a posterior flagged as not converged, which
/// the moment and sampling routines refuse.
pub fn run_cavi_with(
    model: &MnpModel,
    expansion: &DesignExpansion,
    opts: &CaviOptions,
) -> Result<VbPosterior> {
    if !(opts.eps > 0.0) {
        return Err(MnpError::Argument(format!("eps must be positive, got {}", opts.eps)));
    }
    let precomp = precompute(model, expansion)?;
    let mut state = init_state(expansion, &opts.init)?;
    let mut trace = Vec::new();
    while state.sweep_count < opts.max_sweeps {
        state = cavi_sweep(&state, &precomp, &opts.sweep)?;
        if opts.track_elbo {
            trace.push(elbo(&state, &precomp)?);
        }
        if state.last_delta < opts.eps {
            state.converged = true;
            break;
        }
    }
    let z_cov_blocks = state.factors.iter().map(|f| f.cov.clone()).collect();
    Ok(VbPosterior {
        precomp,
        state,
        z_cov_blocks,
        elbo_trace: trace,
        eps: opts.eps,
    })
}

/// Approximate posterior mean and covariance of `β`:
/// `E[β] = A E[z̄]`, `var(β) = V + A var(z̄) Aᵀ`.
pub fn vb_beta_moments(vb: &VbPosterior) -> Result<(DVector<f64>, DMatrix<f64>)> {
    vb.require_converged()?;
    let pc = &vb.precomp;
    let d = pc.block;
    let mean = &pc.a * vb.state.stacked_mean();
    let mut cov = pc.v.values().clone();
    for (i, c) in vb.z_cov_blocks.iter().enumerate() {
        let ai = pc.a.columns(i * d, d);
        cov += ai * c * ai.transpose();
    }
    Ok((mean, symmetrize(&cov)))
}

/// Draws `β` by sampling each `z̄ᵢ` from its own `(L-1)`-variate truncated
/// normal and then `β | z̄ ~ N(A z̄, V)`.
pub fn vb_sample_beta(
    vb: &VbPosterior,
    count: usize,
    seed: u64,
    gibbs: &GibbsConfig,
    cdf: &CdfOptions,
) -> Result<PosteriorDraws> {
    vb.require_converged()?;
    if count == 0 {
        return Err(MnpError::Argument("need at least one draw".into()));
    }
    let pc = &vb.precomp;
    let n = pc.n_blocks();
    let d = pc.block;
    let blocks: Vec<(DMatrix<f64>, SamplerDiagnostics)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let f = &vb.state.factors[i];
            let t = TruncatedMvn::with_cdf(
                f.location.clone(),
                pc.sigma_star[i].clone(),
                DVector::zeros(d),
                cdf,
            )?;
            let mut rng = substream(seed, i as u64);
            tmvn_sample_with(&t, count, &mut rng, SampleMethod::Auto, gibbs)
        })
        .collect::<Result<_>>()?;
    let mut z = DMatrix::zeros(n * d, count);
    for (i, (draws, _)) in blocks.iter().enumerate() {
        z.rows_mut(i * d, d).copy_from(&draws.transpose());
    }
    let q = pc.a.nrows();
    let mut rng = substream(seed, n as u64);
    let noise = mvn_sample(&DVector::zeros(q), &pc.v, count, &mut rng)?;
    let samples = (&pc.a * z).transpose() + noise;
    let diags: Vec<SamplerDiagnostics> = blocks.into_iter().map(|(_, d)| d).collect();
    Ok(PosteriorDraws {
        samples,
        seed,
        diagnostics: DrawDiagnostics {
            sampler: merge_diagnostics(&diags),
            residual_jitter: pc.v.jitter_applied(),
            shards: n,
        },
        latent: None,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable snapshot of a CAVI run.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmCheckpoint {
    pub m: Vec<DVector<f64>>,
    pub sweep_count: usize,
    pub converged: bool,
    pub last_delta: f64,
    pub eps: f64,
    pub seed: u64,
}

impl PfmCheckpoint {
    pub fn from_posterior(vb: &VbPosterior, seed: u64) -> Self {
        PfmCheckpoint {
            m: vb.state.m.clone(),
            sweep_count: vb.state.sweep_count,
            converged: vb.state.converged,
            last_delta: vb.state.last_delta,
            eps: vb.eps,
            seed,
        }
    }

    /// Starting point for a resumed run.
    pub fn init_policy(&self) -> InitPolicy {
        InitPolicy::Given(self.m.iter().map(|v| v.iter().copied().collect()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let d = self.m.first().map_or(0, |v| v.len());
        writeln!(out, "pfm_state_version={CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "n_blocks={}", self.m.len()).unwrap();
        writeln!(out, "block_size={d}").unwrap();
        writeln!(out, "sweep_count={}", self.sweep_count).unwrap();
        writeln!(out, "converged={}", self.converged).unwrap();
        writeln!(out, "last_delta={:.16e}", self.last_delta).unwrap();
        writeln!(out, "eps={:.16e}", self.eps).unwrap();
        writeln!(out, "seed={}", self.seed).unwrap();
        for (i, m) in self.m.iter().enumerate() {
            let vals: Vec<String> = m.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "m_{}={}", i + 1, vals.join(",")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| MnpError::Config(format!("checkpoint: {msg}"));
        let mut fields = std::collections::HashMap::new();
        let mut m_lines = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            if let Some(idx) = k.strip_prefix("m_") {
                let idx: usize = idx.parse().map_err(|_| bad(format!("bad key `{k}`")))?;
                m_lines.push((idx, v.to_string()));
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
        let version: u32 = get("pfm_state_version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n: usize = get("n_blocks")?.parse().map_err(|_| bad("bad n_blocks".into()))?;
        let d: usize = get("block_size")?.parse().map_err(|_| bad("bad block_size".into()))?;
        m_lines.sort_by_key(|(i, _)| *i);
        if m_lines.len() != n || m_lines.iter().enumerate().any(|(k, (i, _))| *i != k + 1) {
            return Err(bad(format!("expected blocks m_1..m_{n}")));
        }
        let m = m_lines
            .iter()
            .map(|(_, v)| {
                let vals: Vec<f64> = v
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                if vals.len() != d {
                    return Err(bad(format!("block of length {} instead of {d}", vals.len())));
                }
                Ok(DVector::from_vec(vals))
            })
            .collect::<Result<Vec<_>>>()?;
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        Ok(PfmCheckpoint {
            m,
            sweep_count: get("sweep_count")?.parse().map_err(|_| bad("bad sweep_count".into()))?,
            converged: get("converged")?.parse().map_err(|_| bad("bad converged".into()))?,
            last_delta: num("last_delta")?,
            eps: num("eps")?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| MnpError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MnpError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Jitter-tolerant PD check used by diagnostics.
pub fn is_pd(m: &DMatrix<f64>, max_jitter: f64) -> bool {
    chol_psd(m, max_jitter).is_ok()
}
