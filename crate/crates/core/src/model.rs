//! The discrete-choice multinomial probit model.
//!
//! Class `L` is the reference class with `β_L = 0`; the free coefficient
//! vector stacks the remaining classes, `β = (β_1ᵀ, …, β_{L-1}ᵀ)ᵀ`, so it has
//! length `p (L - 1)`. Labels are 1-based at the API boundary and 0-based in
//! storage.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MnpError, Result};
use crate::mvn::{chol_psd_named, substream, CdfOptions, PdMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    labels: Vec<usize>,
    x: DMatrix<f64>,
    n_classes: usize,
}

impl Dataset {
    /// `y` holds 1-based labels; `x` is `n × p` with one row per observation.
    pub fn new(y: Vec<usize>, x: DMatrix<f64>, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(MnpError::Validation(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if y.is_empty() {
            return Err(MnpError::Validation("dataset has no observations".into()));
        }
        if x.nrows() != y.len() {
            return Err(MnpError::Validation(format!(
                "{} labels but {} covariate rows",
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(MnpError::Validation("dataset has no covariates".into()));
        }
        if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(MnpError::Validation(format!(
                "non-finite covariate {v} at row {}",
                i % x.nrows() + 1
            )));
        }
        let mut labels = Vec::with_capacity(y.len());
        for (i, &label) in y.iter().enumerate() {
            if label < 1 || label > n_classes {
                return Err(MnpError::Validation(format!(
                    "label {label} of observation {} outside 1..={n_classes}",
                    i + 1
                )));
            }
            labels.push(label - 1);
        }
        Ok(Dataset {
            labels,
            x,
            n_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// 0-based label of observation `i`.
    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels_one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l + 1).collect()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariates(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Length of the free coefficient vector, `p (L - 1)`.
    pub fn coef_dim(&self) -> usize {
        self.p() * (self.n_classes - 1)
    }
}

#[derive(Clone, Debug)]
pub struct MnpModel {
    data: Dataset,
    sigma: PdMatrix,
    nu2: f64,
}

impl MnpModel {
    pub fn new(data: Dataset, sigma: &DMatrix<f64>, nu2: f64) -> Result<Self> {
        let sigma = validate_sigma(sigma, data.n_classes())?;
        if !(nu2 > 0.0 && nu2.is_finite()) {
            return Err(MnpError::Model(format!("prior variance must be positive, got {nu2}")));
        }
        Ok(MnpModel { data, sigma, nu2 })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn sigma(&self) -> &PdMatrix {
        &self.sigma
    }

    pub fn nu2(&self) -> f64 {
        self.nu2
    }

    pub fn n_classes(&self) -> usize {
        self.data.n_classes()
    }

    pub fn coef_dim(&self) -> usize {
        self.data.coef_dim()
    }
}

/// Checks that `sigma` is an `L × L` symmetric positive-definite matrix.
pub fn validate_sigma(sigma: &DMatrix<f64>, n_classes: usize) -> Result<PdMatrix> {
    if sigma.nrows() != n_classes || sigma.ncols() != n_classes {
        return Err(MnpError::Model(format!(
            "Sigma is {}x{}, expected {n_classes}x{n_classes}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    chol_psd_named(sigma, 0.0, "Sigma").map_err(|e| MnpError::Model(e.to_string()))
}

/// Contrast `V_{[-ℓ]}` mapping utilities to differences against class `ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastMatrix {
    /// 1-based class index.
    pub ell: usize,
    /// `(L-1) × L`, rows `(v_k - v_ℓ)ᵀ` for `k ≠ ℓ` in ascending order.
    pub full: DMatrix<f64>,
    /// `full` without its last column.
    pub reduced: DMatrix<f64>,
}

pub fn build_contrast(ell: usize, n_classes: usize) -> Result<ContrastMatrix> {
    if n_classes < 2 {
        return Err(MnpError::Argument(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    if ell < 1 || ell > n_classes {
        return Err(MnpError::Argument(format!(
            "class {ell} outside 1..={n_classes}"
        )));
    }
    let mut full = DMatrix::zeros(n_classes - 1, n_classes);
    for (row, k) in (1..=n_classes).filter(|&k| k != ell).enumerate() {
        full[(row, k - 1)] = 1.0;
        full[(row, ell - 1)] = -1.0;
    }
    let reduced = full.columns(0, n_classes - 1).into_owned();
    Ok(ContrastMatrix { ell, full, reduced })
}

/// `X_{i[-y]} = -V̄_{[-y]} ⊗ xᵀ`, an `(L-1) × p(L-1)` block.
pub fn build_observation_design(x: &DVector<f64>, y: usize, n_classes: usize) -> Result<DMatrix<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MnpError::Argument("covariates must be finite".into()));
    }
    let contrast = build_contrast(y, n_classes)?;
    Ok(-contrast.reduced.kronecker(&x.transpose()))
}

/// Stacked design `X̄` and block-diagonal `Λ` of the orthant likelihood.
#[derive(Clone, Debug)]
pub struct DesignExpansion {
    xbar: DMatrix<f64>,
    lambda: Vec<PdMatrix>,
    block_size: usize,
}

impl DesignExpansion {
    pub fn xbar(&self) -> &DMatrix<f64> {
        &self.xbar
    }

    /// Row block `X̄_{[i]}`.
    pub fn xbar_block(&self, i: usize) -> DMatrix<f64> {
        self.xbar.rows(i * self.block_size, self.block_size).into_owned()
    }

    pub fn lambda_block(&self, i: usize) -> &PdMatrix {
        &self.lambda[i]
    }

    pub fn lambda_blocks(&self) -> &[PdMatrix] {
        &self.lambda
    }

    /// `L - 1`.
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.lambda.len()
    }

    /// `n (L - 1)`.
    pub fn latent_dim(&self) -> usize {
        self.xbar.nrows()
    }

    pub fn coef_dim(&self) -> usize {
        self.xbar.ncols()
    }

    /// Dense `Λ`; the library itself only works blockwise.
    pub fn dense_lambda(&self) -> DMatrix<f64> {
        let h = self.latent_dim();
        let d = self.block_size;
        let mut out = DMatrix::zeros(h, h);
        for (i, block) in self.lambda.iter().enumerate() {
            out.view_mut((i * d, i * d), (d, d)).copy_from(block.values());
        }
        out
    }

    /// `Λ + ν² X̄ X̄ᵀ`, the covariance of the stacked latent differences.
    pub fn marginal_latent_cov(&self, nu2: f64) -> DMatrix<f64> {
        let mut s = &self.xbar * self.xbar.transpose() * nu2;
        let d = self.block_size;
        for (i, block) in self.lambda.iter().enumerate() {
            let mut view = s.view_mut((i * d, i * d), (d, d));
            view += block.values();
        }
        crate::mvn::pd::symmetrize(&s)
    }
}

pub fn build_design_expansion(model: &MnpModel) -> Result<DesignExpansion> {
    let data = model.data();
    let n_classes = data.n_classes();
    let d = n_classes - 1;
    let mut xbar = DMatrix::zeros(data.n() * d, data.coef_dim());
    // Λ_{[ii]} only depends on the observed class
    let mut per_class: Vec<Option<PdMatrix>> = vec![None; n_classes];
    let mut lambda = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let y = data.label(i) + 1;
        let block = build_observation_design(&data.covariates(i), y, n_classes)?;
        xbar.view_mut((i * d, 0), (d, data.coef_dim())).copy_from(&block);
        if per_class[y - 1].is_none() {
            let v = build_contrast(y, n_classes)?.full;
            let l = &v * model.sigma().values() * v.transpose();
            let pd = chol_psd_named(&l, 0.0, &format!("Lambda for class {y}"))
                .map_err(|e| MnpError::Model(e.to_string()))?;
            per_class[y - 1] = Some(pd);
        }
        lambda.push(per_class[y - 1].clone().expect("filled above"));
    }
    Ok(DesignExpansion {
        xbar,
        lambda,
        block_size: d,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Likelihood {
    pub prob: f64,
    pub log_prob: f64,
    /// Absolute error bound on `prob` from the CDF evaluations.
    pub error: f64,
}

/// `p(y | β) = ∏ᵢ Φ_{L-1}(X̄_{[i]} β; Λ_{[ii]})`, accumulated on the log scale.
pub fn likelihood(beta: &DVector<f64>, expansion: &DesignExpansion, tol: f64) -> Result<Likelihood> {
    if beta.len() != expansion.coef_dim() {
        return Err(MnpError::Argument(format!(
            "beta has length {}, expected {}",
            beta.len(),
            expansion.coef_dim()
        )));
    }
    let cdf = CdfOptions::default().with_abs_tol(tol);
    let mean = expansion.xbar() * beta;
    let d = expansion.block_size();
    let mut log_prob = 0.0;
    let mut rel_err = 0.0;
    for i in 0..expansion.n_blocks() {
        let u = mean.rows(i * d, d).into_owned();
        let v = cdf.cdf(&u, expansion.lambda_block(i).values())?;
        log_prob += v.log_prob;
        if v.prob > 0.0 {
            rel_err += v.error / v.prob;
        }
    }
    let prob = log_prob.exp();
    Ok(Likelihood {
        prob,
        log_prob,
        error: prob * rel_err,
    })
}

/// Per-observation factors `Φ_{L-1}(X̄_{[i]} β; Λ_{[ii]})`.
pub fn likelihood_factors(
    beta: &DVector<f64>,
    expansion: &DesignExpansion,
    tol: f64,
) -> Result<Vec<f64>> {
    let cdf = CdfOptions::default().with_abs_tol(tol);
    let mean = expansion.xbar() * beta;
    let d = expansion.block_size();
    (0..expansion.n_blocks())
        .map(|i| {
            let u = mean.rows(i * d, d).into_owned();
            Ok(cdf.cdf(&u, expansion.lambda_block(i).values())?.prob)
        })
        .collect()
}

/// Class utilities `η_ℓ = xᵀβ_ℓ`, with `η_L = 0`.
pub fn mean_utilities(beta: &DVector<f64>, x: &DVector<f64>, n_classes: usize) -> DVector<f64> {
    let p = x.len();
    DVector::from_fn(n_classes, |l, _| {
        if l + 1 == n_classes {
            0.0
        } else {
            beta.rows(l * p, p).dot(x)
        }
    })
}

/// Probability of each class under `β` for covariates `x`.
pub fn choice_probabilities(
    beta: &DVector<f64>,
    x: &DVector<f64>,
    model: &MnpModel,
) -> Result<DVector<f64>> {
    choice_probabilities_with(beta, x, model.sigma().values(), &CdfOptions::default())
}

pub fn choice_probabilities_with(
    beta: &DVector<f64>,
    x: &DVector<f64>,
    sigma: &DMatrix<f64>,
    cdf: &CdfOptions,
) -> Result<DVector<f64>> {
    let n_classes = sigma.nrows();
    if beta.len() != x.len() * (n_classes - 1) {
        return Err(MnpError::Argument(format!(
            "beta has length {} but p (L-1) = {}",
            beta.len(),
            x.len() * (n_classes - 1)
        )));
    }
    let eta = mean_utilities(beta, x, n_classes);
    let mut probs = DVector::zeros(n_classes);
    for ell in 1..=n_classes {
        let v = build_contrast(ell, n_classes)?.full;
        let u = -(&v * &eta);
        let w = &v * sigma * v.transpose();
        probs[ell - 1] = cdf.cdf(&u, &crate::mvn::pd::symmetrize(&w))?.prob;
    }
    Ok(probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "values")]
pub enum BetaSpec {
    Given(Vec<f64>),
    FromPrior,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateSampler {
    /// i.i.d. `N(0, 1)` entries.
    #[default]
    StandardNormal,
    /// Column of ones followed by i.i.d. `N(0, 1)` entries.
    InterceptNormal,
}

#[derive(Clone, Debug)]
pub struct SimulationSpec {
    pub n: usize,
    pub p: usize,
    pub n_classes: usize,
    pub sigma: DMatrix<f64>,
    pub nu2: f64,
    pub beta: BetaSpec,
    pub covariates: CovariateSampler,
}

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub beta: DVector<f64>,
    /// `n × L` latent utilities that produced the labels.
    pub utilities: DMatrix<f64>,
    pub seed: u64,
}

/// Draws a dataset from the latent-utility mechanism: `zᵢ = ηᵢ + εᵢ` with
/// `εᵢ ~ N(0, Σ)` and `yᵢ = argmax_ℓ z_{iℓ}` (ties to the lowest index).
pub fn simulate_dataset(spec: &SimulationSpec, seed: u64) -> Result<SimulatedData> {
    if spec.n == 0 || spec.p == 0 {
        return Err(MnpError::Validation("simulation needs n >= 1 and p >= 1".into()));
    }
    if spec.n_classes < 2 {
        return Err(MnpError::Validation(format!(
            "need at least 2 classes, got {}",
            spec.n_classes
        )));
    }
    let sigma = validate_sigma(&spec.sigma, spec.n_classes)?;
    let q = spec.p * (spec.n_classes - 1);
    let mut rng = substream(seed, 0);
    let beta = match &spec.beta {
        BetaSpec::Given(b) => {
            if b.len() != q {
                return Err(MnpError::Validation(format!(
                    "true beta has length {}, expected {q}",
                    b.len()
                )));
            }
            DVector::from_vec(b.clone())
        }
        BetaSpec::FromPrior => {
            let sd = spec.nu2.sqrt();
            DVector::from_fn(q, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
        }
    };
    let x = DMatrix::from_fn(spec.n, spec.p, |_, j| match spec.covariates {
        CovariateSampler::InterceptNormal if j == 0 => 1.0,
        _ => rng.sample(StandardNormal),
    });
    let l = sigma.factor();
    let mut utilities = DMatrix::zeros(spec.n, spec.n_classes);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let xi = x.row(i).transpose();
        let eta = mean_utilities(&beta, &xi, spec.n_classes);
        let eps = DVector::from_fn(spec.n_classes, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = eta + &l * eps;
        let mut best = 0;
        for k in 1..spec.n_classes {
            if z[k] > z[best] {
                best = k;
            }
        }
        utilities.row_mut(i).copy_from(&z.transpose());
        y.push(best + 1);
    }
    Ok(SimulatedData {
        dataset: Dataset::new(y, x, spec.n_classes)?,
        beta,
        utilities,
        seed,
    })
}
