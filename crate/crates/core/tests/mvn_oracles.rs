//! Multivariate normal routines against brute-force oracles.

use mnp_core::mvn::{
    chol_psd, mvn_cdf, tmvn_moments, tmvn_sample, tmvn_sample_with, GibbsConfig, MomentMethod,
    PdMatrix, SampleMethod, TruncatedMvn,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

fn random_cov(h: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(h, h, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose() / h as f64 + DMatrix::identity(h, h) * 0.3;
    (&s + s.transpose()) * 0.5
}

fn pd(w: &DMatrix<f64>) -> PdMatrix {
    chol_psd(w, 0.0).unwrap()
}

/// Midpoint-rule integral of the standardized density over `[-8, u / sd]`.
fn grid_cdf(u: &[f64], w: &DMatrix<f64>, step: f64) -> f64 {
    let h = u.len();
    let sd: Vec<f64> = (0..h).map(|k| w[(k, k)].sqrt()).collect();
    let u: Vec<f64> = u.iter().zip(&sd).map(|(b, s)| b / s).collect();
    let w = DMatrix::from_fn(h, h, |i, j| w[(i, j)] / (sd[i] * sd[j]));
    let prec = w.clone().try_inverse().unwrap();
    let norm = ((2.0 * std::f64::consts::PI).powi(h as i32) * w.determinant()).sqrt();
    let counts: Vec<usize> = u.iter().map(|&b| ((b.min(8.0) + 8.0) / step - 1e-9).ceil() as usize).collect();
    let mut total = 0.0;
    let mut idx = vec![0usize; h];
    let mut z = DVector::zeros(h);
    'outer: loop {
        for k in 0..h {
            let hi = u[k].min(8.0);
            // last cell may be partial
            let lo_edge = -8.0 + idx[k] as f64 * step;
            let width = (hi - lo_edge).min(step);
            z[k] = lo_edge + 0.5 * width;
        }
        let weight: f64 = (0..h)
            .map(|k| (u[k].min(8.0) - (-8.0 + idx[k] as f64 * step)).min(step))
            .product();
        total += weight * (-0.5 * (z.transpose() * &prec * &z)[(0, 0)]).exp();
        for k in 0..h {
            idx[k] += 1;
            if idx[k] < counts[k].max(1) {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    total / norm
}

#[test]
fn cdf_matches_tensor_grid() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for h in [1usize, 2] {
        for _ in 0..4 {
            let w = random_cov(h, &mut rng);
            let u: Vec<f64> = (0..h).map(|_| rng.random_range(-1.5..1.5)).collect();
            let got = mvn_cdf(&DVector::from_vec(u.clone()), &w, 1e-9).unwrap().prob;
            let want = grid_cdf(&u, &w, 0.01);
            assert!((got - want).abs() < 1e-4, "h={h}: {got} vs {want}");
        }
    }
    for _ in 0..2 {
        let w = random_cov(3, &mut rng);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = mvn_cdf(&DVector::from_vec(u.clone()), &w, 1e-9).unwrap().prob;
        let want = grid_cdf(&u, &w, 0.04);
        assert!((got - want).abs() < 1e-4, "h=3: {got} vs {want}");
    }
}

#[test]
fn cdf_is_monotone_in_the_bound() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for trial in 0..40 {
        let h = 1 + trial % 5;
        let w = random_cov(h, &mut rng);
        let u = DVector::from_fn(h, |_, _| rng.random_range(-2.0..2.0));
        let bump = DVector::from_fn(h, |_, _| rng.random_range(0.0..0.5));
        let a = mvn_cdf(&u, &w, 1e-8).unwrap();
        let b = mvn_cdf(&(&u + bump), &w, 1e-8).unwrap();
        assert!(a.prob <= b.prob + a.error + b.error, "h={h}: {} > {}", a.prob, b.prob);
    }
}

/// Moments of accepted draws from plain rejection, with standard errors.
fn rejection_oracle(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lower: &DVector<f64>,
    proposals: usize,
    rng: &mut ChaCha20Rng,
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let h = mean.len();
    let l = cov.clone().cholesky().unwrap().l();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for _ in 0..proposals {
        let z = mean + &l * DVector::from_fn(h, |_, _| rng.sample::<f64, _>(StandardNormal));
        if z.iter().zip(lower.iter()).all(|(a, b)| a >= b) {
            kept.push(z);
        }
    }
    let n = kept.len() as f64;
    let m = kept.iter().fold(DVector::zeros(h), |acc, z| acc + z) / n;
    let c = kept
        .iter()
        .fold(DMatrix::zeros(h, h), |acc, z| acc + (z - &m) * (z - &m).transpose())
        / (n - 1.0);
    let se = c.diagonal().map(|v| (v / n).sqrt());
    (m, se, c)
}

#[test]
fn analytic_moments_match_rejection_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for case in 0..20 {
        let h = 1 + case % 4;
        let cov = random_cov(h, &mut rng);
        let mean = DVector::from_fn(h, |_, _| rng.random_range(-0.5..1.0));
        let lower = DVector::from_fn(h, |_, _| {
            if rng.random_bool(0.8) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let t = TruncatedMvn::new(mean.clone(), pd(&cov), lower.clone()).unwrap();
        let m = tmvn_moments(&t, MomentMethod::Analytic).unwrap();
        let (om, se, oc) = rejection_oracle(&mean, &cov, &lower, 400_000, &mut rng);
        for k in 0..h {
            assert!(
                (m.mean[k] - om[k]).abs() < 4.0 * se[k],
                "case {case} coord {k}: {} vs {}",
                m.mean[k],
                om[k]
            );
            // variance SE via a normal-theory approximation, inflated
            let n = (oc[(k, k)] / (se[k] * se[k])).round();
            let var_se = oc[(k, k)] * (2.0 / n).sqrt() * 2.0;
            assert!((m.cov[(k, k)] - oc[(k, k)]).abs() < 4.0 * var_se, "case {case} var {k}");
        }
        assert!((&m.cov - m.cov.transpose()).amax() < 1e-12);
        assert!(chol_psd(&m.cov, 1e-8).is_ok());
    }
}

#[test]
fn analytic_moments_match_large_mc_at_rho_half() {
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let t = TruncatedMvn::orthant(DVector::zeros(2), pd(&w)).unwrap();
    let m = tmvn_moments(&t, MomentMethod::Analytic).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let (om, se, _) = rejection_oracle(&DVector::zeros(2), &w, &DVector::zeros(2), 1_000_000, &mut rng);
    for k in 0..2 {
        assert!((m.mean[k] - om[k]).abs() < 3.0 * se[k]);
    }
    let mc = tmvn_moments(&t, MomentMethod::Mc { draws: 200_000, seed: 9 }).unwrap();
    assert!((mc.mean - &m.mean).amax() < 0.01);
}

fn draw_moments(d: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = d.nrows() as f64;
    let mean = DVector::from_fn(d.ncols(), |k, _| d.column(k).mean());
    let var = DVector::from_fn(d.ncols(), |k, _| {
        d.column(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)
    });
    (mean, var)
}

#[test]
fn rejection_and_gibbs_agree() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let gibbs = GibbsConfig { burn_in: 500, thin: 10 };
    for case in 0..6 {
        let h = 2 + case % 3;
        let cov = random_cov(h, &mut rng);
        let mean = DVector::from_fn(h, |_, _| rng.random_range(0.0..1.0));
        let t = TruncatedMvn::orthant(mean, pd(&cov)).unwrap();
        let n = 40_000;
        let (rej, rd) = tmvn_sample_with(&t, n, &mut rng, SampleMethod::Rejection, &gibbs).unwrap();
        let (gib, gd) = tmvn_sample_with(&t, n, &mut rng, SampleMethod::Gibbs, &gibbs).unwrap();
        assert!(rd.exact && !gd.exact);
        let (mr, vr) = draw_moments(&rej);
        let (mg, vg) = draw_moments(&gib);
        let ess = gd.ess_proxy.unwrap().min(n as f64);
        for k in 0..h {
            let se = (vr[k] / n as f64 + vg[k] / ess).sqrt();
            assert!((mr[k] - mg[k]).abs() < 4.0 * se, "case {case} coord {k}");
        }
    }
}

#[test]
fn correlated_orthant_samples_match_moment_routine() {
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
    let t = TruncatedMvn::orthant(DVector::zeros(2), pd(&w)).unwrap();
    let m = tmvn_moments(&t, MomentMethod::Analytic).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let n = 100_000;
    let (d, _) = tmvn_sample(&t, n, &mut rng, SampleMethod::Auto).unwrap();
    let (mean, var) = draw_moments(&d);
    for k in 0..2 {
        let se = (var[k] / n as f64).sqrt();
        assert!((mean[k] - m.mean[k]).abs() < 3.0 * se);
        assert!((var[k] / m.cov[(k, k)] - 1.0).abs() < 0.02);
    }
}

#[test]
fn unrestricted_sampling_recovers_covariance() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let cov = random_cov(3, &mut rng);
    let t = TruncatedMvn::new(DVector::zeros(3), pd(&cov), DVector::from_element(3, f64::NEG_INFINITY)).unwrap();
    let (d, _) = tmvn_sample(&t, 100_000, &mut rng, SampleMethod::Auto).unwrap();
    let (_, c) = mnp_core::mvn::sample_moments(&d);
    assert!((c - cov).amax() < 0.05);
}

