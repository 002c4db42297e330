//! Model, exact posterior and variational posterior against independent oracles.

use mnp_core::model::{
    build_design_expansion, likelihood, simulate_dataset, BetaSpec, CovariateSampler, Dataset,
    MnpModel, SimulationSpec,
};
use mnp_core::mvn::sample_moments;
use mnp_core::pfm::{run_cavi_with, vb_beta_moments, vb_sample_beta, CaviOptions, SweepConfig, SweepOrder};
use mnp_core::sun::{
    evidence, posterior_params, sun_sample, summarize, Provenance, SunDensity,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

fn spec(n: usize, p: usize, l: usize, nu2: f64, beta: BetaSpec) -> SimulationSpec {
    SimulationSpec {
        n,
        p,
        n_classes: l,
        sigma: DMatrix::identity(l, l),
        nu2,
        beta,
        covariates: CovariateSampler::StandardNormal,
    }
}

fn model_from(spec: &SimulationSpec, seed: u64) -> MnpModel {
    let sim = simulate_dataset(spec, seed).unwrap();
    MnpModel::new(sim.dataset, &spec.sigma, spec.nu2).unwrap()
}

#[test]
fn uniform_class_frequencies_at_zero_coefficients() {
    let l = 3;
    let n = 100_000;
    let s = spec(n, 2, l, 1.0, BetaSpec::Given(vec![0.0; 4]));
    let sim = simulate_dataset(&s, 17).unwrap();
    let mut counts = vec![0usize; l];
    for i in 0..n {
        counts[sim.dataset.label(i)] += 1;
    }
    let p = 1.0 / l as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - p).abs() < 3.0 * se);
    }
}

#[test]
fn dominant_intercept_takes_over() {
    let mut last = 0.0;
    for scale in [1.0, 3.0, 10.0] {
        let s = SimulationSpec {
            covariates: CovariateSampler::InterceptNormal,
            ..spec(5000, 2, 3, 1.0, BetaSpec::Given(vec![scale, 0.0, 0.0, 0.0]))
        };
        let sim = simulate_dataset(&s, 3).unwrap();
        let freq = sim.dataset.labels_one_based().iter().filter(|&&y| y == 1).count() as f64 / 5000.0;
        assert!(freq >= last);
        last = freq;
    }
    assert!(last > 0.99);
}

#[test]
fn likelihood_matches_simulated_choice_frequency() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.4, 1.5, -0.2, 0.1, -0.2, 0.7]);
    let data = Dataset::new(vec![2], DMatrix::from_row_slice(1, 2, &[0.6, -1.1]), 3).unwrap();
    let model = MnpModel::new(data, &sigma, 1.0).unwrap();
    let e = build_design_expansion(&model).unwrap();
    let beta = DVector::from_vec(vec![0.3, -0.5, 0.8, 0.2]);
    let lik = likelihood(&beta, &e, 1e-10).unwrap().prob;
    let chol = sigma.clone().cholesky().unwrap().l();
    let x = DVector::from_vec(vec![0.6, -1.1]);
    let eta = DVector::from_vec(vec![beta.rows(0, 2).dot(&x), beta.rows(2, 2).dot(&x), 0.0]);
    let n = 1_000_000;
    let hits = (0..n)
        .filter(|_| {
            let z = &eta + &chol * DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            z.imax() == 1
        })
        .count();
    let freq = hits as f64 / n as f64;
    assert!((freq - lik).abs() < 3.0 * (lik * (1.0 - lik) / n as f64).sqrt());
}

#[test]
fn evidence_small_prior_limit() {
    // with ν → 0 every class is equally likely a priori
    for l in [2usize, 3, 4] {
        let m = model_from(&spec(4, 2, l, 1e-12, BetaSpec::FromPrior), 5);
        let e = build_design_expansion(&m).unwrap();
        let ev = evidence(&m, &e).unwrap();
        assert!((ev.log_prob - 4.0 * (1.0 / l as f64).ln()).abs() < 1e-5, "L={l}");
    }
}

#[test]
fn evidence_matches_prior_monte_carlo() {
    let m = model_from(&spec(3, 1, 3, 1.0, BetaSpec::FromPrior), 12);
    let e = build_design_expansion(&m).unwrap();
    let ev = evidence(&m, &e).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let n = 200_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let b = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            likelihood(&b, &e, 1e-10).unwrap().prob
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((mean - ev.prob).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {}", ev.prob);
}

/// Adaptive Simpson.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
    let left = (m - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + m)) + f(m));
    let right = (b - m) / 6.0 * (f(m) + 4.0 * f(0.5 * (m + b)) + f(b));
    if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
        left + right
    } else {
        simpson(f, a, m, tol / 2.0, depth - 1) + simpson(f, m, b, tol / 2.0, depth - 1)
    }
}

#[test]
fn scalar_posterior_density_integrates_to_one() {
    for seed in 0..3 {
        let m = model_from(&spec(6, 1, 2, 4.0, BetaSpec::FromPrior), seed);
        let e = build_design_expansion(&m).unwrap();
        let params = posterior_params(&m, &e).unwrap();
        let d = SunDensity::new(&params, &Default::default()).unwrap();
        let f = |b: f64| d.log_density(&DVector::from_element(1, b)).unwrap().exp();
        let total = simpson(&f, -40.0, 40.0, 1e-9, 40);
        assert!((total - 1.0).abs() < 1e-4, "seed {seed}: {total}");
    }
}

#[test]
fn binary_sampler_mean_matches_quadrature() {
    let nu2 = 100.0;
    let m = model_from(&spec(10, 1, 2, nu2, BetaSpec::FromPrior), 31);
    let std = Normal::new(0.0, 1.0).unwrap();
    let data = m.data();
    let log_post = |b: f64| {
        -0.5 * b * b / nu2
            + (0..10)
                .map(|i| {
                    let s = if data.label(i) == 0 { 1.0 } else { -1.0 };
                    std.cdf(s * data.x()[(i, 0)] * b / 2f64.sqrt()).ln()
                })
                .sum::<f64>()
    };
    let peak = (-4000..=4000).map(|k| log_post(k as f64 * 0.03)).fold(f64::NEG_INFINITY, f64::max);
    let dens = |b: f64| (log_post(b) - peak).exp();
    let z = simpson(&dens, -120.0, 120.0, 1e-10, 50);
    let mean = simpson(&|b| b * dens(b), -120.0, 120.0, 1e-10, 50) / z;
    let second = simpson(&|b| b * b * dens(b), -120.0, 120.0, 1e-10, 50) / z;
    let sd = (second - mean * mean).sqrt();
    let e = build_design_expansion(&m).unwrap();
    let params = posterior_params(&m, &e).unwrap();
    let n = 50_000;
    let draws = sun_sample(&params, n, 4, &Default::default()).unwrap();
    let got = draws.samples.column(0).mean();
    assert!((got - mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{got} vs {mean}");
}

#[test]
fn single_observation_vb_matches_exact_sampler() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    for inst in 0..4u64 {
        let l = 2 + inst as usize % 3;
        let a = DMatrix::from_fn(l, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sigma = &a * a.transpose() / l as f64 + DMatrix::identity(l, l) * 0.5;
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let s = SimulationSpec {
            sigma,
            ..spec(1, 1, l, 2.0, BetaSpec::FromPrior)
        };
        let m = model_from(&s, 50 + inst);
        let e = build_design_expansion(&m).unwrap();
        let vb = run_cavi_with(&m, &e, &CaviOptions::default()).unwrap();
        let (mean, cov) = vb_beta_moments(&vb).unwrap();
        let params = posterior_params(&m, &e).unwrap();
        let n = 100_000;
        let draws = sun_sample(&params, n, inst, &Default::default()).unwrap();
        let (smean, _) = sample_moments(&draws.samples);
        for k in 0..mean.len() {
            assert!((smean[k] - mean[k]).abs() < 3.0 * (cov[(k, k)] / n as f64).sqrt());
        }
    }
}

#[test]
fn vb_diagnostics_on_randomized_instances() {
    for seed in 0..10u64 {
        let m = model_from(&spec(20, 2, 3, 1.0, BetaSpec::FromPrior), 300 + seed);
        let e = build_design_expansion(&m).unwrap();
        let vb = run_cavi_with(&m, &e, &CaviOptions::default()).unwrap();
        assert!(vb.converged());
        for w in vb.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert!(vb.state.m.iter().all(|mi| mi.iter().all(|&v| v > 0.0)));
        let (_, cov) = vb_beta_moments(&vb).unwrap();
        let diff = &cov - vb.precomp.v().values();
        assert!(diff.symmetric_eigenvalues().min() > -1e-10);
        let rev = run_cavi_with(
            &m,
            &e,
            &CaviOptions {
                sweep: SweepConfig {
                    order: SweepOrder::Reverse,
                    ..Default::default()
                },
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in vb.state.m.iter().zip(&rev.state.m) {
            assert!((a - b).amax() < 100.0 * 1e-8, "seed {seed}");
        }
    }
}

#[test]
fn vb_draws_match_closed_form_moments() {
    let m = model_from(&spec(15, 2, 3, 2.0, BetaSpec::FromPrior), 77);
    let e = build_design_expansion(&m).unwrap();
    let vb = run_cavi_with(&m, &e, &CaviOptions::default()).unwrap();
    let (mean, cov) = vb_beta_moments(&vb).unwrap();
    let n = 100_000;
    let d = vb_sample_beta(&vb, n, 6, &Default::default(), &Default::default()).unwrap();
    let (smean, scov) = sample_moments(&d.samples);
    for k in 0..mean.len() {
        assert!((smean[k] - mean[k]).abs() < 3.0 * (cov[(k, k)] / n as f64).sqrt());
    }
    assert!((scov - cov).amax() < 0.05);
}

#[test]
fn standard_normal_quantile_from_summary() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let draws = DMatrix::from_fn(100_000, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = summarize(&draws, &[0.975], Provenance::ExactMc).unwrap();
    assert!((s.quantiles[0].1[0] - 1.959_964).abs() < 0.02);
    assert_eq!(s.mean[0], draws.column(0).mean());
    let constant = DMatrix::from_element(10, 2, 3.5);
    let s = summarize(&constant, &[0.5], Provenance::PfmB).unwrap();
    assert_eq!(s.sd, DVector::zeros(2));
}
