//! Structural invariants over random inputs.

use mnp_core::model::{
    build_contrast, build_design_expansion, build_observation_design, choice_probabilities_with,
    Dataset, MnpModel,
};
use mnp_core::mvn::{mvn_cdf, CdfOptions};
use mnp_core::pfm::precompute;
use mnp_core::sun::posterior_params;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(l: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_fn(l, l, |i, j| entries[(i * l + j) % entries.len()]);
    let s = &a * a.transpose() / l as f64 + DMatrix::identity(l, l) * 0.4;
    (&s + s.transpose()) * 0.5
}

fn small_model(n: usize, p: usize, l: usize, xs: &[f64], labels: &[usize], nu2: f64) -> MnpModel {
    let x = DMatrix::from_fn(n, p, |i, j| xs[(i * p + j) % xs.len()]);
    let y = (0..n).map(|i| 1 + labels[i % labels.len()] % l).collect();
    let data = Dataset::new(y, x, l).unwrap();
    MnpModel::new(data, &spd(l, xs), nu2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrast_rows_sum_to_zero(l in 2usize..7, pick in 0usize..100) {
        let ell = 1 + pick % l;
        let c = build_contrast(ell, l).unwrap();
        prop_assert_eq!(c.full.shape(), (l - 1, l));
        for row in c.full.row_iter() {
            prop_assert_eq!(row.sum(), 0.0);
        }
        prop_assert!(c.full.column(ell - 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn observation_design_has_kronecker_shape(
        l in 2usize..5,
        xs in prop::collection::vec(-3.0f64..3.0, 1..4),
        pick in 0usize..10,
    ) {
        let p = xs.len();
        let x = DVector::from_vec(xs);
        let d = build_observation_design(&x, 1 + pick % l, l).unwrap();
        prop_assert_eq!(d.shape(), (l - 1, p * (l - 1)));
    }

    #[test]
    fn choice_probabilities_sum_to_one(
        l in 2usize..6,
        entries in prop::collection::vec(-1.0f64..1.0, 9),
        beta in prop::collection::vec(-2.0f64..2.0, 10),
        x in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let sigma = spd(l, &entries);
        let beta = DVector::from_fn(2 * (l - 1), |k, _| beta[k % beta.len()]);
        let probs = choice_probabilities_with(&beta, &DVector::from_vec(x), &sigma, &CdfOptions::default()).unwrap();
        prop_assert!(probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((probs.sum() - 1.0).abs() < 1e-5, "sum {}", probs.sum());
    }

    #[test]
    fn cdf_monotone_along_each_coordinate(
        h in 1usize..5,
        entries in prop::collection::vec(-1.0f64..1.0, 9),
        u in prop::collection::vec(-2.0f64..2.0, 4),
        step in 0.0f64..1.0,
        coord in 0usize..4,
    ) {
        let w = spd(h, &entries);
        let lo = DVector::from_fn(h, |k, _| u[k]);
        let mut hi = lo.clone();
        hi[coord % h] += step;
        let a = mvn_cdf(&lo, &w, 1e-8).unwrap();
        let b = mvn_cdf(&hi, &w, 1e-8).unwrap();
        prop_assert!(a.prob <= b.prob + a.error + b.error + 1e-12);
    }

    #[test]
    fn lambda_blocks_and_gamma_are_well_formed(
        n in 1usize..5,
        l in 2usize..5,
        xs in prop::collection::vec(-2.0f64..2.0, 1..12),
        labels in prop::collection::vec(0usize..10, 1..6),
        nu2 in 0.1f64..20.0,
    ) {
        let m = small_model(n, 2, l, &xs, &labels, nu2);
        let e = build_design_expansion(&m).unwrap();
        for lam in e.lambda_blocks() {
            prop_assert!(lam.values().clone().cholesky().is_some());
        }
        let params = posterior_params(&m, &e).unwrap();
        let g = params.gamma_mat().values();
        for k in 0..g.nrows() {
            prop_assert!((g[(k, k)] - 1.0).abs() < 1e-10);
        }
        prop_assert!((g - g.transpose()).amax() < 1e-12);
    }

    #[test]
    fn woodbury_split_reproduces_marginal_precision(
        n in 1usize..5,
        l in 2usize..4,
        xs in prop::collection::vec(-2.0f64..2.0, 1..12),
        labels in prop::collection::vec(0usize..10, 1..6),
        nu2 in 0.1f64..20.0,
    ) {
        let m = small_model(n, 2, l, &xs, &labels, nu2);
        let e = build_design_expansion(&m).unwrap();
        let pre = precompute(&m, &e).unwrap();
        prop_assert!(pre.woodbury_residual(&e, nu2) < 1e-8);
    }
}
