//! Scalar Gaussian helpers shared by the multivariate routines.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc_inv;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x / SQRT_2)
}

/// `ln Φ(x)`, accurate in both tails.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x > 0.0 {
        (-norm_cdf(-x)).ln_1p()
    } else if x > -37.0 {
        norm_cdf(x).ln()
    } else {
        // asymptotic expansion of the Mills ratio
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + series.ln()
    }
}

pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// `φ(c) / Φ(-c)`: the mean of a standard normal truncated to `[c, ∞)`.
pub fn inverse_mills(c: f64) -> f64 {
    if c == f64::NEG_INFINITY {
        return 0.0;
    }
    (log_norm_pdf(c) - log_norm_cdf(-c)).exp()
}

/// Draws a standard normal conditioned on `z >= lower`.
///
/// Plain rejection for `lower < 0.5`, otherwise the translated-exponential
/// proposal with the optimal rate `(a + sqrt(a^2 + 4)) / 2`.
pub fn sample_std_normal_above<R: Rng + ?Sized>(lower: f64, rng: &mut R) -> f64 {
    if lower == f64::NEG_INFINITY {
        return StandardNormal.sample(rng);
    }
    if lower < 0.5 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= lower {
                return z;
            }
        }
    }
    let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = lower + e / rate;
        let log_accept = -0.5 * (z - rate) * (z - rate);
        let u: f64 = rng.random();
        if u.ln() <= log_accept {
            return z;
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
