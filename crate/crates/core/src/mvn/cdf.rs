//! Multivariate normal orthant/upper-bound probabilities `P(Z <= u)`.
//!
//! The covariance is first split into independent connected components.
//! Components of dimension one and two are evaluated in closed form (the
//! bivariate case with Genz's Gauss-Legendre form of the Drezner-Wesolowsky
//! integral), trivariate components by one-dimensional quadrature over the
//! bivariate routine, and everything larger by randomized quasi-Monte Carlo
//! over the separation-of-variables transform with Genz-Bretz variable
//! reordering. The QMC stream is seeded from a fixed constant, so every
//! evaluation is deterministic.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::normal::{gauss_legendre, inverse_mills, log_norm_cdf, norm_cdf, norm_pdf, norm_ppf};
use super::pd::{check_symmetric, SYMMETRY_TOL};
use crate::error::{MnpError, Result};

/// Off-diagonal entries below this fraction of `sqrt(w_ii w_jj)` are treated
/// as structural zeros when splitting into independent components.
const COMPONENT_THRESHOLD: f64 = 1e-12;

/// Smallest absolute tolerance accepted by [`mvn_cdf`].
pub const MIN_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CdfOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Budget of integrand evaluations for the QMC path.
    pub max_evals: usize,
    /// Dimensions above this fail with a capacity error.
    pub max_dim: usize,
    /// Number of independent random shifts of the lattice.
    pub shifts: usize,
    pub seed: u64,
}

impl Default for CdfOptions {
    fn default() -> Self {
        CdfOptions {
            abs_tol: 1e-7,
            rel_tol: 1e-5,
            max_evals: 1 << 20,
            max_dim: 1000,
            shifts: 12,
            seed: 0x006d_766e_5f63_6466,
        }
    }
}

impl CdfOptions {
    pub fn with_abs_tol(mut self, tol: f64) -> Self {
        self.abs_tol = tol;
        self
    }

    /// Stops on relative error alone, for probabilities used on the log scale.
    pub fn relative(mut self) -> Self {
        self.abs_tol = 0.0;
        self
    }

    pub fn cdf(&self, u: &DVector<f64>, w: &DMatrix<f64>) -> Result<CdfValue> {
        orthant_cdf(u, w, self)
    }
}

/// Probability together with its natural logarithm and an error estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdfValue {
    pub prob: f64,
    pub log_prob: f64,
    pub error: f64,
}

impl CdfValue {
    fn exact(log_prob: f64, error: f64) -> Self {
        CdfValue {
            prob: log_prob.exp(),
            log_prob,
            error,
        }
    }
}

/// `P(Z <= u)` for `Z ~ N(0, w)` with requested absolute error `tol`.
pub fn mvn_cdf(u: &DVector<f64>, w: &DMatrix<f64>, tol: f64) -> Result<CdfValue> {
    if !(tol >= MIN_TOL) {
        return Err(MnpError::Argument(format!(
            "cdf tolerance {tol:e} below the minimum {MIN_TOL:e}"
        )));
    }
    CdfOptions::default().with_abs_tol(tol).cdf(u, w)
}

fn orthant_cdf(u: &DVector<f64>, w: &DMatrix<f64>, opts: &CdfOptions) -> Result<CdfValue> {
    let h = u.len();
    if w.nrows() != h || w.ncols() != h {
        return Err(MnpError::Argument(format!(
            "cdf bound has length {h} but covariance is {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    if h > opts.max_dim {
        return Err(MnpError::Capacity {
            what: "mvn_cdf dimension",
            dim: h,
            cap: opts.max_dim,
        });
    }
    if u.iter().any(|v| v.is_nan()) {
        return Err(MnpError::Argument("cdf bound contains NaN".into()));
    }
    check_symmetric(w, SYMMETRY_TOL, "cdf covariance")?;
    if u.iter().any(|&v| v == f64::NEG_INFINITY) {
        return Ok(CdfValue {
            prob: 0.0,
            log_prob: f64::NEG_INFINITY,
            error: 0.0,
        });
    }

    let mut active = Vec::with_capacity(h);
    for i in 0..h {
        if u[i] == f64::INFINITY {
            continue;
        }
        let var = w[(i, i)];
        if var < 0.0 {
            return Err(MnpError::numeric(
                "mvn_cdf",
                format!("negative variance {var} at coordinate {i}"),
            ));
        }
        if var == 0.0 {
            // point mass at zero
            if u[i] < 0.0 {
                return Ok(CdfValue {
                    prob: 0.0,
                    log_prob: f64::NEG_INFINITY,
                    error: 0.0,
                });
            }
            continue;
        }
        active.push(i);
    }

    let mut log_prob = 0.0;
    let mut rel_err = 0.0;
    for comp in components(&active, w) {
        let value = component_cdf(&comp, u, w, opts)?;
        if value.prob <= 0.0 {
            return Ok(CdfValue {
                prob: 0.0,
                log_prob: f64::NEG_INFINITY,
                error: value.error,
            });
        }
        log_prob += value.log_prob;
        rel_err += value.error / value.prob;
    }
    let prob = log_prob.exp();
    Ok(CdfValue {
        prob,
        log_prob,
        error: prob * rel_err,
    })
}

fn components(active: &[usize], w: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = active.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for a in 0..n {
        for b in 0..a {
            let (i, j) = (active[a], active[b]);
            let scale = (w[(i, i)] * w[(j, j)]).sqrt();
            if w[(i, j)].abs() > COMPONENT_THRESHOLD * scale {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for a in 0..n {
        let r = find(&mut parent, a);
        if root_slot[r] == usize::MAX {
            root_slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_slot[r]].push(active[a]);
    }
    groups
}

fn component_cdf(
    idx: &[usize],
    u: &DVector<f64>,
    w: &DMatrix<f64>,
    opts: &CdfOptions,
) -> Result<CdfValue> {
    let sd: Vec<f64> = idx.iter().map(|&i| w[(i, i)].sqrt()).collect();
    let b: Vec<f64> = idx.iter().zip(&sd).map(|(&i, s)| u[i] / s).collect();
    let corr = |a: usize, c: usize| -> f64 {
        (w[(idx[a], idx[c])] / (sd[a] * sd[c])).clamp(-1.0, 1.0)
    };
    match idx.len() {
        1 => Ok(CdfValue::exact(log_norm_cdf(b[0]), 1e-16)),
        2 => {
            let p = bvn_lower(b[0], b[1], corr(0, 1));
            Ok(CdfValue {
                prob: p,
                log_prob: p.ln(),
                error: 1e-15,
            })
        }
        dim => {
            let mut r = DMatrix::zeros(dim, dim);
            for a in 0..dim {
                for c in 0..dim {
                    r[(a, c)] = if a == c { 1.0 } else { corr(a, c) };
                }
            }
            if dim == 3 {
                if let Some(p) = tvn_lower([b[0], b[1], b[2]], &r) {
                    return Ok(CdfValue {
                        prob: p,
                        log_prob: p.ln(),
                        error: 1e-13,
                    });
                }
            }
            let (p, err) = qmc_cdf(&b, &r, opts)?;
            Ok(CdfValue {
                prob: p,
                log_prob: p.ln(),
                error: err,
            })
        }
    }
}

fn rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static R6: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static R12: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static R20: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        6 => R6.get_or_init(|| gauss_legendre(6)),
        12 => R12.get_or_init(|| gauss_legendre(12)),
        _ => R20.get_or_init(|| gauss_legendre(20)),
    }
}

/// Bivariate standard normal `P(X <= h, Y <= k)` with correlation `r`.
pub fn bvn_lower(h: f64, k: f64, r: f64) -> f64 {
    bvn_upper(-h, -k, r)
}

/// `P(X > dh, Y > dk)` for a standard bivariate normal with correlation `r`.
pub fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return if dk == f64::NEG_INFINITY {
            1.0
        } else {
            norm_cdf(-dk)
        };
    }
    if dk == f64::NEG_INFINITY {
        return norm_cdf(-dh);
    }
    if r == 0.0 {
        return norm_cdf(-dh) * norm_cdf(-dk);
    }
    let (x, w) = if r.abs() < 0.3 {
        rule(6)
    } else if r.abs() < 0.75 {
        rule(12)
    } else {
        rule(20)
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (xi, wi) in x.iter().zip(w) {
            let sn = (asr * (xi + 1.0) / 2.0).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        bvn = bvn * asr / (4.0 * PI) + norm_cdf(-h) * norm_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -(bs / as_ + hk) / 2.0;
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            }
            if hk > -100.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (2.0 * PI).sqrt()
                    * norm_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for (xi, wi) in x.iter().zip(w) {
                let xs = (a * (xi + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * wi
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
            bvn = -bvn / (2.0 * PI);
        }
        if r > 0.0 {
            bvn += norm_cdf(-h.max(k));
        } else if h >= k {
            bvn = -bvn;
        } else {
            let l = if h < 0.0 {
                norm_cdf(k) - norm_cdf(h)
            } else {
                norm_cdf(-h) - norm_cdf(-k)
            };
            bvn = l - bvn;
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Trivariate `P(Z <= b)` for a correlation matrix `r`, by Gauss-Legendre
/// quadrature over the least-correlated coordinate. Returns `None` when the
/// conditional bivariate law is too close to degenerate.
fn tvn_lower(b: [f64; 3], r: &DMatrix<f64>) -> Option<f64> {
    let c = (0..3)
        .min_by(|&i, &j| {
            let mi = (0..3).filter(|&k| k != i).map(|k| r[(i, k)].abs()).fold(0.0, f64::max);
            let mj = (0..3).filter(|&k| k != j).map(|k| r[(j, k)].abs()).fold(0.0, f64::max);
            mi.total_cmp(&mj)
        })
        .unwrap();
    let others: Vec<usize> = (0..3).filter(|&k| k != c).collect();
    let (a, d) = (others[0], others[1]);
    let (rac, rdc) = (r[(a, c)], r[(d, c)]);
    let sa = (1.0 - rac * rac).sqrt();
    let sd = (1.0 - rdc * rdc).sqrt();
    if sa < 1e-6 || sd < 1e-6 {
        return None;
    }
    let rho = ((r[(a, d)] - rac * rdc) / (sa * sd)).clamp(-1.0, 1.0);
    let integrand = |x: f64| norm_pdf(x) * bvn_lower((b[a] - rac * x) / sa, (b[d] - rdc * x) / sd, rho);
    let hi = b[c];
    let lo = hi.min(0.0) - 12.0;
    let (nodes, weights) = rule(20);
    let composite = |panels: usize| -> f64 {
        let width = (hi - lo) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let left = lo + width * p as f64;
            for (x, w) in nodes.iter().zip(weights) {
                total += w * integrand(left + 0.5 * width * (x + 1.0));
            }
        }
        total * 0.5 * width
    };
    let mut panels = 4;
    let mut prev = composite(panels);
    while panels < 512 {
        panels *= 2;
        let next = composite(panels);
        if (next - prev).abs() <= 1e-15 + 1e-12 * next.abs() {
            return Some(next.clamp(0.0, 1.0));
        }
        prev = next;
    }
    Some(prev.clamp(0.0, 1.0))
}

fn primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let limit = 20_000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        let mut out = Vec::new();
        for i in 2..limit {
            if sieve[i] {
                out.push(i as u32);
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        out
    })
}

/// Reordered Cholesky factor of a correlation matrix for the separation of
/// variables transform. A zero pivot marks a coordinate that is a
/// deterministic function of the earlier ones.
struct SovFactor {
    bounds: Vec<f64>,
    lower: DMatrix<f64>,
}

fn sov_factor(b: &[f64], r: &DMatrix<f64>) -> SovFactor {
    let h = b.len();
    let mut c = r.clone();
    let mut bounds = b.to_vec();
    let mut l = DMatrix::<f64>::zeros(h, h);
    let mut y = vec![0.0; h];
    for i in 0..h {
        // pick the remaining coordinate with the smallest conditional probability
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..h {
            let s: f64 = (0..i).map(|k| l[(j, k)] * y[k]).sum();
            let v = c[(j, j)] - (0..i).map(|k| l[(j, k)].powi(2)).sum::<f64>();
            let p = if v > 1e-12 * c[(j, j)] {
                norm_cdf((bounds[j] - s) / v.sqrt())
            } else {
                2.0
            };
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            c.swap_rows(i, best);
            c.swap_columns(i, best);
            bounds.swap(i, best);
            l.swap_rows(i, best);
        }
        let v = c[(i, i)] - (0..i).map(|k| l[(i, k)].powi(2)).sum::<f64>();
        let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
        if v > 1e-12 * c[(i, i)] {
            let lii = v.sqrt();
            l[(i, i)] = lii;
            for j in (i + 1)..h {
                let dot: f64 = (0..i).map(|k| l[(j, k)] * l[(i, k)]).sum();
                l[(j, i)] = (c[(j, i)] - dot) / lii;
            }
            let t = (bounds[i] - s) / lii;
            y[i] = -inverse_mills(-t);
        } else {
            l[(i, i)] = 0.0;
            y[i] = 0.0;
        }
    }
    SovFactor { bounds, lower: l }
}

impl SovFactor {
    fn integrand(&self, u: &[f64], y: &mut [f64]) -> f64 {
        let h = self.bounds.len();
        let mut f = 1.0;
        for i in 0..h {
            let s: f64 = (0..i).map(|k| self.lower[(i, k)] * y[k]).sum();
            let lii = self.lower[(i, i)];
            if lii == 0.0 {
                if s > self.bounds[i] {
                    return 0.0;
                }
                y[i] = 0.0;
                continue;
            }
            let e = norm_cdf((self.bounds[i] - s) / lii);
            f *= e;
            if f == 0.0 {
                return 0.0;
            }
            if i + 1 < h {
                let p = (u[i] * e).clamp(1e-300, 1.0 - 1e-16);
                y[i] = norm_ppf(p);
            }
        }
        f
    }
}

fn qmc_cdf(b: &[f64], r: &DMatrix<f64>, opts: &CdfOptions) -> Result<(f64, f64)> {
    let h = b.len();
    let factor = sov_factor(b, r);
    let dims = h - 1;
    let gen: Vec<f64> = primes()[..dims.max(1)]
        .iter()
        .map(|&p| (p as f64).sqrt().fract())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shifts: Vec<Vec<f64>> = (0..opts.shifts)
        .map(|_| (0..dims).map(|_| rng.random::<f64>()).collect())
        .collect();
    let mut sums = vec![0.0; opts.shifts];
    let mut n_done = 0usize;
    let mut n_target = 128usize;
    let mut u = vec![0.0; dims];
    let mut ua = vec![0.0; dims];
    let mut y = vec![0.0; h];
    loop {
        for (shift, sum) in shifts.iter().zip(sums.iter_mut()) {
            for j in (n_done + 1)..=n_target {
                for k in 0..dims {
                    let x = (j as f64 * gen[k] + shift[k]).fract();
                    let t = (2.0 * x - 1.0).abs();
                    u[k] = t;
                    ua[k] = 1.0 - t;
                }
                let v = 0.5 * (factor.integrand(&u, &mut y) + factor.integrand(&ua, &mut y));
                *sum += v;
            }
        }
        n_done = n_target;
        let m = opts.shifts as f64;
        let means: Vec<f64> = sums.iter().map(|s| s / n_done as f64).collect();
        let mean = means.iter().sum::<f64>() / m;
        let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        let err = 3.0 * (var / m).sqrt();
        let target = opts.abs_tol.max(opts.rel_tol * mean);
        let evals = 2 * opts.shifts * n_done;
        if err <= target || evals * 2 > opts.max_evals {
            if !mean.is_finite() {
                return Err(MnpError::numeric("mvn_cdf", "QMC estimate is not finite"));
            }
            return Ok((mean.clamp(0.0, 1.0), err));
        }
        n_target *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn equicorrelated(h: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(h, h, |i, j| if i == j { 1.0 } else { rho })
    }

    /// Sheppard's formula integrated with a fine composite Simpson rule.
    fn bvn_oracle(h: f64, k: f64, r: f64) -> f64 {
        let top = r.asin();
        let n = 20_000;
        let step = top / n as f64;
        let f = |t: f64| {
            let (s, c) = t.sin_cos();
            (-(h * h + k * k - 2.0 * h * k * s) / (2.0 * c * c)).exp()
        };
        let mut acc = f(0.0) + f(top);
        for i in 1..n {
            let t = i as f64 * step;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        norm_cdf(h) * norm_cdf(k) + acc * step / 3.0 / (2.0 * PI)
    }

    #[test]
    fn bivariate_matches_sheppard_integral() {
        for &r in &[-0.99, -0.95, -0.8, -0.5, -0.1, 0.2, 0.5, 0.8, 0.93, 0.99] {
            for &(h, k) in &[(0.0, 0.0), (1.0, -0.5), (-2.0, 1.5), (0.3, 0.3), (-1.0, -1.2), (2.5, 0.7)] {
                let got = bvn_lower(h, k, r);
                let want = bvn_oracle(h, k, r);
                assert!((got - want).abs() < 1e-12, "h={h} k={k} r={r}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn bivariate_orthant_identities() {
        let quarter = mvn_cdf(&DVector::zeros(2), &DMatrix::identity(2, 2), 1e-8).unwrap();
        assert_relative_eq!(quarter.prob, 0.25, epsilon = 1e-12);
        let third = mvn_cdf(&DVector::zeros(2), &dmatrix![1.0, 0.5; 0.5, 1.0], 1e-8).unwrap();
        assert_relative_eq!(third.prob, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn equicorrelated_orthant_is_one_over_h_plus_one() {
        for h in 3..=6 {
            let v = mvn_cdf(&DVector::zeros(h), &equicorrelated(h, 0.5), 1e-7).unwrap();
            assert!(
                (v.prob - 1.0 / (h as f64 + 1.0)).abs() < 2e-6,
                "h={h}: {} (err {})",
                v.prob,
                v.error
            );
        }
    }

    #[test]
    fn trivariate_quadrature_agrees_with_qmc() {
        let r = dmatrix![1.0, 0.3, -0.2; 0.3, 1.0, 0.6; -0.2, 0.6, 1.0];
        let b = [0.4, -0.7, 1.1];
        let quad = tvn_lower(b, &r).unwrap();
        let opts = CdfOptions {
            abs_tol: 1e-9,
            max_evals: 1 << 24,
            ..CdfOptions::default()
        };
        let (qmc, err) = qmc_cdf(&b, &r, &opts).unwrap();
        assert!((quad - qmc).abs() < 1e-7 + err, "{quad} vs {qmc} ± {err}");
    }

    #[test]
    fn infinite_bounds_marginalize() {
        let w = dmatrix![1.0, 0.4, 0.1; 0.4, 2.0, 0.3; 0.1, 0.3, 1.5];
        let u = DVector::from_vec(vec![0.5, f64::INFINITY, -0.2]);
        let got = mvn_cdf(&u, &w, 1e-8).unwrap();
        let sub = dmatrix![1.0, 0.1; 0.1, 1.5];
        let want = mvn_cdf(&DVector::from_vec(vec![0.5, -0.2]), &sub, 1e-8).unwrap();
        assert_relative_eq!(got.prob, want.prob, epsilon = 1e-14);
        let none = mvn_cdf(&DVector::from_vec(vec![0.0, f64::NEG_INFINITY, 0.0]), &w, 1e-8).unwrap();
        assert_eq!(none.prob, 0.0);
    }

    #[test]
    fn block_diagonal_factorizes() {
        let mut w = DMatrix::zeros(4, 4);
        w.view_mut((0, 0), (2, 2)).copy_from(&dmatrix![2.0, 1.0; 1.0, 2.0]);
        w.view_mut((2, 2), (2, 2)).copy_from(&dmatrix![1.0, -0.3; -0.3, 1.0]);
        let u = DVector::from_vec(vec![0.1, -0.4, 0.7, 0.2]);
        let joint = mvn_cdf(&u, &w, 1e-8).unwrap();
        let a = bvn_lower(0.1 / 2f64.sqrt(), -0.4 / 2f64.sqrt(), 0.5);
        let b = bvn_lower(0.7, 0.2, -0.3);
        assert_relative_eq!(joint.prob, a * b, max_relative = 1e-13);
    }

    #[test]
    fn capacity_and_tolerance_errors() {
        let opts = CdfOptions {
            max_dim: 3,
            ..CdfOptions::default()
        };
        let err = opts.cdf(&DVector::zeros(4), &DMatrix::identity(4, 4));
        assert!(matches!(err, Err(MnpError::Capacity { .. })));
        let err = mvn_cdf(&DVector::zeros(2), &DMatrix::identity(2, 2), 1e-12);
        assert!(matches!(err, Err(MnpError::Argument(_))));
    }

    #[test]
    fn deterministic_across_calls() {
        let w = DMatrix::from_fn(6, 6, |i, j| 0.9f64.powi((i as i32 - j as i32).abs()));
        let u = DVector::from_fn(6, |i, _| 0.2 * i as f64 - 0.5);
        let a = mvn_cdf(&u, &w, 1e-6).unwrap();
        let b = mvn_cdf(&u, &w, 1e-6).unwrap();
        assert_eq!(a.prob.to_bits(), b.prob.to_bits());
    }
}
