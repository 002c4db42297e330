use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MnpError, Result};

/// Largest diagonal jitter tried by [`chol_psd`] unless told otherwise.
pub const DEFAULT_MAX_JITTER: f64 = 1e-6;

/// Relative asymmetry tolerated before a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric positive-definite matrix together with its Cholesky factor.
///
/// The factor reproduces `values + jitter * I`; `jitter` is zero whenever the
/// plain factorization succeeded.
#[derive(Clone, Debug)]
pub struct PdMatrix {
    values: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl PdMatrix {
    pub fn identity(dim: usize) -> Self {
        chol_psd(&DMatrix::identity(dim, dim), 0.0).expect("identity is PD")
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Lower-triangular factor `L` with `L Lᵀ = values + jitter I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }

    pub fn ln_det(&self) -> f64 {
        self.chol.ln_determinant()
    }

    /// `xᵀ W⁻¹ x`.
    pub fn quad_form_inv(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let y = l
            .solve_lower_triangular(x)
            .expect("cholesky factor has a nonzero diagonal");
        y.norm_squared()
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn check_symmetric(w: &DMatrix<f64>, rel_tol: f64, name: &str) -> Result<()> {
    if !w.is_square() {
        return Err(MnpError::Argument(format!(
            "{name} is {}x{}, expected a square matrix",
            w.nrows(),
            w.ncols()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(MnpError::Argument(format!("{name} has non-finite entries")));
    }
    let scale = w.amax().max(1.0);
    let n = w.nrows();
    for i in 0..n {
        for j in 0..i {
            if (w[(i, j)] - w[(j, i)]).abs() > rel_tol * scale {
                return Err(MnpError::Argument(format!(
                    "{name} is not symmetric at ({i}, {j}): {} vs {}",
                    w[(i, j)],
                    w[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization with an escalating diagonal jitter ladder
/// `0, 1e-12, 1e-10, ...` capped at `max_jitter`.
pub fn chol_psd(w: &DMatrix<f64>, max_jitter: f64) -> Result<PdMatrix> {
    chol_psd_named(w, max_jitter, "matrix")
}

pub fn chol_psd_named(w: &DMatrix<f64>, max_jitter: f64, name: &str) -> Result<PdMatrix> {
    check_symmetric(w, SYMMETRY_TOL, name)?;
    let n = w.nrows();
    let values = symmetrize(w);
    let mut jitter = 0.0;
    loop {
        let mut m = values.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            let diag_ok = (0..n).all(|i| chol.l_dirty()[(i, i)] > 0.0);
            if diag_ok {
                return Ok(PdMatrix {
                    values,
                    chol,
                    jitter,
                });
            }
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
        if jitter > max_jitter * (1.0 + 1e-12) {
            return Err(MnpError::Singular {
                name: name.to_string(),
                max_jitter,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn identity_needs_no_jitter() {
        let pd = chol_psd(&DMatrix::identity(3, 3), DEFAULT_MAX_JITTER).unwrap();
        assert_eq!(pd.jitter_applied(), 0.0);
        assert_relative_eq!(pd.factor(), DMatrix::identity(3, 3));
    }

    #[test]
    fn rank_one_matrix_gets_jitter() {
        let w = dmatrix![1.0, 1.0; 1.0, 1.0];
        let pd = chol_psd(&w, DEFAULT_MAX_JITTER).unwrap();
        assert!(pd.jitter_applied() > 0.0 && pd.jitter_applied() <= 1e-6);
        let l = pd.factor();
        let rebuilt = &l * l.transpose();
        let mut expected = w.clone();
        expected[(0, 0)] += pd.jitter_applied();
        expected[(1, 1)] += pd.jitter_applied();
        assert_relative_eq!(rebuilt, expected, max_relative = 1e-8);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let w = dmatrix![1.0, 0.2; 0.3, 1.0];
        assert!(matches!(
            chol_psd(&w, DEFAULT_MAX_JITTER),
            Err(MnpError::Argument(_))
        ));
    }

    #[test]
    fn indefinite_matrix_reports_name() {
        let w = dmatrix![1.0, 2.0; 2.0, 1.0];
        match chol_psd_named(&w, 1e-6, "Lambda_11") {
            Err(MnpError::Singular { name, .. }) => assert_eq!(name, "Lambda_11"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
