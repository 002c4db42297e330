use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use super::pd::PdMatrix;
use crate::error::{MnpError, Result};

/// Independent RNG stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `count` draws from `N(mean, cov)`, one per row.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &PdMatrix,
    count: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let h = mean.len();
    if cov.dim() != h {
        return Err(MnpError::Argument(format!(
            "mean has length {h} but covariance is {}x{}",
            cov.dim(),
            cov.dim()
        )));
    }
    let l = cov.factor();
    let eps = DMatrix::<f64>::from_fn(h, count, |_, _| rng.sample(StandardNormal));
    let mut draws = &l * eps;
    for mut col in draws.column_iter_mut() {
        col += mean;
    }
    Ok(draws.transpose())
}
