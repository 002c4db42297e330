//! Multivariate normal primitives: orthant probabilities, jittered Cholesky,
//! plain and truncated sampling, and truncated first/second moments.

pub mod cdf;
pub mod normal;
pub mod pd;
pub mod sample;
pub mod truncated;

pub use cdf::{bvn_lower, mvn_cdf, CdfOptions, CdfValue};
pub use pd::{chol_psd, chol_psd_named, PdMatrix, DEFAULT_MAX_JITTER};
pub use sample::{mvn_sample, substream};
pub use truncated::{
    sample_moments, tmvn_moments, tmvn_moments_with, tmvn_sample, tmvn_sample_with, GibbsConfig,
    MomentMethod, SampleMethod, SamplerDiagnostics, TmvnMoments, TruncatedMvn,
    ANALYTIC_MOMENT_CAP,
};
