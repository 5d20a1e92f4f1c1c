//! Dense linear algebra, counter-based random sampling, spread statistics,
//! and special functions shared by every other module.

pub mod eigen;
pub mod matrix;
pub mod rng;
pub mod special;
pub mod stats;

pub use eigen::{condition_number, sym_eigen, EigenDecomposition};
pub use matrix::{dot, Matrix};
pub use rng::{cholesky_psd, sample_gaussian, RngStream};
pub use special::{erf, erfc, normal_cdf};
pub use stats::{dispersion, mean, median, population_std, softmax, SpreadMetric};
