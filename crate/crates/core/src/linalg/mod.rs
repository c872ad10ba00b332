//! Dense linear algebra, Gaussian densities and the seeded random stream.

mod cholesky;
mod matrix;
mod rng;

pub use cholesky::{
    chol_solve, cholesky, logdet, mvn_logpdf, tri_solve, CholeskyFactor, JitterLadder, Side,
};
pub(crate) use cholesky::{factor_lower, solve_triangular};
pub(crate) use matrix::gemm;
pub use matrix::Matrix;
pub use rng::{RngState, RngStream};
