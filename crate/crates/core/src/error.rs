use crate::C64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("quadrature rule needs weight power m >= d+2, got m={m}, d={d}")]
    QuadratureDomain { m: usize, d: usize },

    #[error("non-finite integrand value at node z = {at}")]
    NonFiniteIntegrand { at: C64 },

    #[error("{context}: matrix not positive definite (smallest eigenvalue {min_eig:.3e})")]
    NotPositiveDefinite { min_eig: f64, context: String },

    #[error("singular inner product matrix")]
    SingularProduct,

    #[error("joint evaluation map not surjective at z = {at}")]
    EvaluationNotSurjective { at: C64 },

    #[error("symbol is not real-valued (max imaginary part {imag:.3e})")]
    NonRealSymbol { imag: f64 },

    #[error("endomorphism symbol is not Hermitian w.r.t. the fiber metric (deviation {dev:.3e})")]
    NonHermitianSymbol { dev: f64 },

    #[error("symbol representation unbounded: bidegree ({d1},{d2}) exceeds weight power {m}")]
    UnboundedSymbol { d1: usize, d2: usize, m: usize },

    #[error(
        "quadrature refinement stalled after {doublings} doublings \
         (relative change {achieved:.3e}, target {target:.3e})"
    )]
    RefinementStalled {
        doublings: usize,
        achieved: f64,
        target: f64,
    },

    #[error("metric density not positive at z = {at} (value {value:.3e})")]
    DensityNotPositive { at: C64, value: f64 },

    #[error("denominator below floor {floor:.3e} at z = {at}")]
    DivisionNearZero { floor: f64, at: C64 },

    #[error("finite-difference step failed: perturbed product not positive definite")]
    FiniteDifferenceStep,

    #[error("canonical iteration is defined for line bundles only (rank {rank})")]
    CanonicalRankOne { rank: usize },

    #[error("analytic Jacobian requested away from a fixed point (step distance {dist:.3e})")]
    NotAtFixedPoint { dist: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("level p = {p} too small for bundle degrees {degrees:?}")]
    LevelTooSmall { p: usize, degrees: Vec<i64> },

    #[error("LAPACK failure: {0}")]
    Lapack(String),
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Lapack(e.to_string())
    }
}
