//! Berezin-Toeplitz quantization on CP¹ as finite-dimensional linear algebra.
//!
//! The crate realizes the quantization pipeline in one affine chart of CP¹:
//! truncated polynomial calculus in (z, z̄) ([`hermpoly`]), Fubini-Study
//! geometry and quadrature ([`geometry`]), the scalar Toeplitz/Berezin
//! pipeline ([`quantization`]), its vector-bundle extension for split bundles
//! ⊕ᵢO(aᵢ) ([`bundles`]), quantization in stages over ℙ(E*) ([`stages`]), and
//! Donaldson's balanced-metric iterations with linearization analysis
//! ([`iterations`]).
//!
//! All computations are dense double-precision linear algebra; Hermitian
//! eigenproblems go through LAPACK.

// Link the system BLAS/LAPACK.
extern crate blas_src;
extern crate openblas_src;

pub mod bundles;
pub mod consts;
pub mod error;
pub mod geometry;
pub mod hermpoly;
pub mod iterations;
pub mod linalg;
pub mod quantization;
pub mod report;
pub mod stages;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMat = ndarray::Array2<C64>;
/// Dense complex vector.
pub type CVec = ndarray::Array1<C64>;
/// Dense real matrix.
pub type RMat = ndarray::Array2<f64>;
