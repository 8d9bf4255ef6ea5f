//! Dense Hermitian linear algebra helpers on top of LAPACK.

use crate::error::{Error, Result};
use crate::{C64, CMat, CVec, RMat};
use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky, Eigh, SolveTriangular, UPLO};

/// Re-symmetrize a nearly Hermitian matrix: (A + A†)/2.
pub fn hermitize(a: &CMat) -> CMat {
    let at = a.t().mapv(|c| c.conj());
    (a + &at).mapv(|c| c * 0.5)
}

/// Frobenius deviation from Hermitian symmetry, relative to the norm.
pub fn herm_deviation(a: &CMat) -> f64 {
    let at = a.t().mapv(|c| c.conj());
    let diff = (a - &at).iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Eigenvalues (ascending) and eigenvector columns of a Hermitian matrix,
/// satisfying A·v_k = w_k·v_k.
///
/// The LAPACK call sees the row-major array as its transpose, so the raw
/// eigenvectors belong to conj(A); conjugating restores the A-convention.
pub fn eigh_c(a: &CMat) -> Result<(Array1<f64>, CMat)> {
    let (w, v) = hermitize(a).eigh(UPLO::Lower)?;
    Ok((w, v.mapv(|c| c.conj())))
}

/// Eigenvalues (ascending) of a Hermitian matrix.
pub fn eigvalsh_c(a: &CMat) -> Result<Array1<f64>> {
    Ok(eigh_c(a)?.0)
}

/// Eigenvalues (ascending) and eigenvectors of a real symmetric matrix.
pub fn eigh_r(a: &RMat) -> Result<(Array1<f64>, RMat)> {
    let sym = (a + &a.t()).mapv(|x| x * 0.5);
    let (w, v) = sym.eigh(UPLO::Lower)?;
    Ok((w, v))
}

/// Lower Cholesky factor of a Hermitian positive-definite matrix. On failure
/// the smallest eigenvalue is reported in the error.
pub fn cholesky_lower(a: &CMat, context: &str) -> Result<CMat> {
    let h = hermitize(a);
    match h.cholesky(UPLO::Lower) {
        Ok(l) => Ok(l),
        Err(_) => {
            let min_eig = eigvalsh_c(&h)
                .map(|w| w.iter().cloned().fold(f64::INFINITY, f64::min))
                .unwrap_or(f64::NAN);
            Err(Error::NotPositiveDefinite {
                min_eig,
                context: context.to_string(),
            })
        }
    }
}

/// Solve L X = B for lower-triangular L (forward substitution), column-wise.
pub fn solve_lower(l: &CMat, b: &CMat) -> Result<CMat> {
    use ndarray_linalg::triangular::Diag;
    Ok(l.solve_triangular(UPLO::Lower, Diag::NonUnit, b)?)
}

/// Solve L x = b for a single right-hand side.
pub fn solve_lower_vec(l: &CMat, b: &CVec) -> Result<CVec> {
    let n = b.len();
    let bm = b.clone().into_shape((n, 1)).expect("column reshape");
    let x = solve_lower(l, &bm)?;
    Ok(x.into_shape(n).expect("vector reshape"))
}

/// Congruence transform L⁻¹ A L⁻† taking a matrix to the orthonormal frame of
/// the Gram factor L.
pub fn to_on_frame(l: &CMat, a: &CMat) -> Result<CMat> {
    let y = solve_lower(l, a)?;
    let ydag = y.t().mapv(|c| c.conj());
    let x = solve_lower(l, &ydag)?;
    Ok(x.t().mapv(|c| c.conj()))
}

/// Operator norm of a Hermitian matrix (largest absolute eigenvalue).
pub fn op_norm_herm(a: &CMat) -> Result<f64> {
    let w = eigvalsh_c(a)?;
    Ok(w.iter().fold(0.0f64, |m, &x| m.max(x.abs())))
}

/// exp(i s H) for Hermitian H, through the spectral decomposition.
pub fn exp_i_herm(h: &CMat, s: f64) -> Result<CMat> {
    let (w, v) = eigh_c(h)?;
    let phases: Vec<C64> = w.iter().map(|&x| C64::new(0.0, s * x).exp()).collect();
    Ok(scale_columns_mul_dagger(&v, &phases))
}

/// exp(s H) for Hermitian H.
pub fn exp_herm(h: &CMat, s: f64) -> Result<CMat> {
    let (w, v) = eigh_c(h)?;
    let vals: Vec<C64> = w.iter().map(|&x| C64::new((s * x).exp(), 0.0)).collect();
    Ok(scale_columns_mul_dagger(&v, &vals))
}

fn scale_columns_mul_dagger(v: &CMat, d: &[C64]) -> CMat {
    let mut vd = v.clone();
    for (j, &s) in d.iter().enumerate() {
        vd.column_mut(j).mapv_inplace(|c| c * s);
    }
    vd.dot(&v.t().mapv(|c| c.conj()))
}

/// Affine-invariant distance ‖log(q⁻¹ᐟ² q' q⁻¹ᐟ²)‖_F between positive
/// definite Hermitian matrices, via generalized eigenvalues.
pub fn prod_distance(q: &CMat, q_next: &CMat, context: &str) -> Result<f64> {
    let l = cholesky_lower(q, context)?;
    let m = to_on_frame(&l, q_next)?;
    let w = eigvalsh_c(&m)?;
    let mut sum = 0.0;
    for &lam in w.iter() {
        if lam <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                min_eig: lam,
                context: context.to_string(),
            });
        }
        sum += lam.ln().powi(2);
    }
    Ok(sum.sqrt())
}

/// Orthonormal basis of Hermitian N×N matrices w.r.t. ⟨⟨A,B⟩⟩ = Tr[AB]:
/// diagonal units first, then for each a<b the symmetric and antisymmetric
/// combinations. The ordering is part of the super-operator conventions.
pub fn herm_basis(n: usize) -> Vec<CMat> {
    let mut basis = Vec::with_capacity(n * n);
    for a in 0..n {
        let mut e = Array2::zeros((n, n));
        e[(a, a)] = C64::new(1.0, 0.0);
        basis.push(e);
    }
    let s = 1.0 / 2.0f64.sqrt();
    for a in 0..n {
        for b in (a + 1)..n {
            let mut e = Array2::zeros((n, n));
            e[(a, b)] = C64::new(s, 0.0);
            e[(b, a)] = C64::new(s, 0.0);
            basis.push(e);
            let mut f = Array2::zeros((n, n));
            f[(a, b)] = C64::new(0.0, s);
            f[(b, a)] = C64::new(0.0, -s);
            basis.push(f);
        }
    }
    basis
}

/// Coordinates of a Hermitian matrix in the [`herm_basis`] ordering.
pub fn herm_coords(a: &CMat) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        out.push(a[(i, i)].re);
    }
    let s = 2.0f64.sqrt();
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(s * a[(i, j)].re);
            out.push(s * a[(i, j)].im);
        }
    }
    out
}

/// Rebuild a Hermitian matrix from [`herm_coords`] coordinates.
pub fn herm_from_coords(n: usize, x: &[f64]) -> CMat {
    let mut a: CMat = Array2::zeros((n, n));
    for i in 0..n {
        a[(i, i)] = C64::new(x[i], 0.0);
    }
    let s = 1.0 / 2.0f64.sqrt();
    let mut idx = n;
    for i in 0..n {
        for j in (i + 1)..n {
            let re = x[idx] * s;
            let im = x[idx + 1] * s;
            idx += 2;
            a[(i, j)] = C64::new(re, im);
            a[(j, i)] = C64::new(re, -im);
        }
    }
    a
}

/// Deterministic pairwise (tree) summation. The reduction order depends only
/// on the item count, never on threading.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Deterministic pairwise summation of complex values.
pub fn pairwise_sum_c(values: &[C64]) -> C64 {
    match values.len() {
        0 => C64::new(0.0, 0.0),
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum_c(&values[..mid]) + pairwise_sum_c(&values[mid..])
        }
    }
}

/// Fixed chunk length for parallel assembly reductions. Partial sums are
/// formed per chunk and combined in chunk order, so the result does not
/// depend on the worker count.
pub const ASSEMBLY_CHUNK: usize = 256;

/// Accumulate Σᵢ term(i) over i < n into a matrix, chunked deterministically
/// and parallelized over chunks.
pub fn chunked_matrix_sum<F>(n: usize, shape: (usize, usize), term: F) -> CMat
where
    F: Fn(usize, &mut CMat) + Sync,
{
    use rayon::prelude::*;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ASSEMBLY_CHUNK)
        .map(|s| (s, (s + ASSEMBLY_CHUNK).min(n)))
        .collect();
    let partials: Vec<CMat> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let mut acc: CMat = Array2::zeros(shape);
            for i in s..e {
                term(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total: CMat = Array2::zeros(shape);
    for p in partials {
        total += &p;
    }
    total
}
