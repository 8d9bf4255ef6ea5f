//! The CP¹ model in one affine chart: quadrature with exactness contracts,
//! measures, metric weights, pointwise Laplace-Beltrami and Poisson bracket.
//!
//! All integrals are taken against dLeb(z)/π in chart 0; the omitted point
//! has measure zero for every measure in scope. The round Liouville density
//! is (1+|z|²)⁻² per dLeb/π, with total mass 1.

use crate::consts::KAPPA_P;
use crate::error::{Error, Result};
use crate::hermpoly::{ddbar_log_at, frame_ddbar_at, BidegreePoly, FrameFunction, DIVISION_FLOOR};
use crate::linalg::pairwise_sum_c;
use crate::{C64, CMat};
use std::f64::consts::PI;

/// Affine coordinate of a point in chart 0.
pub type ChartPoint = C64;

/// Round Liouville density per dLeb/π.
pub fn round_density(z: C64) -> f64 {
    let t = z.norm_sqr();
    1.0 / ((1.0 + t) * (1.0 + t))
}

/// Gauss-Legendre nodes and weights on [0, 1], exact through degree 2n-1.
fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Newton iteration on P_n over [-1, 1], Chebyshev initial guess.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Product rule on the chart: radial Gauss-Legendre in u = |z|²/(1+|z|²)
/// composed with a uniform angular grid. Integrates z^j z̄^k (1+|z|²)^{-mw}
/// exactly against dLeb/π for j,k ≤ exact_bidegree, mw ≤ exact_weight_power,
/// j,k ≤ mw-2.
#[derive(Clone, Debug)]
pub struct QuadratureRule {
    nodes: Vec<C64>,
    weights: Vec<f64>,
    exact_bidegree: usize,
    exact_weight_power: usize,
    n_radial: usize,
    n_angular: usize,
}

impl QuadratureRule {
    pub fn new(m: usize, d: usize) -> Result<Self> {
        if m < d + 2 {
            return Err(Error::QuadratureDomain { m, d });
        }
        let n_radial = m.div_ceil(2) + 1;
        let n_angular = 2 * d + 1;
        Ok(Self::with_counts(n_radial, n_angular, m, d))
    }

    fn with_counts(n_radial: usize, n_angular: usize, m: usize, d: usize) -> Self {
        let (u, wu) = gauss_legendre_unit(n_radial);
        let mut nodes = Vec::with_capacity(n_radial * n_angular);
        let mut weights = Vec::with_capacity(n_radial * n_angular);
        for i in 0..n_radial {
            let t = u[i] / (1.0 - u[i]);
            let jac = 1.0 / ((1.0 - u[i]) * (1.0 - u[i]));
            let r = t.sqrt();
            for l in 0..n_angular {
                let theta = 2.0 * PI * l as f64 / n_angular as f64;
                nodes.push(C64::from_polar(r, theta));
                weights.push(wu[i] * jac / n_angular as f64);
            }
        }
        Self {
            nodes,
            weights,
            exact_bidegree: d,
            exact_weight_power: m,
            n_radial,
            n_angular,
        }
    }

    /// Doubles both node counts; the exactness contract grows accordingly.
    pub fn refine(&self) -> Self {
        let n_radial = 2 * self.n_radial;
        let n_angular = 2 * self.n_angular;
        let m = 2 * (n_radial - 1);
        let d = (n_angular - 1) / 2;
        Self::with_counts(n_radial, n_angular, m, d)
    }

    /// Substituted rule for radial kernels (α+β|ζ|²)^{-m}: nodes scale by
    /// √c and weights by c with c = α/β, mapping the kernel back to the
    /// (1+|ζ|²)-form this rule is exact for.
    pub fn scaled(&self, c: f64) -> Self {
        let s = c.sqrt();
        Self {
            nodes: self.nodes.iter().map(|&z| z * s).collect(),
            weights: self.weights.iter().map(|&w| w * c).collect(),
            exact_bidegree: self.exact_bidegree,
            exact_weight_power: self.exact_weight_power,
            n_radial: self.n_radial,
            n_angular: self.n_angular,
        }
    }

    pub fn nodes(&self) -> &[C64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn exact_bidegree(&self) -> usize {
        self.exact_bidegree
    }

    pub fn exact_weight_power(&self) -> usize {
        self.exact_weight_power
    }

    /// Weighted sum with a deterministic pairwise reduction order.
    pub fn integrate<F>(&self, f: F) -> Result<C64>
    where
        F: Fn(C64) -> C64,
    {
        let mut terms = Vec::with_capacity(self.len());
        for (&z, &w) in self.nodes.iter().zip(self.weights.iter()) {
            let v = f(z);
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(Error::NonFiniteIntegrand { at: z });
            }
            terms.push(v * w);
        }
        Ok(pairwise_sum_c(&terms))
    }

    pub fn integrate_real<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(C64) -> f64,
    {
        Ok(self.integrate(|z| C64::new(f(z), 0.0))?.re)
    }
}

/// Measure on CP¹, as a density against dLeb/π in the chart.
#[derive(Clone, Debug)]
pub enum Measure {
    /// Round Fubini-Study Liouville measure, total mass 1.
    RoundLiouville,
    /// Liouville measure of the Fubini-Study metric of an inner product:
    /// density ∂∂̄ log K with K(z) = Σ (q⁻¹)_{jk} z^j z̄^k.
    LiouvilleOfFs { kernel: BidegreePoly, level: usize },
    /// Fixed density, positivity asserted at the quadrature nodes in use.
    FixedDensity { density: FrameFunction },
}

impl Measure {
    /// Build the q-dependent Liouville measure from the inverse product
    /// matrix (monomial basis).
    pub fn liouville_of_fs_from_inverse(qinv: &CMat, level: usize) -> Self {
        Measure::LiouvilleOfFs {
            kernel: kernel_poly_from_inverse(qinv),
            level,
        }
    }

    pub fn density_at(&self, z: C64) -> Result<f64> {
        match self {
            Measure::RoundLiouville => Ok(round_density(z)),
            Measure::LiouvilleOfFs { kernel, .. } => {
                let v = ddbar_log_at(kernel, z, DIVISION_FLOOR)?.re;
                if v < 0.0 {
                    return Err(Error::DensityNotPositive { at: z, value: v });
                }
                Ok(v)
            }
            Measure::FixedDensity { density } => {
                let v = density.eval(z).re;
                if v <= 0.0 {
                    return Err(Error::DensityNotPositive { at: z, value: v });
                }
                Ok(v)
            }
        }
    }

    /// Extra (bidegree, weight-power) the density contributes to polynomial
    /// integrands, or None when the density is rational and quadrature must
    /// be refined adaptively.
    pub fn exact_extra(&self) -> Option<(usize, usize)> {
        match self {
            Measure::RoundLiouville => Some((0, 2)),
            Measure::LiouvilleOfFs { .. } => None,
            Measure::FixedDensity { density } => {
                let (d1, d2) = density.numerator().degrees();
                Some((d1.max(d2), density.weight_power()))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Measure::RoundLiouville => "round-liouville".to_string(),
            Measure::LiouvilleOfFs { level, .. } => format!("liouville-of-fs(p={level})"),
            Measure::FixedDensity { .. } => "fixed-density".to_string(),
        }
    }
}

/// Pointwise positive metric weight on L^p sections: |s(z)|²_h = |f_s(z)|² w(z).
#[derive(Clone, Debug)]
pub enum MetricWeight {
    /// Round weight (1+|z|²)^{-p}.
    Round { level: usize },
    /// Fubini-Study weight 1/K of an inner product, K(z) = Σ (q⁻¹)_{jk} z^j z̄^k.
    InverseKernel { kernel: BidegreePoly, level: usize },
}

impl MetricWeight {
    pub fn level(&self) -> usize {
        match self {
            MetricWeight::Round { level } => *level,
            MetricWeight::InverseKernel { level, .. } => *level,
        }
    }

    pub fn value_at(&self, z: C64) -> Result<f64> {
        match self {
            MetricWeight::Round { level } => {
                Ok((1.0 + z.norm_sqr()).powi(-(*level as i32)))
            }
            MetricWeight::InverseKernel { kernel, .. } => {
                let k = kernel.eval(z).re;
                if k <= 0.0 {
                    return Err(Error::DensityNotPositive { at: z, value: k });
                }
                Ok(1.0 / k)
            }
        }
    }

    /// Extra weight power for polynomial exactness, or None when rational.
    pub fn exact_extra(&self) -> Option<usize> {
        match self {
            MetricWeight::Round { level } => Some(*level),
            MetricWeight::InverseKernel { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MetricWeight::Round { level } => format!("round(p={level})"),
            MetricWeight::InverseKernel { level, .. } => format!("fs-weight(p={level})"),
        }
    }
}

/// K(z) = Σ_{jk} (q⁻¹)_{jk} z^j z̄^k as a polynomial, from the inverse matrix.
pub fn kernel_poly_from_inverse(qinv: &CMat) -> BidegreePoly {
    BidegreePoly::from_coeffs(qinv.clone())
}

/// Geometer's Laplace-Beltrami value from the area density σ per dLeb/π and
/// the mixed second derivative: Δf = -(4π/σ)·∂_z∂_z̄ f. The sign convention
/// makes the spectrum positive, pinned by Δx₁ = 8π·x₁ on the area-1 round
/// sphere.
pub fn laplace_from_parts(sigma: f64, ddbar: C64) -> f64 {
    -(4.0 * PI) * ddbar.re / sigma
}

/// Laplace-Beltrami of a [`FrameFunction`] at z for a metric given by its
/// Liouville density per dLeb/π.
pub fn laplace_beltrami_at<D>(area_density: D, f: &FrameFunction, z: C64) -> Result<f64>
where
    D: Fn(C64) -> Result<f64>,
{
    let sigma = area_density(z)?;
    if sigma <= 0.0 {
        return Err(Error::DensityNotPositive {
            at: z,
            value: sigma,
        });
    }
    Ok(laplace_from_parts(sigma, frame_ddbar_at(f, z)))
}

/// Poisson bracket at z against a symplectic density σ per dLeb/π:
/// {f,g}(z) = κ_P · 2·Im(∂_z f · conj(∂_z g)) / σ(z).
pub fn poisson_bracket_at<D>(
    omega_density: D,
    f: &FrameFunction,
    g: &FrameFunction,
    z: C64,
) -> Result<f64>
where
    D: Fn(C64) -> Result<f64>,
{
    let sigma = omega_density(z)?;
    if sigma <= 0.0 {
        return Err(Error::DensityNotPositive {
            at: z,
            value: sigma,
        });
    }
    let fz = f.d_z().eval(z);
    let gz = g.d_z().eval(z);
    Ok(KAPPA_P * 2.0 * (fz * gz.conj()).im / sigma)
}

/// Poisson bracket of two frame functions for the round symplectic form, as
/// a frame function: κ_P·(1+|z|²)²·(-i)(∂f ∂̄g - ∂̄f ∂g).
pub fn poisson_bracket_round(f: &FrameFunction, g: &FrameFunction) -> FrameFunction {
    let fz = f.d_z();
    let gz = g.d_z();
    let prod = fz.mul(&gz.conj_fn());
    let anti = prod.sub(&prod.conj_fn()); // 2i·Im(∂f·conj(∂g))
    anti.scale(C64::new(0.0, -KAPPA_P)).mul_round_pow(2).reduced()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::{lambda_k, KAPPA_P};
    use approx::assert_abs_diff_eq;

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|i| i as f64).product()
    }

    #[test]
    fn quadrature_rejects_nonintegrable() {
        assert!(matches!(
            QuadratureRule::new(3, 2),
            Err(Error::QuadratureDomain { .. })
        ));
    }

    #[test]
    fn quadrature_moments_match_beta_integrals() {
        // Diagonal moments against j!(m-j-2)!/(m-1)!; off-diagonal vanish.
        for m in [4usize, 7, 12] {
            let d = m - 2;
            let rule = QuadratureRule::new(m, d).unwrap();
            for j in 0..=d {
                for k in 0..=d {
                    let v = rule
                        .integrate(|z| {
                            z.powu(j as u32) * z.conj().powu(k as u32)
                                * (1.0 + z.norm_sqr()).powi(-(m as i32))
                        })
                        .unwrap();
                    if j == k {
                        let expect = factorial(j) * factorial(m - j - 2) / factorial(m - 1);
                        assert_abs_diff_eq!(v.re, expect, epsilon = 1e-12 * expect.max(1.0));
                        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-14);
                    } else {
                        assert_abs_diff_eq!(v.norm(), 0.0, epsilon = 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn round_area_is_one() {
        let rule = QuadratureRule::new(4, 2).unwrap();
        let area = rule.integrate_real(round_density).unwrap();
        assert_abs_diff_eq!(area, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn beta_moment_example() {
        // p = 4, j = 2: 2!·2!/5! = 1/30.
        let rule = QuadratureRule::new(6, 4).unwrap();
        let v = rule
            .integrate_real(|z| z.norm_sqr().powi(2) * (1.0 + z.norm_sqr()).powi(-6))
            .unwrap();
        assert_abs_diff_eq!(v, 1.0 / 30.0, epsilon = 1e-14);
    }

    #[test]
    fn x3_moments() {
        let rule = QuadratureRule::new(8, 4).unwrap();
        let x3 = FrameFunction::x3();
        let m1 = rule
            .integrate_real(|z| x3.eval(z).re * round_density(z))
            .unwrap();
        assert_abs_diff_eq!(m1, 0.0, epsilon = 1e-14);
        let m2 = rule
            .integrate_real(|z| x3.eval(z).re.powi(2) * round_density(z))
            .unwrap();
        assert_abs_diff_eq!(m2, 1.0 / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn refinement_changes_exact_gram_below_tolerance() {
        let rule = QuadratureRule::new(8, 6).unwrap();
        let fine = rule.refine();
        for j in 0..=4usize {
            let f = |z: C64| z.norm_sqr().powi(j as i32) * (1.0 + z.norm_sqr()).powi(-8);
            let a = rule.integrate_real(f).unwrap();
            let b = fine.integrate_real(f).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1e-3));
        }
    }

    fn round_sigma(z: C64) -> Result<f64> {
        Ok(round_density(z))
    }

    #[test]
    fn laplacian_eigenfunctions() {
        let x1 = FrameFunction::x1();
        let f0 = FrameFunction::constant(3.0);
        let pts = [
            C64::new(0.3, 0.2),
            C64::new(-1.1, 0.7),
            C64::new(0.05, -2.0),
            C64::new(2.2, 1.9),
            C64::new(-0.4, -0.6),
        ];
        for &z in &pts {
            assert_abs_diff_eq!(
                laplace_beltrami_at(round_sigma, &f0, z).unwrap(),
                0.0,
                epsilon = 1e-12
            );
            let lhs = laplace_beltrami_at(round_sigma, &x1, z).unwrap();
            assert_abs_diff_eq!(lhs, lambda_k(1) * x1.eval(z).re, epsilon = 1e-10);
            // degree-2 harmonic x1·x2
            let h2 = FrameFunction::x1().mul(&FrameFunction::x2());
            let lhs2 = laplace_beltrami_at(round_sigma, &h2, z).unwrap();
            assert_abs_diff_eq!(lhs2, lambda_k(2) * h2.eval(z).re, epsilon = 1e-9);
        }
    }

    #[test]
    fn laplacian_is_symmetric() {
        // ∫ f Δg dν = ∫ g Δf dν for band-limited frame functions.
        let f = FrameFunction::x1().mul(&FrameFunction::x3());
        let g = FrameFunction::x2();
        let rule = QuadratureRule::new(12, 8).unwrap();
        let a = rule
            .integrate_real(|z| {
                f.eval(z).re * laplace_beltrami_at(round_sigma, &g, z).unwrap() * round_density(z)
            })
            .unwrap();
        let b = rule
            .integrate_real(|z| {
                g.eval(z).re * laplace_beltrami_at(round_sigma, &f, z).unwrap() * round_density(z)
            })
            .unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }

    #[test]
    fn poisson_bracket_su2_structure() {
        // {x1, x2} = 2κ_P·x3 = 4π·x3, pointwise and as a frame function.
        let x1 = FrameFunction::x1();
        let x2 = FrameFunction::x2();
        let x3 = FrameFunction::x3();
        let br = poisson_bracket_round(&x1, &x2);
        for &z in &[C64::new(0.0, 0.0), C64::new(0.7, -0.2), C64::new(-1.5, 2.0)] {
            let pw = poisson_bracket_at(round_sigma, &x1, &x2, z).unwrap();
            assert_abs_diff_eq!(pw, 2.0 * KAPPA_P * x3.eval(z).re, epsilon = 1e-12);
            assert_abs_diff_eq!(br.eval(z).re, pw, epsilon = 1e-12);
        }
        // antisymmetry and bracketing with constants
        let zr = C64::new(0.4, 0.9);
        assert_abs_diff_eq!(
            poisson_bracket_at(round_sigma, &x1, &x1, zr).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        let c = FrameFunction::constant(2.5);
        assert_abs_diff_eq!(
            poisson_bracket_at(round_sigma, &x3, &c, zr).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn poisson_bracket_leibniz() {
        let f = FrameFunction::x1();
        let g = FrameFunction::x2();
        let h = FrameFunction::x3();
        let gh = g.mul(&h);
        for &z in &[C64::new(0.3, 0.5), C64::new(-0.8, 1.2), C64::new(1.4, -0.1)] {
            let lhs = poisson_bracket_at(round_sigma, &f, &gh, z).unwrap();
            let rhs = poisson_bracket_at(round_sigma, &f, &g, z).unwrap() * h.eval(z).re
                + g.eval(z).re * poisson_bracket_at(round_sigma, &f, &h, z).unwrap();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }
}
