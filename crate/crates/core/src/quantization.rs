//! Scalar Berezin-Toeplitz pipeline on CP¹: section Grams, Hilb and FS maps,
//! Toeplitz operators, coherent projectors, Berezin symbols, and the Berezin
//! transform as a finite-rank super-operator on Hermitian matrices.
//!
//! Operators live in the orthonormal basis obtained from the Cholesky factor
//! of the monomial Gram matrix, in monomial order z⁰…z^p. For a point z the
//! coherent evaluation vector v(z) (orthonormal-basis section values times
//! the square root of the metric weight) carries the whole pipeline:
//!
//!   T(f)  = ∫ f(z) v v† dν,     ρ(z) = ‖v‖²,     Π(z) = v v†/‖v‖².

use crate::error::{Error, Result};
use crate::geometry::{kernel_poly_from_inverse, Measure, MetricWeight, QuadratureRule};
use crate::hermpoly::{ddbar_log_at, FrameFunction, DIVISION_FLOOR};
use crate::linalg::{
    cholesky_lower, eigh_r, eigvalsh_c, herm_coords, hermitize, solve_lower, solve_lower_vec,
};
use crate::report::{SpectrumReport, CLUSTER_REL_TOL};
use crate::{C64, CMat, CVec, RMat};
use ndarray::{Array1, Array2};

/// Target relative Frobenius stability for node-doubling refinement of
/// rational (q-dependent) integrands.
pub const REFINE_RTOL: f64 = 1e-10;
/// Refinement doubling cap before reporting failure.
pub const REFINE_CAP: usize = 6;

/// Hermitian positive-definite matrix representing an inner product on H_p
/// in the monomial basis.
#[derive(Clone, Debug)]
pub struct ProdMatrix {
    m: CMat,
}

impl ProdMatrix {
    pub fn new(m: CMat, context: &str) -> Result<Self> {
        let h = hermitize(&m);
        cholesky_lower(&h, context)?;
        Ok(Self { m: h })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.m
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            m: self.m.mapv(|x| x * c),
        }
    }

    /// Inverse through the Cholesky factorization.
    pub fn inverse(&self) -> Result<CMat> {
        let n = self.dim();
        let l = cholesky_lower(&self.m, "product inverse")?;
        let linv = solve_lower(&l, &Array2::eye(n))?;
        Ok(linv.t().mapv(|c| c.conj()).dot(&linv))
    }

    /// The round balanced product diag(1/C(p,j)).
    pub fn round_balanced(p: usize) -> Self {
        let n = p + 1;
        let mut m: CMat = Array2::zeros((n, n));
        for (j, b) in binomial_row(p).iter().enumerate() {
            m[(j, j)] = C64::new(1.0 / b, 0.0);
        }
        Self { m }
    }
}

/// Hermitian matrix representing a quantum observable on H_p, expressed in
/// the setup's orthonormal basis. Re-symmetrized on construction.
#[derive(Clone, Debug)]
pub struct HermOp {
    m: CMat,
}

impl HermOp {
    pub fn new(m: CMat) -> Self {
        Self { m: hermitize(&m) }
    }

    pub fn matrix(&self) -> &CMat {
        &self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn eigenvalues(&self) -> Result<Array1<f64>> {
        eigvalsh_c(&self.m)
    }

    pub fn op_norm(&self) -> Result<f64> {
        Ok(self
            .eigenvalues()?
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.abs())))
    }
}

/// Row of binomial coefficients C(p, j), j = 0..=p.
pub fn binomial_row(p: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(p + 1);
    let mut b = 1.0f64;
    for j in 0..=p {
        row.push(b);
        b *= (p - j) as f64 / (j + 1) as f64;
    }
    row
}

/// Full quantization context at level p: N = p+1 sections z⁰…z^p.
#[derive(Clone, Debug)]
pub struct QuantumSetup {
    p: usize,
    metric: MetricWeight,
    measure: Measure,
    rule: QuadratureRule,
    gram: ProdMatrix,
    chol: CMat,
}

impl QuantumSetup {
    /// Round metric, round Liouville measure.
    pub fn round(p: usize) -> Result<Self> {
        Self::new(p, MetricWeight::Round { level: p }, Measure::RoundLiouville)
    }

    pub fn new(p: usize, metric: MetricWeight, measure: Measure) -> Result<Self> {
        let rule = base_rule(p, &metric, &measure, 0, 0)?;
        let exact = metric.exact_extra().is_some() && measure.exact_extra().is_some();
        let gram_m = if exact {
            assemble_gram(&rule, p, &metric, &measure)?
        } else {
            refine_matrix(&rule, |r| assemble_gram(r, p, &metric, &measure))?
        };
        let gram = ProdMatrix::new(gram_m, "section Gram matrix")?;
        let chol = cholesky_lower(gram.matrix(), "section Gram matrix")?;
        Ok(Self {
            p,
            metric,
            measure,
            rule,
            gram,
            chol,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.p + 1
    }

    pub fn metric(&self) -> &MetricWeight {
        &self.metric
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn describe(&self) -> String {
        format!(
            "scalar p={} metric={} measure={}",
            self.p,
            self.metric.describe(),
            self.measure.describe()
        )
    }

    /// Whether all integrands built from this setup are polynomial against
    /// the round kernel (so the sized rules are exact).
    pub fn is_exact(&self) -> bool {
        self.metric.exact_extra().is_some() && self.measure.exact_extra().is_some()
    }

    /// Rule covering integrands with `extra_d` more bidegree and `extra_m`
    /// more weight power than the Gram integrand.
    pub fn rule_for(&self, extra_d: usize, extra_m: usize) -> Result<QuadratureRule> {
        base_rule(self.p, &self.metric, &self.measure, extra_d, extra_m)
    }

    /// Coherent evaluation vector in the orthonormal basis, including the
    /// square root of the metric weight: v(z) = √w(z)·L⁻¹·(conj monomials).
    pub fn coherent_vec(&self, z: C64) -> Result<CVec> {
        let abar = monomial_vec(z.conj(), self.dim());
        let xi = solve_lower_vec(&self.chol, &abar)?;
        let w = self.metric.value_at(z)?.sqrt();
        Ok(xi.mapv(|c| c * w))
    }

    pub(crate) fn gram_matrix(&self) -> &ProdMatrix {
        &self.gram
    }
}

pub(crate) fn monomial_vec(z: C64, n: usize) -> CVec {
    let mut v = Array1::zeros(n);
    let mut acc = C64::new(1.0, 0.0);
    for j in 0..n {
        v[j] = acc;
        acc *= z;
    }
    v
}

fn base_rule(
    p: usize,
    metric: &MetricWeight,
    measure: &Measure,
    extra_d: usize,
    extra_m: usize,
) -> Result<QuadratureRule> {
    let metric_m = metric.exact_extra().unwrap_or(metric.level());
    let (meas_d, meas_m) = measure.exact_extra().unwrap_or((0, 2));
    let d = p + meas_d + extra_d;
    let m = (metric_m + meas_m + extra_m).max(d + 2);
    QuadratureRule::new(m, d)
}

/// Node-doubling refinement until the assembled matrix is Frobenius-stable
/// to [`REFINE_RTOL`], capped at [`REFINE_CAP`] doublings.
pub(crate) fn refine_matrix<F>(base: &QuadratureRule, build: F) -> Result<CMat>
where
    F: Fn(&QuadratureRule) -> Result<CMat>,
{
    let mut rule = base.clone();
    let mut current = build(&rule)?;
    let mut rel = f64::INFINITY;
    for _ in 0..REFINE_CAP {
        let finer = rule.refine();
        let next = build(&finer)?;
        let num = (&next - &current)
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den = next.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        rel = num / den.max(1e-300);
        current = next;
        rule = finer;
        if rel <= REFINE_RTOL {
            return Ok(current);
        }
    }
    Err(Error::RefinementStalled {
        doublings: REFINE_CAP,
        achieved: rel,
        target: REFINE_RTOL,
    })
}

fn assemble_gram(
    rule: &QuadratureRule,
    p: usize,
    metric: &MetricWeight,
    measure: &Measure,
) -> Result<CMat> {
    let n = p + 1;
    let m = rule.len();
    let mut x: CMat = Array2::zeros((m, n));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let scale = (w * metric.value_at(z)? * measure.density_at(z)?).sqrt();
        let mono = monomial_vec(z, n);
        for j in 0..n {
            x[(i, j)] = mono[j] * scale;
        }
    }
    let xdag = x.t().mapv(|c| c.conj());
    Ok(xdag.dot(&x))
}

/// Monomial-basis Gram matrix G_{jk} = ∫ z^j z̄^k w dν of the setup.
pub fn gram(setup: &QuantumSetup) -> ProdMatrix {
    setup.gram_matrix().clone()
}

/// Total mass of a measure.
pub fn measure_mass(measure: &Measure) -> Result<f64> {
    match measure.exact_extra() {
        Some((d, m)) => {
            let rule = QuadratureRule::new(m.max(d + 2), d)?;
            rule.integrate_real(|z| measure.density_at(z).unwrap_or(f64::NAN))
        }
        None => {
            let base = QuadratureRule::new(8, 4)?;
            let as_mat = refine_matrix(&base, |r| {
                let v = r.integrate_real(|z| measure.density_at(z).unwrap_or(f64::NAN))?;
                Ok(Array2::from_elem((1, 1), C64::new(v, 0.0)))
            })?;
            Ok(as_mat[(0, 0)].re)
        }
    }
}

/// Hilbert map: (dim H_p / Vol(X,ν)) · Gram.
pub fn hilb(metric: &MetricWeight, measure: &Measure, p: usize) -> Result<ProdMatrix> {
    let setup = QuantumSetup::new(p, metric.clone(), measure.clone())?;
    let vol = measure_mass(measure)?;
    let scale = (p + 1) as f64 / vol;
    Ok(setup.gram_matrix().scale(scale))
}

/// Fubini-Study map: w(z) = 1/K_q(z), K_q(z) = Σ (q⁻¹)_{jk} z^j z̄^k.
pub fn fs(q: &ProdMatrix, p: usize) -> Result<MetricWeight> {
    if q.dim() != p + 1 {
        return Err(Error::Dimension {
            expected: p + 1,
            got: q.dim(),
        });
    }
    let qinv = q.inverse()?;
    Ok(MetricWeight::InverseKernel {
        kernel: kernel_poly_from_inverse(&qinv),
        level: p,
    })
}

/// Liouville density of ω_{FS(q)} per chart dLeb/π: ∂∂̄ log K_q.
pub fn fs_kahler_density(q: &ProdMatrix, p: usize, z: C64) -> Result<f64> {
    let qinv = q.inverse()?;
    let kernel = kernel_poly_from_inverse(&qinv);
    let v = ddbar_log_at(&kernel, z, DIVISION_FLOOR)?.re;
    if p >= 1 && v <= 0.0 {
        return Err(Error::DensityNotPositive { at: z, value: v });
    }
    Ok(v)
}

fn toeplitz_with_rule<F>(setup: &QuantumSetup, rule: &QuadratureRule, f: F) -> Result<CMat>
where
    F: Fn(C64) -> Result<f64>,
{
    // rows carry conj(v) so that T_{jk} = ∫ f·v_j·conj(v_k), the operator
    // convention matching the coherent projector Π = v v†/‖v‖².
    let n = setup.dim();
    let m = rule.len();
    let mut x: CMat = Array2::zeros((m, n));
    let mut fx: CMat = Array2::zeros((m, n));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let v = setup.coherent_vec(z)?;
        let scale = (w * setup.measure().density_at(z)?).sqrt();
        let fv = f(z)?;
        for j in 0..n {
            let vb = v[j].conj() * scale;
            x[(i, j)] = vb;
            fx[(i, j)] = vb * fv;
        }
    }
    let xdag = x.t().mapv(|c| c.conj());
    Ok(xdag.dot(&fx))
}

/// Pointwise Toeplitz assembly for symbols only available as evaluations;
/// `extra` is the (bidegree, weight-power) budget of the symbol for rule
/// sizing.
pub fn toeplitz_pointwise<F>(setup: &QuantumSetup, f: F, extra: (usize, usize)) -> Result<HermOp>
where
    F: Fn(C64) -> Result<f64> + Copy,
{
    let rule = setup.rule_for(extra.0, extra.1)?;
    let m = if setup.is_exact() {
        toeplitz_with_rule(setup, &rule, f)?
    } else {
        refine_matrix(&rule, |r| toeplitz_with_rule(setup, r, f))?
    };
    Ok(HermOp::new(m))
}

/// Berezin-Toeplitz quantization of a real bounded frame function.
pub fn toeplitz(setup: &QuantumSetup, f: &FrameFunction) -> Result<HermOp> {
    if !f.is_real_valued(1e-12) {
        let imag = probe_imag(f);
        return Err(Error::NonRealSymbol { imag });
    }
    f.ensure_bounded()?;
    let (d1, d2) = f.numerator().degrees();
    toeplitz_pointwise(setup, |z| Ok(f.eval(z).re), (d1.max(d2), f.weight_power()))
}

fn probe_imag(f: &FrameFunction) -> f64 {
    let pts = [C64::new(0.3, 0.4), C64::new(-1.2, 0.9), C64::new(2.0, -0.5)];
    pts.iter()
        .map(|&z| f.eval(z).im.abs())
        .fold(0.0f64, f64::max)
}

/// Rank-1 coherent state projector Π_p(z) = v v†/‖v‖².
pub fn coherent_projector(setup: &QuantumSetup, z: C64) -> Result<HermOp> {
    let v = setup.coherent_vec(z)?;
    let nrm: f64 = v.iter().map(|c| c.norm_sqr()).sum();
    let n = setup.dim();
    let mut m: CMat = Array2::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            m[(a, b)] = v[a] * v[b].conj() / nrm;
        }
    }
    Ok(HermOp::new(m))
}

/// Rawnsley function ρ_p(z) = Σ_a |e_a(z)|² w(z).
pub fn rawnsley(setup: &QuantumSetup, z: C64) -> Result<f64> {
    let v = setup.coherent_vec(z)?;
    Ok(v.iter().map(|c| c.norm_sqr()).sum())
}

/// Berezin symbol T*(A)(z) = tr(Π_p(z) A).
pub fn berezin_symbol(setup: &QuantumSetup, a: &HermOp, z: C64) -> Result<f64> {
    let v = setup.coherent_vec(z)?;
    let nrm: f64 = v.iter().map(|c| c.norm_sqr()).sum();
    let av = a.matrix().dot(&v);
    let num: C64 = v
        .iter()
        .zip(av.iter())
        .map(|(&vi, &avi)| vi.conj() * avi)
        .sum();
    Ok(num.re / nrm)
}

fn berezin_operator_with_rule(setup: &QuantumSetup, rule: &QuadratureRule) -> Result<CMat> {
    let n = setup.dim();
    let nb = n * n;
    let m = rule.len();
    // Rows: herm-basis symbols at each node, scaled by √(weight·density·ρ).
    let mut s: RMat = Array2::zeros((m, nb));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let v = setup.coherent_vec(z)?;
        let rho: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        let scale = (w * setup.measure().density_at(z)? * rho).sqrt();
        let mut proj: CMat = Array2::zeros((n, n));
        for a in 0..n {
            for b in 0..n {
                proj[(a, b)] = v[a] * v[b].conj() / rho;
            }
        }
        for (col, x) in herm_coords(&proj).into_iter().enumerate() {
            s[(i, col)] = x * scale;
        }
    }
    let c = s.t().dot(&s);
    Ok(c.mapv(|x| C64::new(x, 0.0)))
}

/// The Berezin transform as an N²×N² real-symmetric matrix on Herm(H_p) in
/// the [`crate::linalg::herm_basis`] coordinates:
/// C(A) = ∫ tr(Π(z)A)·Π(z)·ρ(z) dν(z).
pub fn berezin_operator(setup: &QuantumSetup) -> Result<RMat> {
    let rule = setup.rule_for(setup.p(), setup.metric().level())?;
    let m = if setup.is_exact() {
        berezin_operator_with_rule(setup, &rule)?
    } else {
        refine_matrix(&rule, |r| berezin_operator_with_rule(setup, r))?
    };
    Ok(m.mapv(|c| c.re))
}

/// Decreasing clustered spectrum of the Berezin transform.
pub fn berezin_spectrum(setup: &QuantumSetup) -> Result<SpectrumReport> {
    let c = berezin_operator(setup)?;
    let (w, _) = eigh_r(&c)?;
    let mut evs: Vec<f64> = w.to_vec();
    evs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(SpectrumReport::from_sorted(
        setup.p(),
        &evs,
        CLUSTER_REL_TOL,
        setup.describe(),
    ))
}

/// γ_{1,p} of the round setup through the first twist sector.
///
/// The round Berezin transform commutes with the torus action z ↦ e^{iθ}z,
/// so the span of the matrix units E_{a,a+1} is invariant and carries the
/// eigenvalues γ_{j,p}, j ≥ 1, whose largest is γ_{1,p}. This is a
/// (p×p)-sized computation, used by the gap sweeps. Round setups only.
pub fn round_gamma1(p: usize) -> Result<f64> {
    if p == 0 {
        return Ok(1.0);
    }
    let setup = QuantumSetup::round(p)?;
    let rule = setup.rule_for(p, p)?;
    let mut m: CMat = Array2::zeros((p, p));
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let v = setup.coherent_vec(z)?;
        let rho: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        // u_a = conj(g_a), g_a = Π_{a+1,a} = v_{a+1} conj(v_a)/ρ
        let mut u: CVec = Array1::zeros(p);
        for a in 0..p {
            u[a] = (v[a + 1] * v[a].conj() / rho).conj();
        }
        let scale = w * setup.measure().density_at(z)? * rho;
        for i in 0..p {
            for j in 0..p {
                m[(i, j)] += u[i] * u[j].conj() * scale;
            }
        }
    }
    let w = eigvalsh_c(&m)?;
    Ok(w.iter().cloned().fold(f64::MIN, f64::max))
}

/// Apply the assembled super-operator to a Hermitian matrix.
pub fn apply_super(c: &RMat, a: &HermOp) -> HermOp {
    let x = herm_coords(a.matrix());
    let xv = Array1::from_vec(x);
    let y = c.dot(&xv);
    HermOp::new(crate::linalg::herm_from_coords(a.dim(), y.as_slice().unwrap()))
}

/// Closed-form round Berezin eigenvalue γ_{k,p} = p!(p+1)!/((p-k)!(p+k+1)!).
pub fn round_gamma_closed(p: usize, k: usize) -> f64 {
    let mut g = 1.0;
    for i in 1..=k {
        g *= (p + 1 - i) as f64 / (p + 1 + i) as f64;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermpoly::BidegreePoly;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gram_round_examples() {
        let s1 = QuantumSetup::round(1).unwrap();
        let g1 = gram(&s1);
        assert_abs_diff_eq!(g1.matrix()[(0, 0)].re, 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(g1.matrix()[(1, 1)].re, 0.5, epsilon = 1e-13);
        assert_abs_diff_eq!(g1.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-14);

        let s2 = QuantumSetup::round(2).unwrap();
        let g2 = gram(&s2);
        for (j, expect) in [1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0].iter().enumerate() {
            assert_abs_diff_eq!(g2.matrix()[(j, j)].re, *expect, epsilon = 1e-13);
        }

        let s0 = QuantumSetup::round(0).unwrap();
        assert_abs_diff_eq!(gram(&s0).matrix()[(0, 0)].re, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn hilb_round_is_inverse_binomial() {
        for p in [0usize, 1, 3, 6] {
            let h = hilb(
                &MetricWeight::Round { level: p },
                &Measure::RoundLiouville,
                p,
            )
            .unwrap();
            let binom = binomial_row(p);
            for j in 0..=p {
                assert_abs_diff_eq!(h.matrix()[(j, j)].re, 1.0 / binom[j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hilb_canonical_variant_at_round_fixed_point() {
        // Measure = Liouville of FS(q*): mass p, prefactor (p+1)/p, and the
        // result is again diag(1/C(p,j)).
        let p = 3;
        let q = ProdMatrix::round_balanced(p);
        let metric = fs(&q, p).unwrap();
        let qinv = q.inverse().unwrap();
        let measure = Measure::liouville_of_fs_from_inverse(&qinv, p);
        assert_abs_diff_eq!(measure_mass(&measure).unwrap(), p as f64, epsilon = 1e-9);
        let h = hilb(&metric, &measure, p).unwrap();
        let binom = binomial_row(p);
        for j in 0..=p {
            assert_abs_diff_eq!(h.matrix()[(j, j)].re, 1.0 / binom[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn fs_examples() {
        // q* reproduces the round weight.
        let p = 4;
        let w = fs(&ProdMatrix::round_balanced(p), p).unwrap();
        for &z in &[C64::new(0.0, 0.0), C64::new(0.7, -1.1), C64::new(2.0, 0.3)] {
            let expect = (1.0 + z.norm_sqr()).powi(-(p as i32));
            assert_abs_diff_eq!(w.value_at(z).unwrap(), expect, epsilon = 1e-12 * expect);
        }
        // p = 0 scaling equivariance: q = [c] gives w ≡ c.
        let q0 = ProdMatrix::new(Array2::from_elem((1, 1), C64::new(2.5, 0.0)), "t").unwrap();
        let w0 = fs(&q0, 0).unwrap();
        assert_abs_diff_eq!(w0.value_at(C64::new(1.0, 1.0)).unwrap(), 2.5, epsilon = 1e-13);
        // q = diag(2,2) at p = 1: K = (1+|z|²)/2, w(0) = 2.
        let q1 = ProdMatrix::new(
            Array2::from_diag(&Array1::from_vec(vec![C64::new(2.0, 0.0); 2])),
            "t",
        )
        .unwrap();
        let w1 = fs(&q1, 1).unwrap();
        assert_abs_diff_eq!(w1.value_at(C64::new(0.0, 0.0)).unwrap(), 2.0, epsilon = 1e-13);
    }

    #[test]
    fn fs_kahler_density_examples() {
        let p = 3;
        let q = ProdMatrix::round_balanced(p);
        let d0 = fs_kahler_density(&q, p, C64::new(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(d0, 3.0, epsilon = 1e-12);
        // total mass = p
        let qinv = q.inverse().unwrap();
        let measure = Measure::liouville_of_fs_from_inverse(&qinv, p);
        assert_abs_diff_eq!(measure_mass(&measure).unwrap(), 3.0, epsilon = 1e-9);
        // p = 0: flat
        let q0 = ProdMatrix::new(Array2::from_elem((1, 1), C64::new(1.0, 0.0)), "t").unwrap();
        assert_abs_diff_eq!(
            fs_kahler_density(&q0, 0, C64::new(0.4, 0.2)).unwrap(),
            0.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn toeplitz_identity_and_x3() {
        for p in [1usize, 4, 9] {
            let setup = QuantumSetup::round(p).unwrap();
            let t1 = toeplitz(&setup, &FrameFunction::constant(1.0)).unwrap();
            for a in 0..=p {
                for b in 0..=p {
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(t1.matrix()[(a, b)].re, expect, epsilon = 1e-12);
                    assert_abs_diff_eq!(t1.matrix()[(a, b)].im, 0.0, epsilon = 1e-12);
                }
            }
            let t3 = toeplitz(&setup, &FrameFunction::x3()).unwrap();
            for j in 0..=p {
                let expect = (p as f64 - 2.0 * j as f64) / (p as f64 + 2.0);
                assert_abs_diff_eq!(t3.matrix()[(j, j)].re, expect, epsilon = 1e-12);
            }
            let norm = t3.op_norm().unwrap();
            assert_abs_diff_eq!(norm, p as f64 / (p as f64 + 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn toeplitz_rejects_non_real() {
        let setup = QuantumSetup::round(2).unwrap();
        let f = FrameFunction::new(BidegreePoly::monomial(1, 0, C64::new(1.0, 0.0)), 1);
        assert!(matches!(
            toeplitz(&setup, &f),
            Err(Error::NonRealSymbol { .. })
        ));
    }

    #[test]
    fn toeplitz_positivity() {
        // f ≥ 0 at all nodes ⇒ min eig T(f) ≥ -1e-12.
        let setup = QuantumSetup::round(6).unwrap();
        let f = FrameFunction::x3()
            .mul(&FrameFunction::x3())
            .add(&FrameFunction::x1().mul(&FrameFunction::x1()));
        let t = toeplitz(&setup, &f).unwrap();
        let min = t.eigenvalues().unwrap()[0];
        assert!(min >= -1e-12, "min eig {min}");
    }

    #[test]
    fn rawnsley_and_projector() {
        for p in [2usize, 7] {
            let setup = QuantumSetup::round(p).unwrap();
            for &z in &[C64::new(0.0, 0.0), C64::new(0.8, -0.6), C64::new(-2.5, 1.0)] {
                assert_abs_diff_eq!(
                    rawnsley(&setup, z).unwrap(),
                    (p + 1) as f64,
                    epsilon = 1e-10
                );
                let pi = coherent_projector(&setup, z).unwrap();
                let tr: C64 = pi.matrix().diag().iter().sum();
                assert_abs_diff_eq!(tr.re, 1.0, epsilon = 1e-12);
                let sq = pi.matrix().dot(pi.matrix());
                let dev: f64 = (&sq - pi.matrix())
                    .iter()
                    .map(|c| c.norm())
                    .fold(0.0, f64::max);
                assert!(dev < 1e-12);
            }
        }
    }

    #[test]
    fn bergman_density_first_coefficients() {
        // ρ_p/p = b0 + b1/p exactly with b0 = b1 = 1 on the round setup.
        for p in [4usize, 9] {
            let setup = QuantumSetup::round(p).unwrap();
            let rho = rawnsley(&setup, C64::new(0.3, -1.2)).unwrap();
            let b1 = p as f64 * (rho / p as f64 - 1.0);
            assert_abs_diff_eq!(b1, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn berezin_symbol_examples() {
        let p = 5;
        let setup = QuantumSetup::round(p).unwrap();
        let id = HermOp::new(Array2::eye(p + 1));
        for &z in &[C64::new(0.2, 0.1), C64::new(-1.0, 2.0)] {
            assert_abs_diff_eq!(berezin_symbol(&setup, &id, z).unwrap(), 1.0, epsilon = 1e-12);
        }
        let t3 = toeplitz(&setup, &FrameFunction::x3()).unwrap();
        let north = berezin_symbol(&setup, &t3, C64::new(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(north, p as f64 / (p as f64 + 2.0), epsilon = 1e-12);
    }

    #[test]
    fn duality_residual() {
        // ⟨⟨T(f),A⟩⟩ = ∫ f·T*(A)·ρ dν for random f, A.
        let p = 4;
        let setup = QuantumSetup::round(p).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let f = FrameFunction::x1()
                .scale(C64::new(rng.gen_range(-1.0..1.0), 0.0))
                .add(&FrameFunction::x3().scale(C64::new(rng.gen_range(-1.0..1.0), 0.0)));
            let n = p + 1;
            let mut am: CMat = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    am[(i, j)] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
            }
            let a = HermOp::new(am);
            let t = toeplitz(&setup, &f).unwrap();
            let lhs: C64 = t.matrix().dot(a.matrix()).diag().iter().sum();
            let rule = setup.rule_for(2 * p + 2, p).unwrap();
            let rhs = rule
                .integrate_real(|z| {
                    f.eval(z).re
                        * berezin_symbol(&setup, &a, z).unwrap()
                        * rawnsley(&setup, z).unwrap()
                        * setup.measure().density_at(z).unwrap()
                })
                .unwrap();
            assert_abs_diff_eq!(lhs.re, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn berezin_spectrum_small_p() {
        // p = 1 full spectrum {1, 1/3 ×3}.
        let setup = QuantumSetup::round(1).unwrap();
        let rep = berezin_spectrum(&setup).unwrap();
        assert_eq!(rep.multiplicities, vec![1, 3]);
        assert_abs_diff_eq!(rep.eigenvalues[0], 1.0, epsilon = 1e-11);
        assert_abs_diff_eq!(rep.eigenvalues[1], 1.0 / 3.0, epsilon = 1e-11);
    }

    #[test]
    fn berezin_operator_fixes_identity() {
        let setup = QuantumSetup::round(3).unwrap();
        let c = berezin_operator(&setup).unwrap();
        let id = HermOp::new(Array2::eye(4));
        let out = apply_super(&c, &id);
        let dev: f64 = (out.matrix() - id.matrix())
            .iter()
            .map(|x| x.norm())
            .fold(0.0, f64::max);
        assert!(dev < 1e-11, "C(Id) deviates by {dev}");
    }

    #[test]
    fn berezin_contraction_bounds() {
        let setup = QuantumSetup::round(4).unwrap();
        let rep = berezin_spectrum(&setup).unwrap();
        for &g in &rep.eigenvalues {
            assert!(g >= -1e-12 && g <= 1.0 + 1e-12);
        }
        assert_abs_diff_eq!(rep.eigenvalues[0], 1.0, epsilon = 1e-11);
    }

    #[test]
    fn kernel_diagonal_identity() {
        // Super-operator action on T(f) equals quantization of the symbol of
        // T(f), for random f and matching evaluation points.
        let p = 3;
        let setup = QuantumSetup::round(p).unwrap();
        let f = FrameFunction::x1().add(&FrameFunction::x3().scale(C64::new(0.7, 0.0)));
        let tf = toeplitz(&setup, &f).unwrap();
        let c = berezin_operator(&setup).unwrap();
        let via_super = apply_super(&c, &tf);
        let via_symbol = toeplitz_pointwise(
            &setup,
            |z| berezin_symbol(&setup, &tf, z),
            (2 * p, p),
        )
        .unwrap();
        let dev: f64 = (via_super.matrix() - via_symbol.matrix())
            .iter()
            .map(|x| x.norm())
            .fold(0.0, f64::max);
        assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn round_gamma1_matches_full_spectrum() {
        for p in [2usize, 5, 8] {
            let g1_fast = round_gamma1(p).unwrap();
            assert_abs_diff_eq!(g1_fast, round_gamma_closed(p, 1), epsilon = 1e-12);
            let setup = QuantumSetup::round(p).unwrap();
            let rep = berezin_spectrum(&setup).unwrap();
            assert_abs_diff_eq!(g1_fast, rep.eigenvalues[1], epsilon = 1e-11);
        }
    }

    #[test]
    fn spectrum_gap_second_order() {
        // p³·|1-γ₁-2/p+4/p²| = 8p/(p+2), within a stable band.
        for p in [8usize, 16, 24] {
            let g1 = round_gamma1(p).unwrap();
            let pf = p as f64;
            let resid = pf.powi(3) * (1.0 - g1 - 2.0 / pf + 4.0 / (pf * pf)).abs();
            let expect = 8.0 * pf / (pf + 2.0);
            assert_abs_diff_eq!(resid, expect, epsilon = 1e-6);
        }
    }
}
