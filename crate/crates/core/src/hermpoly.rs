//! Truncated polynomial calculus in the chart coordinate z and its conjugate.
//!
//! A [`BidegreePoly`] stores Σ c_{jk} z^j z̄^k with dense coefficients; a
//! [`FrameFunction`] is such a polynomial divided by (1+|z|²)^m. Metric
//! weights, observables and symplectic densities in the chart all live in
//! this class, which is closed under the Wirtinger derivatives ∂_z and ∂_z̄.
//! Quotients (symbols against Fubini-Study kernels) are never formed
//! symbolically; only their second derivatives are evaluated pointwise via
//! the exact quotient rule.

use crate::error::{Error, Result};
use crate::C64;
use ndarray::Array2;

/// Default guard for denominators in pointwise quotient evaluation.
pub const DIVISION_FLOOR: f64 = 1e-300;

/// Polynomial Σ_{j≤d₁,k≤d₂} c_{jk} z^j z̄^k with dense coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct BidegreePoly {
    coeffs: Array2<C64>,
}

impl BidegreePoly {
    pub fn from_coeffs(coeffs: Array2<C64>) -> Self {
        Self { coeffs }
    }

    pub fn constant(c: C64) -> Self {
        Self {
            coeffs: Array2::from_elem((1, 1), c),
        }
    }

    pub fn zero() -> Self {
        Self::constant(C64::new(0.0, 0.0))
    }

    /// c · z^j z̄^k.
    pub fn monomial(j: usize, k: usize, c: C64) -> Self {
        let mut coeffs = Array2::zeros((j + 1, k + 1));
        coeffs[(j, k)] = c;
        Self { coeffs }
    }

    /// (1+z z̄)^m expanded.
    pub fn one_plus_zzbar_pow(m: usize) -> Self {
        let mut coeffs = Array2::zeros((m + 1, m + 1));
        let mut binom = 1.0f64;
        for j in 0..=m {
            coeffs[(j, j)] = C64::new(binom, 0.0);
            binom *= (m - j) as f64 / (j + 1) as f64;
        }
        Self { coeffs }
    }

    /// Bidegrees (d₁, d₂).
    pub fn degrees(&self) -> (usize, usize) {
        let s = self.coeffs.dim();
        (s.0 - 1, s.1 - 1)
    }

    pub fn coeff(&self, j: usize, k: usize) -> C64 {
        let (d1, d2) = self.degrees();
        if j <= d1 && k <= d2 {
            self.coeffs[(j, k)]
        } else {
            C64::new(0.0, 0.0)
        }
    }

    pub fn coeffs(&self) -> &Array2<C64> {
        &self.coeffs
    }

    /// Σ c_{jk} z^j conj(z)^k by nested Horner evaluation.
    pub fn eval(&self, z: C64) -> C64 {
        let zb = z.conj();
        let (rows, _) = self.coeffs.dim();
        let mut acc = C64::new(0.0, 0.0);
        for j in (0..rows).rev() {
            let mut row = C64::new(0.0, 0.0);
            for &c in self.coeffs.row(j).iter().rev() {
                row = row * zb + c;
            }
            acc = acc * z + row;
        }
        acc
    }

    pub fn add(&self, other: &Self) -> Self {
        let (a1, a2) = self.degrees();
        let (b1, b2) = other.degrees();
        let mut coeffs = Array2::zeros((a1.max(b1) + 1, a2.max(b2) + 1));
        for ((j, k), &c) in self.coeffs.indexed_iter() {
            coeffs[(j, k)] += c;
        }
        for ((j, k), &c) in other.coeffs.indexed_iter() {
            coeffs[(j, k)] += c;
        }
        Self { coeffs }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Coefficient convolution; degrees add.
    pub fn mul(&self, other: &Self) -> Self {
        let (a1, a2) = self.degrees();
        let (b1, b2) = other.degrees();
        let mut coeffs = Array2::zeros((a1 + b1 + 1, a2 + b2 + 1));
        for ((j, k), &c) in self.coeffs.indexed_iter() {
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            for ((l, m), &d) in other.coeffs.indexed_iter() {
                coeffs[(j + l, k + m)] += c * d;
            }
        }
        Self { coeffs }
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            coeffs: self.coeffs.mapv(|x| x * c),
        }
    }

    /// ∂_z: z^j z̄^k ↦ j z^{j-1} z̄^k.
    pub fn d_z(&self) -> Self {
        let (d1, d2) = self.degrees();
        if d1 == 0 {
            return Self::zero();
        }
        let mut coeffs = Array2::zeros((d1, d2 + 1));
        for j in 1..=d1 {
            for k in 0..=d2 {
                coeffs[(j - 1, k)] = self.coeffs[(j, k)] * (j as f64);
            }
        }
        Self { coeffs }
    }

    /// ∂_z̄: z^j z̄^k ↦ k z^j z̄^{k-1}.
    pub fn d_zbar(&self) -> Self {
        let (d1, d2) = self.degrees();
        if d2 == 0 {
            return Self::zero();
        }
        let mut coeffs = Array2::zeros((d1 + 1, d2));
        for j in 0..=d1 {
            for k in 1..=d2 {
                coeffs[(j, k - 1)] = self.coeffs[(j, k)] * (k as f64);
            }
        }
        Self { coeffs }
    }

    /// Complex conjugate as a function: coefficients conjugate-transpose.
    pub fn conj_fn(&self) -> Self {
        Self {
            coeffs: self.coeffs.t().mapv(|c| c.conj()),
        }
    }

    /// Exact division by (1+z z̄): Some(Q) with self = (1+zz̄)·Q when the
    /// remainder vanishes to relative round-off.
    pub fn div_one_plus_zzbar(&self) -> Option<Self> {
        let (d1, d2) = self.degrees();
        if d1 == 0 || d2 == 0 {
            return None;
        }
        let mut q: Array2<C64> = Array2::zeros((d1, d2));
        for j in 0..d1 {
            for k in 0..d2 {
                let prev = if j >= 1 && k >= 1 {
                    q[(j - 1, k - 1)]
                } else {
                    C64::new(0.0, 0.0)
                };
                q[(j, k)] = self.coeffs[(j, k)] - prev;
            }
        }
        // remainder check: reconstruct and compare
        let qq = Self { coeffs: q };
        let back = qq.mul(&Self::one_plus_zzbar_pow(1));
        let scale = self.max_norm().max(1e-300);
        let (b1, b2) = back.degrees();
        for j in 0..=b1.max(d1) {
            for k in 0..=b2.max(d2) {
                if (back.coeff(j, k) - self.coeff(j, k)).norm() > 1e-12 * scale {
                    return None;
                }
            }
        }
        Some(qq)
    }

    fn max_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0f64, f64::max)
    }

    /// Drop trailing rows/columns whose coefficients are zero to round-off.
    pub fn trimmed(&self) -> Self {
        let (d1, d2) = self.degrees();
        let tol = 1e-14 * self.max_norm();
        let mut r1 = d1;
        while r1 > 0 && (0..=d2).all(|k| self.coeffs[(r1, k)].norm() <= tol) {
            r1 -= 1;
        }
        let mut r2 = d2;
        while r2 > 0 && (0..=r1).all(|j| self.coeffs[(j, r2)].norm() <= tol) {
            r2 -= 1;
        }
        if r1 == d1 && r2 == d2 {
            return self.clone();
        }
        let mut coeffs = Array2::zeros((r1 + 1, r2 + 1));
        for j in 0..=r1 {
            for k in 0..=r2 {
                coeffs[(j, k)] = self.coeffs[(j, k)];
            }
        }
        Self { coeffs }
    }

    /// Hermitian coefficient symmetry c_{jk} = conj(c_{kj}), the exact
    /// criterion for real-valuedness on ℂ.
    pub fn is_real_valued(&self, tol: f64) -> bool {
        let (d1, d2) = self.degrees();
        let d = d1.max(d2);
        let scale: f64 = self
            .coeffs
            .iter()
            .map(|c| c.norm())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        for j in 0..=d {
            for k in 0..=d {
                let dev = (self.coeff(j, k) - self.coeff(k, j).conj()).norm();
                if dev > tol * scale {
                    return false;
                }
            }
        }
        true
    }

    #[cfg(test)]
    fn max_coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0f64, f64::max)
    }
}

/// Rational function N(z,z̄)/(1+|z|²)^m with polynomial numerator.
#[derive(Clone, Debug)]
pub struct FrameFunction {
    numerator: BidegreePoly,
    weight_power: usize,
}

impl FrameFunction {
    pub fn new(numerator: BidegreePoly, weight_power: usize) -> Self {
        Self {
            numerator,
            weight_power,
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(BidegreePoly::constant(C64::new(c, 0.0)), 0)
    }

    pub fn from_poly(p: BidegreePoly) -> Self {
        Self::new(p, 0)
    }

    /// Round weight (1+|z|²)^{-m}.
    pub fn round_weight(m: usize) -> Self {
        Self::new(BidegreePoly::constant(C64::new(1.0, 0.0)), m)
    }

    /// x₁ = (z+z̄)/(1+|z|²), first coordinate of the unit-sphere chart.
    pub fn x1() -> Self {
        let p = BidegreePoly::monomial(1, 0, C64::new(1.0, 0.0))
            .add(&BidegreePoly::monomial(0, 1, C64::new(1.0, 0.0)));
        Self::new(p, 1)
    }

    /// x₂ = -i(z-z̄)/(1+|z|²).
    pub fn x2() -> Self {
        let p = BidegreePoly::monomial(1, 0, C64::new(0.0, -1.0))
            .add(&BidegreePoly::monomial(0, 1, C64::new(0.0, 1.0)));
        Self::new(p, 1)
    }

    /// x₃ = (1-|z|²)/(1+|z|²).
    pub fn x3() -> Self {
        let p = BidegreePoly::constant(C64::new(1.0, 0.0))
            .add(&BidegreePoly::monomial(1, 1, C64::new(-1.0, 0.0)));
        Self::new(p, 1)
    }

    pub fn numerator(&self) -> &BidegreePoly {
        &self.numerator
    }

    pub fn weight_power(&self) -> usize {
        self.weight_power
    }

    pub fn eval(&self, z: C64) -> C64 {
        let t = z.norm_sqr();
        self.numerator.eval(z) / (1.0 + t).powi(self.weight_power as i32)
    }

    /// Lift the representation to a larger weight power.
    pub fn with_weight(&self, m: usize) -> Self {
        assert!(m >= self.weight_power);
        if m == self.weight_power {
            return self.clone();
        }
        let lift = BidegreePoly::one_plus_zzbar_pow(m - self.weight_power);
        Self::new(self.numerator.mul(&lift), m)
    }

    pub fn add(&self, other: &Self) -> Self {
        let m = self.weight_power.max(other.weight_power);
        let a = self.with_weight(m);
        let b = other.with_weight(m);
        Self::new(a.numerator.add(&b.numerator), m)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::new(
            self.numerator.mul(&other.numerator),
            self.weight_power + other.weight_power,
        )
    }

    pub fn scale(&self, c: C64) -> Self {
        Self::new(self.numerator.scale(c), self.weight_power)
    }

    /// Multiply by (1+|z|²)^k, i.e. lower the weight when possible.
    pub fn mul_round_pow(&self, k: usize) -> Self {
        if self.weight_power >= k {
            Self::new(self.numerator.clone(), self.weight_power - k)
        } else {
            let lift = BidegreePoly::one_plus_zzbar_pow(k - self.weight_power);
            Self::new(self.numerator.mul(&lift), 0)
        }
    }

    /// ∂_z by the quotient rule: [N_z (1+zz̄) - m N z̄] / (1+|z|²)^{m+1}.
    pub fn d_z(&self) -> Self {
        if self.weight_power == 0 {
            return Self::new(self.numerator.d_z(), 0);
        }
        let m = self.weight_power as f64;
        let one_plus = BidegreePoly::one_plus_zzbar_pow(1);
        let zbar = BidegreePoly::monomial(0, 1, C64::new(m, 0.0));
        let num = self
            .numerator
            .d_z()
            .mul(&one_plus)
            .sub(&self.numerator.mul(&zbar));
        Self::new(num, self.weight_power + 1)
    }

    /// ∂_z̄ by the quotient rule.
    pub fn d_zbar(&self) -> Self {
        if self.weight_power == 0 {
            return Self::new(self.numerator.d_zbar(), 0);
        }
        let m = self.weight_power as f64;
        let one_plus = BidegreePoly::one_plus_zzbar_pow(1);
        let zmon = BidegreePoly::monomial(1, 0, C64::new(m, 0.0));
        let num = self
            .numerator
            .d_zbar()
            .mul(&one_plus)
            .sub(&self.numerator.mul(&zmon));
        Self::new(num, self.weight_power + 1)
    }

    pub fn conj_fn(&self) -> Self {
        Self::new(self.numerator.conj_fn(), self.weight_power)
    }

    pub fn is_real_valued(&self, tol: f64) -> bool {
        self.numerator.is_real_valued(tol)
    }

    /// Cancel common (1+z z̄) factors between numerator and weight.
    pub fn reduced(&self) -> Self {
        let mut num = self.numerator.trimmed();
        let mut m = self.weight_power;
        while m > 0 {
            match num.div_one_plus_zzbar() {
                Some(q) => {
                    num = q.trimmed();
                    m -= 1;
                }
                None => break,
            }
        }
        Self::new(num, m)
    }

    /// Bounded on ℂ iff both bidegrees stay within the weight power.
    pub fn is_bounded(&self) -> bool {
        let (d1, d2) = self.numerator.degrees();
        d1 <= self.weight_power && d2 <= self.weight_power
    }

    pub fn ensure_bounded(&self) -> Result<()> {
        let (d1, d2) = self.numerator.degrees();
        if self.is_bounded() {
            Ok(())
        } else {
            Err(Error::UnboundedSymbol {
                d1,
                d2,
                m: self.weight_power,
            })
        }
    }
}

fn guard_denominator(q: C64, z: C64, floor: f64) -> Result<()> {
    if q.norm() < floor {
        Err(Error::DivisionNearZero { floor, at: z })
    } else {
        Ok(())
    }
}

/// ∂_z∂_z̄ (P/Q) at z by the exact quotient rule.
pub fn ratio_ddbar_at(p: &BidegreePoly, q: &BidegreePoly, z: C64, floor: f64) -> Result<C64> {
    let qv = q.eval(z);
    guard_denominator(qv, z, floor)?;
    let pv = p.eval(z);
    let pz = p.d_z().eval(z);
    let pzb = p.d_zbar().eval(z);
    let pzzb = p.d_z().d_zbar().eval(z);
    let qz = q.d_z().eval(z);
    let qzb = q.d_zbar().eval(z);
    let qzzb = q.d_z().d_zbar().eval(z);
    // d/dzbar of (P_z Q - P Q_z)/Q^2
    let n = pz * qv - pv * qz;
    let nzb = pzzb * qv + pz * qzb - pzb * qz - pv * qzzb;
    Ok(nzb / (qv * qv) - 2.0 * n * qzb / (qv * qv * qv))
}

/// ∂_z∂_z̄ log Q at z, i.e. (Q·∂∂̄Q - ∂Q·∂̄Q)/Q².
pub fn ddbar_log_at(q: &BidegreePoly, z: C64, floor: f64) -> Result<C64> {
    let qv = q.eval(z);
    guard_denominator(qv, z, floor)?;
    let qz = q.d_z().eval(z);
    let qzb = q.d_zbar().eval(z);
    let qzzb = q.d_z().d_zbar().eval(z);
    Ok((qv * qzzb - qz * qzb) / (qv * qv))
}

/// ∂_z∂_z̄ of a [`FrameFunction`] at z, via the quotient rule against the
/// round kernel.
pub fn frame_ddbar_at(f: &FrameFunction, z: C64) -> C64 {
    if f.weight_power() == 0 {
        return f.numerator().d_z().d_zbar().eval(z);
    }
    let q = BidegreePoly::one_plus_zzbar_pow(f.weight_power());
    ratio_ddbar_at(f.numerator(), &q, z, DIVISION_FLOOR).expect("round kernel never vanishes")
}
