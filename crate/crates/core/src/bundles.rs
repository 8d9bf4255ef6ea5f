//! Vector-bundle Berezin-Toeplitz pipeline for split bundles E = ⊕ᵢ O(aᵢ)
//! on CP¹: bundle Grams, Hilb and FS maps, endomorphism-valued Toeplitz
//! operators, the Rawnsley section, Berezin symbol and transform, structure
//! coefficients, and the closed-form Laplacian spectrum of the ℂ⊕O(k) model.
//!
//! Sections of E⊗L^p are concatenated monomial blocks z⁰…z^{p+aᵢ}. The total
//! metric at z is the r×r Hermitian matrix W_tot(z) combining the fiber
//! metric with the L^p weight; every operator is expressed in the
//! orthonormal basis from the Cholesky factor of the block Gram.
//!
//! For block-diagonal metrics the Berezin super-operator preserves the four
//! Hom-sector blocks of End(H_p), and the assembly exploits that; a dense
//! path covers general fiber metrics.

use crate::consts::{KAPPA, KAPPA_P};
use crate::error::{Error, Result};
use crate::geometry::{round_density, Measure, QuadratureRule};
use crate::hermpoly::FrameFunction;
use crate::linalg::{cholesky_lower, eigh_c, eigvalsh_c, hermitize, solve_lower};
use crate::quantization::{measure_mass, monomial_vec, refine_matrix, HermOp, ProdMatrix};
use crate::report::{BundleInfo, SpectrumReport, CLUSTER_REL_TOL};
use crate::{C64, CMat};
use ndarray::{s, Array2};

/// Split holomorphic bundle ⊕ᵢ O(aᵢ).
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSpec {
    degrees: Vec<i64>,
}

impl BundleSpec {
    pub fn new(degrees: Vec<i64>) -> Self {
        assert!(!degrees.is_empty());
        Self { degrees }
    }

    pub fn line() -> Self {
        Self::new(vec![0])
    }

    pub fn degrees(&self) -> &[i64] {
        &self.degrees
    }

    pub fn rank(&self) -> usize {
        self.degrees.len()
    }

    /// Per-block section counts p+aᵢ+1 at level p.
    pub fn block_dims(&self, p: usize) -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(self.rank());
        for &a in &self.degrees {
            let m = p as i64 + a;
            if m < 0 {
                return Err(Error::LevelTooSmall {
                    p,
                    degrees: self.degrees.clone(),
                });
            }
            dims.push(m as usize + 1);
        }
        Ok(dims)
    }

    /// dim H_p = Σᵢ (p + aᵢ + 1).
    pub fn dim_h(&self, p: usize) -> Result<usize> {
        Ok(self.block_dims(p)?.iter().sum())
    }

    pub fn block_offsets(&self, p: usize) -> Result<Vec<usize>> {
        let dims = self.block_dims(p)?;
        let mut offs = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for d in dims {
            offs.push(acc);
            acc += d;
        }
        offs.push(acc);
        Ok(offs)
    }
}

/// Pointwise Hermitian r×r fiber metric with frame-function entries.
#[derive(Clone, Debug)]
pub struct FiberMetric {
    rank: usize,
    entries: Vec<FrameFunction>, // row-major
}

impl FiberMetric {
    pub fn from_entries(entries: Vec<Vec<FrameFunction>>) -> Self {
        let rank = entries.len();
        let flat: Vec<FrameFunction> = entries.into_iter().flatten().collect();
        assert_eq!(flat.len(), rank * rank);
        Self {
            rank,
            entries: flat,
        }
    }

    /// Block-diagonal round metric diag((1+|z|²)^{-aᵢ}).
    pub fn block_round(degrees: &[i64]) -> Self {
        let r = degrees.len();
        let zero = FrameFunction::constant(0.0);
        let mut entries = vec![zero; r * r];
        for (i, &a) in degrees.iter().enumerate() {
            entries[i * r + i] = if a >= 0 {
                FrameFunction::round_weight(a as usize)
            } else {
                FrameFunction::from_poly(crate::hermpoly::BidegreePoly::one_plus_zzbar_pow(
                    (-a) as usize,
                ))
            };
        }
        Self { rank: r, entries }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entry(&self, i: usize, j: usize) -> &FrameFunction {
        &self.entries[i * self.rank + j]
    }

    pub fn is_diagonal(&self) -> bool {
        let probe = [C64::new(0.37, 0.11), C64::new(-1.4, 0.83)];
        for i in 0..self.rank {
            for j in 0..self.rank {
                if i != j {
                    let e = &self.entries[i * self.rank + j];
                    if probe.iter().any(|&z| e.eval(z).norm() > 1e-300) {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn value_at(&self, z: C64) -> CMat {
        let r = self.rank;
        let mut w: CMat = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                w[(i, j)] = self.entries[i * self.rank + j].eval(z);
            }
        }
        hermitize(&w)
    }
}

/// Total r×r metric on E⊗L^p at a chart point.
#[derive(Clone, Debug)]
pub enum BundleMetric {
    /// Fiber metric times the round L^p weight.
    Product { fiber: FiberMetric, level: usize },
    /// Block-diagonal Fubini-Study weights diag(1/Kᵢ) from a block-diagonal
    /// inner product.
    BlockKernels {
        kernels: Vec<crate::hermpoly::BidegreePoly>,
    },
    /// Full Fubini-Study metric (V q⁻¹ V†)⁻¹ of a general inner product.
    FromProduct {
        qinv: CMat,
        spec: BundleSpec,
        level: usize,
    },
}

impl BundleMetric {
    pub fn is_block_diagonal(&self) -> bool {
        match self {
            BundleMetric::Product { fiber, .. } => fiber.is_diagonal(),
            BundleMetric::BlockKernels { .. } => true,
            BundleMetric::FromProduct { .. } => false,
        }
    }

    /// Polynomial exactness budget (bidegree, weight power) against the
    /// round kernel, when available.
    pub fn exact_extra(&self) -> Option<(usize, usize)> {
        match self {
            BundleMetric::Product { fiber, level } => {
                let mut d = 0usize;
                let mut m = 0usize;
                for e in &fiber.entries {
                    let (d1, d2) = e.numerator().degrees();
                    d = d.max(d1.max(d2));
                    m = m.max(e.weight_power());
                }
                Some((d, m + level))
            }
            _ => None,
        }
    }

    pub fn total_value_at(&self, z: C64, spec: &BundleSpec, p: usize) -> Result<CMat> {
        match self {
            BundleMetric::Product { fiber, level } => {
                let wp = (1.0 + z.norm_sqr()).powi(-(*level as i32));
                Ok(fiber.value_at(z).mapv(|c| c * wp))
            }
            BundleMetric::BlockKernels { kernels } => {
                let r = kernels.len();
                let mut w: CMat = Array2::zeros((r, r));
                for (i, k) in kernels.iter().enumerate() {
                    let kv = k.eval(z).re;
                    if kv <= 0.0 {
                        return Err(Error::DensityNotPositive { at: z, value: kv });
                    }
                    w[(i, i)] = C64::new(1.0 / kv, 0.0);
                }
                Ok(w)
            }
            BundleMetric::FromProduct { qinv, .. } => {
                let v = evaluation_matrix(spec, p, z)?;
                let vd = v.t().mapv(|c| c.conj());
                let core = v.dot(qinv).dot(&vd);
                invert_small_pd(&hermitize(&core), z)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            BundleMetric::Product { level, .. } => format!("product-fiber(p={level})"),
            BundleMetric::BlockKernels { .. } => "block-fs-weights".to_string(),
            BundleMetric::FromProduct { level, .. } => format!("grassmann-fs(p={level})"),
        }
    }
}

fn invert_small_pd(m: &CMat, at: C64) -> Result<CMat> {
    let (w, v) = eigh_c(m)?;
    let r = m.nrows();
    let mut out: CMat = Array2::zeros((r, r));
    for k in 0..r {
        if w[k] <= 0.0 {
            return Err(Error::EvaluationNotSurjective { at });
        }
        for i in 0..r {
            for j in 0..r {
                out[(i, j)] += v[(i, k)] * v[(j, k)].conj() / w[k];
            }
        }
    }
    Ok(out)
}

/// Hermitian PD square root and inverse square root of a small matrix.
pub(crate) fn sqrt_small_pd(m: &CMat, at: C64) -> Result<(CMat, CMat)> {
    let (w, v) = eigh_c(m)?;
    let r = m.nrows();
    let mut sq: CMat = Array2::zeros((r, r));
    let mut isq: CMat = Array2::zeros((r, r));
    for k in 0..r {
        if w[k] <= 0.0 {
            return Err(Error::EvaluationNotSurjective { at });
        }
        let sr = w[k].sqrt();
        for i in 0..r {
            for j in 0..r {
                let outer = v[(i, k)] * v[(j, k)].conj();
                sq[(i, j)] += outer * sr;
                isq[(i, j)] += outer / sr;
            }
        }
    }
    Ok((sq, isq))
}

/// r×N chart evaluation matrix: row i carries the monomials of block i.
pub fn evaluation_matrix(spec: &BundleSpec, p: usize, z: C64) -> Result<CMat> {
    let dims = spec.block_dims(p)?;
    let offs = spec.block_offsets(p)?;
    let n: usize = dims.iter().sum();
    let mut v: CMat = Array2::zeros((spec.rank(), n));
    for (i, &ni) in dims.iter().enumerate() {
        let mono = monomial_vec(z, ni);
        for a in 0..ni {
            v[(i, offs[i] + a)] = mono[a];
        }
    }
    Ok(v)
}

/// Quantization context for a split bundle at level p.
#[derive(Clone, Debug)]
pub struct BundleSetup {
    spec: BundleSpec,
    p: usize,
    metric: BundleMetric,
    measure: Measure,
    rule: QuadratureRule,
    gram: ProdMatrix,
    chol: CMat,
}

impl BundleSetup {
    /// Block-diagonal round fiber metric, round Liouville measure.
    pub fn round(spec: BundleSpec, p: usize) -> Result<Self> {
        let fiber = FiberMetric::block_round(spec.degrees());
        Self::new(
            spec,
            p,
            BundleMetric::Product { fiber, level: p },
            Measure::RoundLiouville,
        )
    }

    pub fn new(
        spec: BundleSpec,
        p: usize,
        metric: BundleMetric,
        measure: Measure,
    ) -> Result<Self> {
        spec.dim_h(p)?;
        let rule = bundle_rule(&spec, p, &metric, &measure, 0, 0)?;
        let exact = metric.exact_extra().is_some() && measure.exact_extra().is_some();
        let gram_m = if exact {
            assemble_bundle_gram(&rule, &spec, p, &metric, &measure)?
        } else {
            refine_matrix(&rule, |r| {
                assemble_bundle_gram(r, &spec, p, &metric, &measure)
            })?
        };
        let gram = ProdMatrix::new(gram_m, "bundle Gram matrix")?;
        let chol = cholesky_lower(gram.matrix(), "bundle Gram matrix")?;
        Ok(Self {
            spec,
            p,
            metric,
            measure,
            rule,
            gram,
            chol,
        })
    }

    pub fn spec(&self) -> &BundleSpec {
        &self.spec
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rank(&self) -> usize {
        self.spec.rank()
    }

    pub fn dim(&self) -> usize {
        self.gram.dim()
    }

    pub fn metric(&self) -> &BundleMetric {
        &self.metric
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn is_exact(&self) -> bool {
        self.metric.exact_extra().is_some() && self.measure.exact_extra().is_some()
    }

    pub fn describe(&self) -> String {
        format!(
            "bundle degrees={:?} p={} metric={} measure={}",
            self.spec.degrees(),
            self.p,
            self.metric.describe(),
            self.measure.describe()
        )
    }

    pub fn rule_for(&self, extra_d: usize, extra_m: usize) -> Result<QuadratureRule> {
        bundle_rule(
            &self.spec,
            self.p,
            &self.metric,
            &self.measure,
            extra_d,
            extra_m,
        )
    }

    /// Orthonormal-frame evaluation Ṽ(z) = W_tot^{1/2}(z)·V(z)·L⁻†, the r×N
    /// matrix whose rows evaluate the orthonormal sections in a unitary
    /// frame of the fiber.
    pub fn frame_on(&self, z: C64) -> Result<CMat> {
        let w = self.metric.total_value_at(z, &self.spec, self.p)?;
        let (wh, _) = sqrt_small_pd(&w, z)?;
        let v = evaluation_matrix(&self.spec, self.p, z)?;
        let b = wh.dot(&v);
        // Ṽ = B L⁻† via L Y = B†, Ṽ = Y†.
        let y = solve_lower(&self.chol, &b.t().mapv(|c| c.conj()))?;
        Ok(y.t().mapv(|c| c.conj()))
    }

    pub(crate) fn gram_matrix(&self) -> &ProdMatrix {
        &self.gram
    }

    pub(crate) fn chol(&self) -> &CMat {
        &self.chol
    }
}

fn bundle_rule(
    spec: &BundleSpec,
    p: usize,
    metric: &BundleMetric,
    measure: &Measure,
    extra_d: usize,
    extra_m: usize,
) -> Result<QuadratureRule> {
    let max_block = spec
        .degrees()
        .iter()
        .map(|&a| (p as i64 + a).max(0) as usize)
        .max()
        .unwrap_or(p);
    let (met_d, met_m) = metric.exact_extra().unwrap_or((0, max_block));
    let (meas_d, meas_m) = measure.exact_extra().unwrap_or((0, 2));
    let d = max_block + met_d + meas_d + extra_d;
    let m = (met_m + meas_m + extra_m).max(d + 2);
    QuadratureRule::new(m, d)
}

fn assemble_bundle_gram(
    rule: &QuadratureRule,
    spec: &BundleSpec,
    p: usize,
    metric: &BundleMetric,
    measure: &Measure,
) -> Result<CMat> {
    let n = spec.dim_h(p)?;
    let r = spec.rank();
    let m = rule.len();
    let mut x: CMat = Array2::zeros((m * r, n));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let wt = metric.total_value_at(z, spec, p)?;
        let (wh, _) = sqrt_small_pd(&wt, z)?;
        let v = evaluation_matrix(spec, p, z)?;
        let b = wh.dot(&v);
        let scale = (w * measure.density_at(z)?).sqrt();
        for k in 0..r {
            for j in 0..n {
                x[(i * r + k, j)] = b[(k, j)] * scale;
            }
        }
    }
    let xdag = x.t().mapv(|c| c.conj());
    Ok(xdag.dot(&x))
}

/// Monomial-basis bundle Gram matrix.
pub fn bundle_gram(setup: &BundleSetup) -> ProdMatrix {
    setup.gram_matrix().clone()
}

/// Hilbert map: (dim H_p / (Vol·rk E)) · Gram.
pub fn bundle_hilb(setup: &BundleSetup) -> Result<ProdMatrix> {
    let vol = measure_mass(setup.measure())?;
    let scale = setup.dim() as f64 / (vol * setup.rank() as f64);
    Ok(setup.gram_matrix().scale(scale))
}

/// Fubini-Study metric of an inner product on the bundle section space:
/// W_q(z) = (V(z) q⁻¹ V(z)†)⁻¹. Block-diagonal products produce the
/// block-kernel representation, general products the dense one.
pub fn bundle_fs(q: &ProdMatrix, spec: &BundleSpec, p: usize) -> Result<BundleMetric> {
    let n = spec.dim_h(p)?;
    if q.dim() != n {
        return Err(Error::Dimension {
            expected: n,
            got: q.dim(),
        });
    }
    let qinv = q.inverse()?;
    let offs = spec.block_offsets(p)?;
    let r = spec.rank();
    let norm: f64 = qinv.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut block_diag = true;
    'outer: for i in 0..r {
        for j in 0..r {
            if i == j {
                continue;
            }
            let blk = qinv.slice(s![offs[i]..offs[i + 1], offs[j]..offs[j + 1]]);
            if blk.iter().any(|c| c.norm() > 1e-12 * norm) {
                block_diag = false;
                break 'outer;
            }
        }
    }
    if block_diag {
        let mut kernels = Vec::with_capacity(r);
        for i in 0..r {
            let blk = qinv
                .slice(s![offs[i]..offs[i + 1], offs[i]..offs[i + 1]])
                .to_owned();
            kernels.push(crate::geometry::kernel_poly_from_inverse(&blk));
        }
        Ok(BundleMetric::BlockKernels { kernels })
    } else {
        Ok(BundleMetric::FromProduct {
            qinv,
            spec: spec.clone(),
            level: p,
        })
    }
}

/// Endomorphism-valued symbol: r×r matrix of frame functions, Hermitian as
/// an endomorphism w.r.t. the fiber metric.
#[derive(Clone, Debug)]
pub struct EndoSymbol {
    rank: usize,
    entries: Vec<FrameFunction>, // row-major
}

impl EndoSymbol {
    pub fn from_entries(entries: Vec<Vec<FrameFunction>>) -> Self {
        let rank = entries.len();
        let flat: Vec<FrameFunction> = entries.into_iter().flatten().collect();
        assert_eq!(flat.len(), rank * rank);
        Self {
            rank,
            entries: flat,
        }
    }

    pub fn diagonal(fs: Vec<FrameFunction>) -> Self {
        let r = fs.len();
        let zero = FrameFunction::constant(0.0);
        let mut entries = vec![zero; r * r];
        for (i, f) in fs.into_iter().enumerate() {
            entries[i * r + i] = f;
        }
        Self { rank: r, entries }
    }

    pub fn identity(r: usize) -> Self {
        Self::diagonal(vec![FrameFunction::constant(1.0); r])
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entry(&self, i: usize, j: usize) -> &FrameFunction {
        &self.entries[i * self.rank + j]
    }

    pub fn value_at(&self, z: C64) -> CMat {
        let r = self.rank;
        let mut f: CMat = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                f[(i, j)] = self.entries[i * r + j].eval(z);
            }
        }
        f
    }

    /// Entrywise ∂_z.
    pub fn d_z_at(&self, z: C64) -> CMat {
        let r = self.rank;
        let mut f: CMat = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                f[(i, j)] = self.entries[i * r + j].d_z().eval(z);
            }
        }
        f
    }

    /// Entrywise ∂_z̄.
    pub fn d_zbar_at(&self, z: C64) -> CMat {
        let r = self.rank;
        let mut f: CMat = Array2::zeros((r, r));
        for i in 0..r {
            for j in 0..r {
                f[(i, j)] = self.entries[i * r + j].d_zbar().eval(z);
            }
        }
        f
    }

    pub fn degree_budget(&self) -> (usize, usize) {
        let mut d = 0usize;
        let mut m = 0usize;
        for e in &self.entries {
            let (d1, d2) = e.numerator().degrees();
            d = d.max(d1.max(d2));
            m = m.max(e.weight_power());
        }
        (d, m)
    }
}

fn check_frame_hermitian(setup: &BundleSetup, f: &EndoSymbol) -> Result<()> {
    let probes = [
        C64::new(0.31, 0.17),
        C64::new(-0.9, 0.55),
        C64::new(1.7, -1.1),
    ];
    let mut dev = 0.0f64;
    for &z in &probes {
        let w = setup.metric.total_value_at(z, &setup.spec, setup.p)?;
        let wf = w.dot(&f.value_at(z));
        let wf_dag = wf.t().mapv(|c| c.conj());
        let num: f64 = (&wf - &wf_dag)
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let den: f64 = wf.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        dev = dev.max(num / den.max(1e-300));
    }
    if dev > 1e-10 {
        return Err(Error::NonHermitianSymbol { dev });
    }
    Ok(())
}

fn bundle_toeplitz_with_rule<F>(setup: &BundleSetup, rule: &QuadratureRule, f: F) -> Result<CMat>
where
    F: Fn(C64) -> Result<CMat>,
{
    let n = setup.dim();
    let r = setup.rank();
    let m = rule.len();
    let mut x: CMat = Array2::zeros((m * r, n));
    let mut fx: CMat = Array2::zeros((m * r, n));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let wt = setup.metric.total_value_at(z, &setup.spec, setup.p)?;
        let (wh, whinv) = sqrt_small_pd(&wt, z)?;
        let v = evaluation_matrix(&setup.spec, setup.p, z)?;
        let b = wh.dot(&v);
        // unitary-frame symbol matrix F̃ = W^{1/2} F W^{-1/2}
        let ft = wh.dot(&f(z)?).dot(&whinv);
        let fb = ft.dot(&b);
        let scale = (w * setup.measure().density_at(z)?).sqrt();
        for k in 0..r {
            for j in 0..n {
                x[(i * r + k, j)] = b[(k, j)] * scale;
                fx[(i * r + k, j)] = fb[(k, j)] * scale;
            }
        }
    }
    let t = x.t().mapv(|c| c.conj()).dot(&fx);
    crate::linalg::to_on_frame(setup.chol(), &t)
}

/// Toeplitz quantization of a pointwise endomorphism (frame matrix valued);
/// `extra` is the (bidegree, weight-power) budget for rule sizing.
pub fn bundle_toeplitz_pointwise<F>(
    setup: &BundleSetup,
    f: F,
    extra: (usize, usize),
) -> Result<HermOp>
where
    F: Fn(C64) -> Result<CMat> + Copy,
{
    let rule = setup.rule_for(extra.0, extra.1)?;
    let m = if setup.is_exact() {
        bundle_toeplitz_with_rule(setup, &rule, f)?
    } else {
        refine_matrix(&rule, |r| bundle_toeplitz_with_rule(setup, r, f))?
    };
    Ok(HermOp::new(m))
}

/// Pointwise Toeplitz assembly against a caller-supplied rule. Used where
/// two assembly routes must share the exact same node set.
pub fn bundle_toeplitz_on_rule<F>(
    setup: &BundleSetup,
    rule: &QuadratureRule,
    f: F,
) -> Result<HermOp>
where
    F: Fn(C64) -> Result<CMat>,
{
    Ok(HermOp::new(bundle_toeplitz_with_rule(setup, rule, f)?))
}

/// Berezin-Toeplitz quantization of an endomorphism symbol.
pub fn bundle_toeplitz(setup: &BundleSetup, f: &EndoSymbol) -> Result<HermOp> {
    if f.rank() != setup.rank() {
        return Err(Error::Dimension {
            expected: setup.rank(),
            got: f.rank(),
        });
    }
    check_frame_hermitian(setup, f)?;
    let (d, m) = f.degree_budget();
    bundle_toeplitz_pointwise(setup, |z| Ok(f.value_at(z)), (d, m))
}

/// Rawnsley section ρ_{E_p}(z) = Ṽ(z)Ṽ(z)† in the unitary fiber frame.
pub fn bundle_rawnsley(setup: &BundleSetup, z: C64) -> Result<CMat> {
    let vt = setup.frame_on(z)?;
    let vd = vt.t().mapv(|c| c.conj());
    Ok(vt.dot(&vd))
}

/// Berezin symbol T*(A)(z) = ρ(z)⁻¹·(Ṽ A Ṽ†) in the unitary fiber frame.
pub fn bundle_berezin_symbol(setup: &BundleSetup, a: &HermOp, z: C64) -> Result<CMat> {
    let vt = setup.frame_on(z)?;
    let vd = vt.t().mapv(|c| c.conj());
    let rho = vt.dot(&vd);
    let rho_inv = invert_small_pd(&rho, z)?;
    Ok(rho_inv.dot(&vt.dot(a.matrix()).dot(&vd)))
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Berezin super-operator eigenvalues for block-diagonal metrics: the
/// Hom(H_i, H_j) sectors of End(H_p) are invariant, so each sector is
/// assembled and solved separately.
fn berezin_eigs_split(setup: &BundleSetup, rule: &QuadratureRule) -> Result<Vec<f64>> {
    let r = setup.rank();
    let dims = setup.spec.block_dims(setup.p)?;
    let offs = setup.spec.block_offsets(setup.p)?;
    let m = rule.len();

    // per-node per-block orthonormal evaluations, block densities, weights
    let mut blocks: Vec<CMat> = dims.iter().map(|&ni| Array2::zeros((m, ni))).collect();
    let mut rho_diag: Vec<Vec<f64>> = vec![vec![0.0; r]; m];
    let mut wts = vec![0.0; m];
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let vt = setup.frame_on(z)?;
        wts[i] = w * setup.measure().density_at(z)?;
        for bi in 0..r {
            let mut nrm = 0.0;
            for a in 0..dims[bi] {
                let val = vt[(bi, offs[bi] + a)];
                blocks[bi][(i, a)] = val;
                nrm += val.norm_sqr();
            }
            rho_diag[i][bi] = nrm;
        }
    }

    let mut eigs = Vec::with_capacity(setup.dim() * setup.dim());
    for bi in 0..r {
        for bj in 0..r {
            let (ni, nj) = (dims[bi], dims[bj]);
            let mut y: CMat = Array2::zeros((m, ni * nj));
            for row in 0..m {
                let scale = (wts[row] / rho_diag[row][bi]).sqrt();
                for a in 0..ni {
                    let va = blocks[bi][(row, a)] * scale;
                    for b in 0..nj {
                        y[(row, a * nj + b)] = va * blocks[bj][(row, b)].conj();
                    }
                }
            }
            let c = y.t().mapv(|x| x.conj()).dot(&y);
            eigs.extend(eigvalsh_c(&c)?.iter());
        }
    }
    Ok(sorted_desc(eigs))
}

/// Dense Berezin super-operator for general metrics: the N²×N² Hermitian
/// matrix of C(A) = ∫ Q A R dν with Q = Ṽ†ρ⁻¹Ṽ and R = Ṽ†Ṽ, in row-major
/// matrix-unit coordinates.
fn berezin_dense_matrix(setup: &BundleSetup, rule: &QuadratureRule) -> Result<CMat> {
    let n = setup.dim();
    let r = setup.rank();
    let nb = n * n;
    let m = rule.len();
    let mut y: CMat = Array2::zeros((m * r * r, nb));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let vt = setup.frame_on(z)?;
        let vd = vt.t().mapv(|c| c.conj());
        let rho = vt.dot(&vd);
        let (_, rho_isqrt) = sqrt_small_pd(&rho, z)?;
        let ut = rho_isqrt.dot(&vt);
        let scale = (w * setup.measure().density_at(z)?).sqrt();
        for bi in 0..r {
            for bj in 0..r {
                let row = (i * r + bi) * r + bj;
                for a in 0..n {
                    let ua = ut[(bi, a)] * scale;
                    for b in 0..n {
                        y[(row, a * n + b)] = ua * vt[(bj, b)].conj();
                    }
                }
            }
        }
    }
    Ok(y.t().mapv(|c| c.conj()).dot(&y))
}

/// Eigenvalues of the bundle Berezin transform, decreasing.
pub fn bundle_berezin_eigs(setup: &BundleSetup) -> Result<Vec<f64>> {
    let max_block = setup
        .spec
        .degrees()
        .iter()
        .map(|&a| (setup.p as i64 + a).max(0) as usize)
        .max()
        .unwrap_or(setup.p);
    let rule = setup.rule_for(max_block, max_block)?;
    if setup.metric.is_block_diagonal() {
        if setup.is_exact() {
            berezin_eigs_split(setup, &rule)
        } else {
            refine_eigs(setup, &rule, berezin_eigs_split)
        }
    } else {
        let c = if setup.is_exact() {
            berezin_dense_matrix(setup, &rule)?
        } else {
            refine_matrix(&rule, |r| berezin_dense_matrix(setup, r))?
        };
        Ok(sorted_desc(eigvalsh_c(&c)?.to_vec()))
    }
}

fn refine_eigs<F>(setup: &BundleSetup, base: &QuadratureRule, build: F) -> Result<Vec<f64>>
where
    F: Fn(&BundleSetup, &QuadratureRule) -> Result<Vec<f64>>,
{
    let mut rule = base.clone();
    let mut cur = build(setup, &rule)?;
    let mut rel = f64::INFINITY;
    for _ in 0..crate::quantization::REFINE_CAP {
        let finer = rule.refine();
        let next = build(setup, &finer)?;
        let num: f64 = cur
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel = num / den.max(1e-300);
        cur = next;
        rule = finer;
        if rel <= crate::quantization::REFINE_RTOL {
            return Ok(cur);
        }
    }
    Err(Error::RefinementStalled {
        doublings: crate::quantization::REFINE_CAP,
        achieved: rel,
        target: crate::quantization::REFINE_RTOL,
    })
}

/// Clustered spectrum report of the bundle Berezin transform.
pub fn bundle_berezin_spectrum(setup: &BundleSetup) -> Result<SpectrumReport> {
    let eigs = bundle_berezin_eigs(setup)?;
    let mut rep = SpectrumReport::from_sorted(setup.p(), &eigs, CLUSTER_REL_TOL, setup.describe());
    rep.bundle = Some(BundleInfo {
        bundle_degrees: setup.spec.degrees().to_vec(),
        oracle_units: "casimir|main".to_string(),
        kappa: KAPPA,
    });
    Ok(rep)
}

/// One distinct level of the Laplacian spectrum on End(ℂ⊕O(k)), reported in
/// Casimir units and in the volume-one units (λ = κ·casimir).
#[derive(Clone, Debug, serde::Serialize)]
pub struct KodairaLevel {
    pub casimir: f64,
    pub lambda: f64,
    pub multiplicity: usize,
}

/// First `count` distinct eigenvalue levels of the Laplacian on End(ℂ⊕O(k))
/// with multiplicities, merged as 2S₀ ∪ S_k ∪ S₋ₖ where, over even p,
/// S₀ carries p(p+2)/2 with multiplicity p+1, S_k carries (2pk+p(p+2))/2
/// with multiplicity k+p+1, and S₋ₖ carries ((2p+4)k+p(p+2))/2 with
/// multiplicity k+p+1.
pub fn kodaira_spectrum_oracle(k: usize, count: usize) -> Vec<KodairaLevel> {
    use std::collections::BTreeMap;
    let mut levels: BTreeMap<u64, usize> = BTreeMap::new();
    let pmax = 2 * (count as u64 + k as u64 + 4);
    let mut pe = 0u64;
    while pe <= pmax {
        let ku = k as u64;
        let s0 = pe * (pe + 2) / 2;
        *levels.entry(s0).or_insert(0) += 2 * (pe + 1) as usize;
        let sk = (2 * pe * ku + pe * (pe + 2)) / 2;
        *levels.entry(sk).or_insert(0) += (ku + pe + 1) as usize;
        let smk = ((2 * pe + 4) * ku + pe * (pe + 2)) / 2;
        *levels.entry(smk).or_insert(0) += (ku + pe + 1) as usize;
        pe += 2;
    }
    levels
        .into_iter()
        .take(count)
        .map(|(c, m)| KodairaLevel {
            casimir: c as f64,
            lambda: KAPPA * c as f64,
            multiplicity: m,
        })
        .collect()
}

/// Result of matching a computed Berezin spectrum against oracle levels.
#[derive(Clone, Debug)]
pub struct LevelMatch {
    pub lambda: f64,
    pub casimir: f64,
    pub expected: usize,
    pub found: usize,
    /// max |4πp(1-γ) - λ| over the members aggregated into this level
    pub max_dev_lambda: f64,
}

/// Order-preserving aggregation of a computed spectrum against the first
/// oracle levels: exactly-degenerate computed clusters are consumed in
/// decreasing-γ order until each oracle multiplicity is filled. Finite-p
/// effects split oracle-degenerate levels but preserve the ordering between
/// distinct levels, so the multiplicity sequence matches exactly iff cluster
/// boundaries align with the oracle counts.
pub fn match_oracle_levels(
    report: &SpectrumReport,
    oracle: &[KodairaLevel],
    nlevels: usize,
) -> Vec<LevelMatch> {
    let p = report.p as f64;
    let mut out = Vec::with_capacity(nlevels);
    let mut idx = 0usize;
    for lev in oracle.iter().take(nlevels) {
        let mut acc = 0usize;
        let mut dev = 0.0f64;
        while acc < lev.multiplicity && idx < report.eigenvalues.len() {
            let gamma = report.eigenvalues[idx];
            let mult = report.multiplicities[idx];
            let s = 4.0 * std::f64::consts::PI * p * (1.0 - gamma);
            dev = dev.max((s - lev.lambda).abs());
            acc += mult;
            idx += 1;
        }
        out.push(LevelMatch {
            lambda: lev.lambda,
            casimir: lev.casimir,
            expected: lev.multiplicity,
            found: acc,
            max_dev_lambda: dev,
        });
    }
    out
}

/// Structure coefficient C(F,G)(z): the first-order commutator correction of
/// the bundle quantization, contracted with the round base metric. Reduces
/// to the Poisson bracket for scalar symbols.
pub fn structure_coefficient(
    setup: &BundleSetup,
    f: &EndoSymbol,
    g: &EndoSymbol,
    z: C64,
) -> Result<CMat> {
    let fiber = match setup.metric() {
        BundleMetric::Product { fiber, .. } => fiber,
        _ => {
            return Err(Error::Lapack(
                "structure coefficient needs a product fiber metric".to_string(),
            ))
        }
    };
    let r = setup.rank();
    let w = fiber.value_at(z);
    let winv = invert_small_pd(&w, z)?;
    // Chern connection form θ = W⁻¹∂W; ∂^{End}F = ∂F + [θ, F].
    let mut dw: CMat = Array2::zeros((r, r));
    for i in 0..r {
        for j in 0..r {
            dw[(i, j)] = fiber.entry(i, j).d_z().eval(z);
        }
    }
    let theta = winv.dot(&dw);
    let del = |sym: &EndoSymbol| -> CMat {
        let fz = sym.d_z_at(z);
        let fv = sym.value_at(z);
        &fz + &(theta.dot(&fv) - fv.dot(&theta))
    };
    let df = del(f);
    let dg = del(g);
    let dbf = f.d_zbar_at(z);
    let dbg = g.d_zbar_at(z);
    let sigma = round_density(z);
    // (2κ_P/σ)·(1/2i)·[∂F·∂̄G - ∂G·∂̄F]
    let comm = df.dot(&dbg) - dg.dot(&dbf);
    let half_i_inv = C64::new(0.0, -0.5);
    Ok(comm.mapv(|c| c * half_i_inv * (2.0 * KAPPA_P / sigma)))
}

/// Residual of the degree-1 cocycle identity for C(·,·) on a symbol triple
/// at a point. For pointwise-commuting triples the C-of-bracket terms are
/// identically zero and the identity reduces to
/// [C(F,G),H] + [C(H,F),G] + [C(G,H),F] = 0.
pub fn cocycle_residual(
    setup: &BundleSetup,
    f: &EndoSymbol,
    g: &EndoSymbol,
    h: &EndoSymbol,
    z: C64,
) -> Result<f64> {
    let comm = |a: &CMat, b: &CMat| a.dot(b) - b.dot(a);
    let fv = f.value_at(z);
    let gv = g.value_at(z);
    let hv = h.value_at(z);
    let cfg = structure_coefficient(setup, f, g, z)?;
    let chf = structure_coefficient(setup, h, f, z)?;
    let cgh = structure_coefficient(setup, g, h, z)?;
    let total = comm(&cfg, &hv) + comm(&chf, &gv) + comm(&cgh, &fv);
    Ok(total.iter().map(|c| c.norm()).fold(0.0, f64::max))
}
