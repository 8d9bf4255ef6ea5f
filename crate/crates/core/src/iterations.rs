//! Donaldson's balanced-metric dynamics: the Hilb∘FS fixed-point iteration
//! in its fixed-measure and canonical (metric's own Liouville measure)
//! variants, gauge normalization, analytic and finite-difference Jacobians
//! at fixed points, contraction-rate extraction, and the moment-map
//! identities tying the two.
//!
//! Products live in the monomial basis; Jacobians and moment maps are
//! expressed in the orthonormal coordinates of the fixed point q̂ = LL†,
//! where a Hermitian direction A corresponds to the curve L e^{tA} L†.

use crate::bundles::{
    bundle_berezin_eigs, bundle_fs, bundle_rawnsley, BundleSetup, BundleSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{Measure, QuadratureRule};
use crate::linalg::{
    cholesky_lower, eigh_r, exp_herm, herm_basis, herm_coords, herm_from_coords, hermitize,
    prod_distance, solve_lower, solve_lower_vec, to_on_frame,
};
use crate::quantization::{
    berezin_operator, fs, measure_mass, rawnsley, QuantumSetup, REFINE_CAP, REFINE_RTOL,
};
use crate::quantization::{HermOp, ProdMatrix};
use crate::{C64, CMat, CVec, RMat};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use std::f64::consts::PI;

/// Which dynamical system to iterate.
#[derive(Clone, Debug)]
pub enum IterationVariant {
    /// Hilb∘FS against a fixed measure.
    NuBalanced(Measure),
    /// Hilb∘FS against the Liouville measure of FS(q) itself.
    Canonical,
}

/// Scale normalization applied after every step, removing the exact scaling
/// neutral direction from the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaugeNormalization {
    /// tr(q) = dim H_p.
    Trace,
    /// det(q) = det of the blockwise round balanced product.
    Det,
}

#[derive(Clone, Debug)]
pub struct IterationConfig {
    pub variant: IterationVariant,
    pub p: usize,
    pub bundle: BundleSpec,
    pub tol_fixed: f64,
    pub max_iters: usize,
    pub gauge: GaugeNormalization,
}

impl IterationConfig {
    pub fn nu_balanced(p: usize, bundle: BundleSpec) -> Self {
        Self {
            variant: IterationVariant::NuBalanced(Measure::RoundLiouville),
            p,
            bundle,
            tol_fixed: 1e-11,
            max_iters: 10_000,
            gauge: GaugeNormalization::Trace,
        }
    }

    pub fn canonical(p: usize) -> Self {
        Self {
            variant: IterationVariant::Canonical,
            p,
            bundle: BundleSpec::line(),
            tol_fixed: 1e-11,
            max_iters: 10_000,
            gauge: GaugeNormalization::Trace,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.variant, IterationVariant::Canonical) && self.bundle.rank() != 1 {
            return Err(Error::CanonicalRankOne {
                rank: self.bundle.rank(),
            });
        }
        self.bundle.dim_h(self.p)?;
        Ok(())
    }

    pub fn dim(&self) -> Result<usize> {
        self.bundle.dim_h(self.p)
    }

    pub fn rank(&self) -> usize {
        self.bundle.rank()
    }

    fn is_scalar(&self) -> bool {
        self.bundle.rank() == 1 && self.bundle.degrees()[0] == 0
    }
}

/// The blockwise round balanced product diag(1/C(p+aᵢ, j)) per block.
pub fn blockwise_balanced(cfg: &IterationConfig) -> Result<ProdMatrix> {
    let dims = cfg.bundle.block_dims(cfg.p)?;
    let n: usize = dims.iter().sum();
    let mut m: CMat = Array2::zeros((n, n));
    let mut off = 0;
    for &ni in &dims {
        let level = ni - 1;
        let binom = crate::quantization::binomial_row(level);
        for j in 0..ni {
            m[(off + j, off + j)] = C64::new(1.0 / binom[j], 0.0);
        }
        off += ni;
    }
    Ok(ProdMatrix::new(m, "blockwise balanced product")?)
}

/// Seeded random positive product q = LL† + δ·Id with Gaussian L, δ = 1e-3.
pub fn random_product(dim: usize, seed: u64) -> ProdMatrix {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut l: CMat = Array2::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            l[(i, j)] = C64::new(standard_normal(&mut rng), standard_normal(&mut rng));
        }
    }
    let ldag = l.t().mapv(|c| c.conj());
    let mut q = l.dot(&ldag);
    for i in 0..dim {
        q[(i, i)] += C64::new(1e-3, 0.0);
    }
    ProdMatrix::new(q, "random product").expect("LL† + δI is positive definite")
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn canonical_measure(q: &ProdMatrix, p: usize) -> Result<Measure> {
    let qinv = q.inverse()?;
    Ok(Measure::liouville_of_fs_from_inverse(&qinv, p))
}

fn step_measure(q: &ProdMatrix, cfg: &IterationConfig) -> Result<Measure> {
    match &cfg.variant {
        IterationVariant::NuBalanced(m) => Ok(m.clone()),
        IterationVariant::Canonical => canonical_measure(q, cfg.p),
    }
}

/// One un-normalized application of Hilb∘FS.
fn step_core(q: &ProdMatrix, cfg: &IterationConfig) -> Result<ProdMatrix> {
    let measure = step_measure(q, cfg)?;
    let vol = measure_mass(&measure)?;
    let n = cfg.dim()? as f64;
    if cfg.is_scalar() {
        let metric = fs(q, cfg.p)?;
        let setup = QuantumSetup::new(cfg.p, metric, measure)?;
        Ok(crate::quantization::gram(&setup).scale(n / vol))
    } else {
        let metric = bundle_fs(q, &cfg.bundle, cfg.p)?;
        let setup = BundleSetup::new(cfg.bundle.clone(), cfg.p, metric, measure)?;
        Ok(crate::bundles::bundle_gram(&setup).scale(n / (vol * cfg.rank() as f64)))
    }
}

fn gauge_factor(q: &ProdMatrix, cfg: &IterationConfig) -> Result<f64> {
    let n = q.dim();
    match cfg.gauge {
        GaugeNormalization::Trace => {
            let tr: f64 = q.matrix().diag().iter().map(|c| c.re).sum();
            Ok(n as f64 / tr)
        }
        GaugeNormalization::Det => {
            let reference = blockwise_balanced(cfg)?;
            let logdet = |m: &ProdMatrix| -> Result<f64> {
                let l = cholesky_lower(m.matrix(), "gauge determinant")?;
                Ok(2.0 * l.diag().iter().map(|c| c.re.ln()).sum::<f64>())
            };
            let delta = logdet(&reference)? - logdet(q)?;
            Ok((delta / n as f64).exp())
        }
    }
}

/// One Donaldson step q ↦ gauge(Hilb(FS(q), measure(q))).
pub fn donaldson_step(q: &ProdMatrix, cfg: &IterationConfig) -> Result<(ProdMatrix, f64)> {
    cfg.validate()?;
    let raw = step_core(q, cfg)?;
    let c = gauge_factor(&raw, cfg)?;
    Ok((raw.scale(c), c))
}

/// Iteration record: successive distances, gauge factors, rank≥2 block-trace
/// ratios, and the tail-ratio rate estimate.
#[derive(Clone, Debug, serde::Serialize)]
pub struct IterationTrace {
    pub distances: Vec<f64>,
    pub gauge_factors: Vec<f64>,
    pub block_ratios: Vec<f64>,
    pub converged: bool,
    pub rate_estimate: Option<f64>,
    pub rate_spread: Option<f64>,
}

fn block_trace_ratio(q: &ProdMatrix, cfg: &IterationConfig) -> Result<f64> {
    if cfg.rank() < 2 {
        return Ok(1.0);
    }
    let dims = cfg.bundle.block_dims(cfg.p)?;
    let offs = cfg.bundle.block_offsets(cfg.p)?;
    let mut per_block = Vec::with_capacity(dims.len());
    for (i, &ni) in dims.iter().enumerate() {
        let tr: f64 = (0..ni).map(|j| q.matrix()[(offs[i] + j, offs[i] + j)].re).sum();
        per_block.push(tr / ni as f64);
    }
    let max = per_block.iter().cloned().fold(f64::MIN, f64::max);
    let min = per_block.iter().cloned().fold(f64::MAX, f64::min);
    Ok(max / min)
}

/// Divergence guard for unstable bundles: the iteration has no fixed point
/// and the block-trace ratio blows up.
const BLOCK_RATIO_DIVERGENCE: f64 = 1e8;

/// Iterate to a fixed point; non-convergence is reported in the trace, not
/// as an error.
pub fn iterate_to_fixed_point(
    q0: &ProdMatrix,
    cfg: &IterationConfig,
) -> Result<(ProdMatrix, IterationTrace)> {
    cfg.validate()?;
    let mut q = {
        let c = gauge_factor(q0, cfg)?;
        q0.scale(c)
    };
    let mut distances = Vec::new();
    let mut gauge_factors = Vec::new();
    let mut block_ratios = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let (q_next, c) = donaldson_step(&q, cfg)?;
        let d = prod_distance(q.matrix(), q_next.matrix(), "iteration distance")?;
        distances.push(d);
        gauge_factors.push(c);
        let ratio = block_trace_ratio(&q_next, cfg)?;
        block_ratios.push(ratio);
        q = q_next;
        if d < cfg.tol_fixed {
            converged = true;
            break;
        }
        if ratio > BLOCK_RATIO_DIVERGENCE {
            break;
        }
    }
    let (rate_estimate, rate_spread) = estimate_rate(&distances, cfg.tol_fixed);
    Ok((
        q,
        IterationTrace {
            distances,
            gauge_factors,
            block_ratios,
            converged,
            rate_estimate,
            rate_spread,
        },
    ))
}

/// Geometric rate from tail ratios d_{r+1}/d_r, over the last ≤ 20 steps
/// that stay safely above the convergence floor.
fn estimate_rate(distances: &[f64], tol: f64) -> (Option<f64>, Option<f64>) {
    let floor = 50.0 * tol;
    let usable: Vec<f64> = distances.iter().cloned().filter(|&d| d > floor).collect();
    if usable.len() < 5 {
        return (None, None);
    }
    let ratios: Vec<f64> = usable.windows(2).map(|w| w[1] / w[0]).collect();
    let tail: Vec<f64> = ratios.iter().rev().take(20).cloned().collect();
    let mut sorted = tail.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let spread = (sorted[sorted.len() - 1] - sorted[0]) / median;
    (Some(median), Some(spread))
}

/// Rawnsley flatness certificate of FS(q) against the variant's measure:
/// max over nodes of ‖ρ(z) - mean·Id‖ / mean.
pub fn rawnsley_flatness(q: &ProdMatrix, cfg: &IterationConfig) -> Result<f64> {
    cfg.validate()?;
    let measure = step_measure(q, cfg)?;
    if cfg.is_scalar() {
        let setup = QuantumSetup::new(cfg.p, fs(q, cfg.p)?, measure)?;
        let rule = setup.rule_for(2, 2)?;
        let mut vals = Vec::with_capacity(rule.len());
        for &z in rule.nodes() {
            vals.push(rawnsley(&setup, z)?);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let dev = vals
            .iter()
            .map(|v| (v - mean).abs())
            .fold(0.0f64, f64::max);
        Ok(dev / mean)
    } else {
        let metric = bundle_fs(q, &cfg.bundle, cfg.p)?;
        let setup = BundleSetup::new(cfg.bundle.clone(), cfg.p, metric, measure)?;
        let rule = setup.rule_for(2, 2)?;
        let r = cfg.rank();
        let mut worst: f64 = 0.0;
        let mut means = Vec::with_capacity(rule.len());
        let mut rhos = Vec::with_capacity(rule.len());
        for &z in rule.nodes() {
            let rho = bundle_rawnsley(&setup, z)?;
            let tr: f64 = rho.diag().iter().map(|c| c.re).sum();
            means.push(tr / r as f64);
            rhos.push(rho);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        for rho in &rhos {
            for i in 0..r {
                for j in 0..r {
                    let expect = if i == j {
                        C64::new(mean, 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    };
                    worst = worst.max((rho[(i, j)] - expect).norm());
                }
            }
        }
        Ok(worst / mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

/// Jacobian spectrum report at a fixed point.
#[derive(Clone, Debug, serde::Serialize)]
pub struct JacobianReport {
    /// decreasing eigenvalues of D_q T in the Hermitian coordinates of q
    pub eigenvalues: Vec<f64>,
    /// count of eigenvalues within 1e-8 of 1
    pub neutral_dim: usize,
    /// largest eigenvalue strictly below the neutral cluster
    pub beta: Option<f64>,
}

/// Tolerance for membership in the neutral (eigenvalue-one) cluster.
pub const NEUTRAL_TOL: f64 = 1e-8;

fn report_from_eigs(mut eigs: Vec<f64>) -> JacobianReport {
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let neutral_dim = eigs.iter().filter(|&&e| (e - 1.0).abs() < NEUTRAL_TOL).count();
    let beta = eigs
        .iter()
        .cloned()
        .find(|&e| e < 1.0 - NEUTRAL_TOL);
    JacobianReport {
        eigenvalues: eigs,
        neutral_dim,
        beta,
    }
}

fn ensure_fixed_point(q: &ProdMatrix, cfg: &IterationConfig) -> Result<()> {
    // fixed-point-ness is a gauge-invariant statement: compare in the gauge
    let qg = q.scale(gauge_factor(q, cfg)?);
    let (q_next, _) = donaldson_step(&qg, cfg)?;
    let d = prod_distance(qg.matrix(), q_next.matrix(), "fixed-point check")?;
    if d > 1e-6 {
        return Err(Error::NotAtFixedPoint { dist: d });
    }
    Ok(())
}

/// Finite-difference Jacobian of the un-gauged Donaldson map in the
/// Hermitian orthonormal coordinates of q: central differences with
/// relative step 1e-5, one Richardson halving on a probe direction to
/// confirm second order.
pub fn jacobian_fd_matrix(q: &ProdMatrix, cfg: &IterationConfig) -> Result<RMat> {
    cfg.validate()?;
    let n = q.dim();
    let nb = n * n;
    let l = cholesky_lower(q.matrix(), "jacobian base point")?;
    let basis = herm_basis(n);
    let mut j: RMat = Array2::zeros((nb, nb));
    let eps = 1e-5;
    for (col, b) in basis.iter().enumerate() {
        let column = fd_column(cfg, &l, b, eps)?;
        for (row, v) in column.into_iter().enumerate() {
            j[(row, col)] = v;
        }
    }
    // Richardson check on the first off-diagonal direction: the halved step
    // must agree to second order.
    if nb > n {
        let probe = &basis[n];
        let c1 = fd_column(cfg, &l, probe, eps)?;
        let c2 = fd_column(cfg, &l, probe, eps / 2.0)?;
        let dev = c1
            .iter()
            .zip(c2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if dev > 1e-4 {
            return Err(Error::FiniteDifferenceStep);
        }
    }
    Ok(j)
}

fn fd_column(
    cfg: &IterationConfig,
    l: &CMat,
    b: &CMat,
    eps: f64,
) -> Result<Vec<f64>> {
    let perturbed = |s: f64| -> Result<ProdMatrix> {
        let e = exp_herm(b, s)?;
        let ldag = l.t().mapv(|c| c.conj());
        let m = l.dot(&e).dot(&ldag);
        match ProdMatrix::new(m, "finite-difference perturbation") {
            Ok(p) => Ok(p),
            Err(_) => Err(Error::FiniteDifferenceStep),
        }
    };
    let step_of = |s: f64| -> Result<CMat> {
        let qp = perturbed(s)?;
        let t = step_core(&qp, cfg)?;
        to_on_frame(l, t.matrix())
    };
    let plus = step_of(eps)?;
    let minus = step_of(-eps)?;
    let diff = (&plus - &minus).mapv(|c| c / (2.0 * eps));
    Ok(herm_coords(&hermitize(&diff)))
}

/// Analytic Jacobian eigenvalues at a fixed point.
///
/// Fixed-measure variant: D_qT = T∘T*, whose matrix is the Berezin
/// super-operator of the setup (FS(q), ν). Canonical variant: the Laplacian
/// correction T((1 + Δ_{FS(q)}/4π)·T*(·)) enters, assembled from exact
/// pointwise second derivatives of the Berezin symbols.
pub fn jacobian_analytic_eigs(q: &ProdMatrix, cfg: &IterationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    ensure_fixed_point(q, cfg)?;
    match (&cfg.variant, cfg.is_scalar()) {
        (IterationVariant::NuBalanced(measure), true) => {
            let setup = QuantumSetup::new(cfg.p, fs(q, cfg.p)?, measure.clone())?;
            let c = berezin_operator(&setup)?;
            let (w, _) = eigh_r(&c)?;
            Ok(w.to_vec())
        }
        (IterationVariant::NuBalanced(measure), false) => {
            let metric = bundle_fs(q, &cfg.bundle, cfg.p)?;
            let setup = BundleSetup::new(cfg.bundle.clone(), cfg.p, metric, measure.clone())?;
            bundle_berezin_eigs(&setup)
        }
        (IterationVariant::Canonical, _) => {
            let j = canonical_jacobian_matrix(q, cfg.p)?;
            let (w, _) = eigh_r(&j)?;
            Ok(w.to_vec())
        }
    }
}

/// Jacobian spectrum report at a fixed point.
pub fn jacobian_at(q: &ProdMatrix, cfg: &IterationConfig, mode: JacobianMode) -> Result<JacobianReport> {
    match mode {
        JacobianMode::Analytic => Ok(report_from_eigs(jacobian_analytic_eigs(q, cfg)?)),
        JacobianMode::FiniteDifference => {
            let j = jacobian_fd_matrix(q, cfg)?;
            let (w, _) = eigh_r(&j)?;
            Ok(report_from_eigs(w.to_vec()))
        }
    }
}

/// Contraction rate: the largest Jacobian eigenvalue strictly below the
/// neutral cluster, with the neutral dimension.
pub fn contraction_rate(q: &ProdMatrix, cfg: &IterationConfig) -> Result<(Option<f64>, usize)> {
    let rep = jacobian_at(q, cfg, JacobianMode::Analytic)?;
    Ok((rep.beta, rep.neutral_dim))
}

/// Canonical-variant analytic Jacobian matrix in Hermitian coordinates:
/// columns T((1 + Δ_{FS(q)}/4π)·s_B) over the Hermitian basis, with the
/// Laplacian applied through the exact quotient rule on the Berezin-symbol
/// numerators against the Fubini-Study kernel.
pub fn canonical_jacobian_matrix(q: &ProdMatrix, p: usize) -> Result<RMat> {
    let metric = fs(q, p)?;
    let measure = canonical_measure(q, p)?;
    let setup = QuantumSetup::new(p, metric, measure.clone())?;
    let vol = measure_mass(&measure)?;
    let base = setup.rule_for(3 * p, 3 * p + 2)?;
    let mut rule = base.clone();
    let mut cur = canonical_jacobian_with_rule(&setup, &rule, vol)?;
    for _ in 0..REFINE_CAP {
        let finer = rule.refine();
        let next = canonical_jacobian_with_rule(&setup, &finer, vol)?;
        let num: f64 = (&next - &cur).iter().map(|x| x * x).sum::<f64>().sqrt();
        let den: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        cur = next;
        rule = finer;
        if num / den.max(1e-300) <= REFINE_RTOL {
            return Ok(cur);
        }
    }
    Err(Error::RefinementStalled {
        doublings: REFINE_CAP,
        achieved: f64::NAN,
        target: REFINE_RTOL,
    })
}

fn canonical_jacobian_with_rule(
    setup: &QuantumSetup,
    rule: &QuadratureRule,
    vol: f64,
) -> Result<RMat> {
    let n = setup.dim();
    let nb = n * n;
    let chol = setup_chol(setup)?;
    let m = rule.len();
    // Z rows: herm coordinates of the projector part ξξ†·(w·rule weight);
    // S rows: herm coordinates of the symbol-plus-Laplacian kernel. The
    // measure density σ = K_zz̄/K - K_z K_z̄/K² is folded into the kernel
    // coefficients, so that per Hermitian direction B
    //   (s_B + Δ_{FS(q)}s_B/4π)·σ = a₀N + a_z N_z + a_z̄ N_z̄ + a_zz̄ N_zz̄
    // with N the symbol numerator against the kernel K.
    let mut zr: RMat = Array2::zeros((m, nb));
    let mut sr: RMat = Array2::zeros((m, nb));
    for (i, (&z, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
        let (xi, xi_d) = coherent_pair(&chol, z, n)?;
        let k = inner(&xi, &xi).re;
        let kz = inner(&xi_d, &xi); // K_z = ⟨ξ', ξ⟩
        let kzb = kz.conj();
        let kzzb = inner(&xi_d, &xi_d).re;
        let k2 = k * k;
        let k3 = k2 * k;
        let a0 = 2.0 * kzzb / k2 - 3.0 * (kz * kzb).re / k3;
        let az = kzb / k2;
        let azb = kz / k2;
        let azzb = -1.0 / k;
        let mut s_mat: CMat = Array2::zeros((n, n));
        for a in 0..n {
            for b in 0..n {
                let t0 = xi[a] * xi[b].conj();
                let tz = xi[a] * xi_d[b].conj();
                let tzb = xi_d[a] * xi[b].conj();
                let tzz = xi_d[a] * xi_d[b].conj();
                s_mat[(a, b)] = t0 * a0 + tz * az + tzb * azb + tzz * azzb;
            }
        }
        let s_h = hermitize(&s_mat);
        let scoords = herm_coords(&s_h);
        // projector side: ξξ†·(w/K)·rule weight
        let scale = w / k;
        let mut proj: CMat = Array2::zeros((n, n));
        for a in 0..n {
            for b in 0..n {
                proj[(a, b)] = xi[a] * xi[b].conj() * scale;
            }
        }
        let zcoords = herm_coords(&proj);
        for col in 0..nb {
            zr[(i, col)] = zcoords[col];
            sr[(i, col)] = scoords[col];
        }
    }
    let j = zr.t().dot(&sr);
    Ok(j.mapv(|x| x * (n as f64 / vol)))
}

fn setup_chol(setup: &QuantumSetup) -> Result<CMat> {
    cholesky_lower(crate::quantization::gram(setup).matrix(), "canonical jacobian gram")
}

fn coherent_pair(chol: &CMat, z: C64, n: usize) -> Result<(CVec, CVec)> {
    let mut abar: CVec = Array1::zeros(n);
    let mut abar_d: CVec = Array1::zeros(n);
    let zb = z.conj();
    let mut acc = C64::new(1.0, 0.0);
    for j in 0..n {
        abar[j] = acc;
        if j + 1 < n {
            abar_d[j + 1] = acc * (j as f64 + 1.0);
        }
        acc *= zb;
    }
    let xi = solve_lower_vec(chol, &abar)?;
    let xi_d = solve_lower_vec(chol, &abar_d)?;
    Ok((xi, xi_d))
}

fn inner(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x.conj() * y).sum()
}

/// Moment map for balanced embeddings at the group element G (positive
/// Hermitian, in the orthonormal coordinates of q): the integral of the
/// moving coherent-plane projectors against the variant's measure.
pub fn moment_map(g: &CMat, q: &ProdMatrix, cfg: &IterationConfig) -> Result<HermOp> {
    cfg.validate()?;
    let n = q.dim();
    let l = cholesky_lower(q.matrix(), "moment map base point")?;
    // measure: fixed, or the Liouville measure of FS(q_G) with
    // q_G = L G² L† in the monomial basis.
    let measure = match &cfg.variant {
        IterationVariant::NuBalanced(m) => m.clone(),
        IterationVariant::Canonical => {
            let g2 = g.dot(g);
            let ldag = l.t().mapv(|c| c.conj());
            let qg = ProdMatrix::new(l.dot(&g2).dot(&ldag), "moment measure product")?;
            canonical_measure(&qg, cfg.p)?
        }
    };
    let r = cfg.rank();
    let base = QuadratureRule::new(2 * cfg.p + 6, 2 * cfg.p + 4)?;
    let build = |rule: &QuadratureRule| -> Result<CMat> {
        let mut acc: CMat = Array2::zeros((n, n));
        for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
            let cols = coherent_plane(&l, &cfg.bundle, cfg.p, z)?;
            let m = g.dot(&cols);
            let mdag = m.t().mapv(|c| c.conj());
            let small = mdag.dot(&m);
            let small_inv = invert_small(&hermitize(&small), z)?;
            let proj = m.dot(&small_inv).dot(&mdag);
            let wgt = w * measure.density_at(z)?;
            acc = acc + proj.mapv(|c| c * wgt);
        }
        let _ = r;
        Ok(acc)
    };
    let m = crate::quantization::refine_matrix(&base, build)?;
    Ok(HermOp::new(m))
}

fn invert_small(m: &CMat, at: C64) -> Result<CMat> {
    let (w, v) = crate::linalg::eigh_c(m)?;
    let r = m.nrows();
    if w[0] <= 0.0 {
        return Err(Error::EvaluationNotSurjective { at });
    }
    let mut out: CMat = Array2::zeros((r, r));
    for k in 0..r {
        for i in 0..r {
            for j in 0..r {
                out[(i, j)] += v[(i, k)] * v[(j, k)].conj() / w[k];
            }
        }
    }
    Ok(out)
}

/// Basis of the coherent plane at z in the orthonormal coordinates of q:
/// the N×r matrix of coherent columns (range of the adjoint evaluation).
fn coherent_plane(l: &CMat, bundle: &BundleSpec, p: usize, z: C64) -> Result<CMat> {
    let dims = bundle.block_dims(p)?;
    let offs = bundle.block_offsets(p)?;
    let n: usize = dims.iter().sum();
    let r = bundle.rank();
    let mut e: CMat = Array2::zeros((n, r));
    for (i, &ni) in dims.iter().enumerate() {
        let mono = crate::quantization::monomial_vec(z.conj(), ni);
        for a in 0..ni {
            e[(offs[i] + a, i)] = mono[a];
        }
    }
    solve_lower(l, &e)
}

/// Residual of the moment-map identity at a balanced point:
/// ‖(dim/(Vol·rk))·Dμ(A) - (A - D_qT(A))‖ over seeded Hermitian directions,
/// with Dμ from central differences and D_qT from the analytic Jacobian.
pub fn check_moment_identity(q: &ProdMatrix, cfg: &IterationConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    ensure_fixed_point(q, cfg)?;
    let n = q.dim();
    let measure = step_measure(q, cfg)?;
    let vol = measure_mass(&measure)?;
    let scale = n as f64 / (vol * cfg.rank() as f64);

    // analytic Jacobian as an operator in herm coordinates
    let japply: Box<dyn Fn(&CMat) -> Result<CMat>> = match (&cfg.variant, cfg.is_scalar()) {
        (IterationVariant::NuBalanced(m), true) => {
            let setup = QuantumSetup::new(cfg.p, fs(q, cfg.p)?, m.clone())?;
            let c = berezin_operator(&setup)?;
            Box::new(move |a: &CMat| {
                let x = Array1::from_vec(herm_coords(a));
                let y = c.dot(&x);
                Ok(herm_from_coords(a.nrows(), y.as_slice().unwrap()))
            })
        }
        (IterationVariant::Canonical, _) => {
            let j = canonical_jacobian_matrix(q, cfg.p)?;
            Box::new(move |a: &CMat| {
                let x = Array1::from_vec(herm_coords(a));
                let y = j.dot(&x);
                Ok(herm_from_coords(a.nrows(), y.as_slice().unwrap()))
            })
        }
        (IterationVariant::NuBalanced(m), false) => {
            let metric = bundle_fs(q, &cfg.bundle, cfg.p)?;
            let setup = BundleSetup::new(cfg.bundle.clone(), cfg.p, metric, m.clone())?;
            let rule = setup.rule_for(2, 2)?;
            Box::new(move |a: &CMat| bundle_jacobian_apply(&setup, &rule, a))
        }
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..4 {
        let mut am: CMat = Array2::zeros((n, n));
        for i in 0..n {
            am[(i, i)] = C64::new(rng.gen_range(-1.0..1.0), 0.0);
            for j in (i + 1)..n {
                let v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                am[(i, j)] = v;
                am[(j, i)] = v.conj();
            }
        }
        let norm: f64 = am.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let a = am.mapv(|c| c / norm);
        // tangent direction A corresponds to the group curve e^{tA/2}
        let gplus = exp_herm(&a, eps / 2.0)?;
        let gminus = exp_herm(&a, -eps / 2.0)?;
        let mu_p = moment_map(&gplus, q, cfg)?;
        let mu_m = moment_map(&gminus, q, cfg)?;
        let dmu = (mu_p.matrix() - mu_m.matrix()).mapv(|c| c / (2.0 * eps));
        let ja = japply(&a)?;
        let lhs = dmu.mapv(|c| c * scale);
        let rhs = &a - &ja;
        let dev = (&lhs - &rhs).iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Apply the fixed-measure bundle Jacobian T∘T* to a Hermitian direction by
/// quadrature: A ↦ ∫ Q A R dν.
fn bundle_jacobian_apply(setup: &BundleSetup, rule: &QuadratureRule, a: &CMat) -> Result<CMat> {
    let n = setup.dim();
    let mut acc: CMat = Array2::zeros((n, n));
    for (&z, &w) in rule.nodes().iter().zip(rule.weights()) {
        let vt = setup.frame_on(z)?;
        let vd = vt.t().mapv(|c| c.conj());
        let rho = vt.dot(&vd);
        let rho_inv = invert_small(&rho, z)?;
        let qm = vd.dot(&rho_inv).dot(&vt);
        let rm = vd.dot(&vt);
        let wgt = w * setup.measure().density_at(z)?;
        acc = acc + qm.dot(a).dot(&rm).mapv(|c| c * wgt);
    }
    Ok(hermitize(&acc))
}

/// μ(Id) at the base point: at a balanced product this is (Vol·rk/dim)·Id.
pub fn moment_at_identity(q: &ProdMatrix, cfg: &IterationConfig) -> Result<HermOp> {
    let n = q.dim();
    moment_map(&Array2::eye(n), q, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantization::round_gamma_closed;
    use approx::assert_abs_diff_eq;

    fn round_cfg(p: usize) -> IterationConfig {
        IterationConfig::nu_balanced(p, BundleSpec::line())
    }

    fn gauged(q: &ProdMatrix, cfg: &IterationConfig) -> ProdMatrix {
        q.scale(gauge_factor(q, cfg).unwrap())
    }

    #[test]
    fn round_balanced_is_fixed() {
        for p in [1usize, 4, 7] {
            let cfg = round_cfg(p);
            let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
            let (q1, _) = donaldson_step(&q, &cfg).unwrap();
            let d = prod_distance(q.matrix(), q1.matrix(), "t").unwrap();
            assert!(d <= 1e-10, "p={p}: moved by {d}");
        }
        // canonical variant
        let p = 5;
        let cfg = IterationConfig::canonical(p);
        let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
        let (q1, _) = donaldson_step(&q, &cfg).unwrap();
        let d = prod_distance(q.matrix(), q1.matrix(), "t").unwrap();
        assert!(d <= 1e-9, "canonical moved by {d}");
    }

    #[test]
    fn blockwise_balanced_is_fixed_for_bundles() {
        let cfg = IterationConfig::nu_balanced(3, BundleSpec::new(vec![1, 1]));
        let q = gauged(&blockwise_balanced(&cfg).unwrap(), &cfg);
        let (q1, _) = donaldson_step(&q, &cfg).unwrap();
        let d = prod_distance(q.matrix(), q1.matrix(), "t").unwrap();
        assert!(d <= 1e-10, "bundle fixed point moved by {d}");
    }

    #[test]
    fn p_zero_is_fixed_after_gauge() {
        let cfg = round_cfg(0);
        let q = ProdMatrix::new(Array2::from_elem((1, 1), C64::new(3.7, 0.0)), "t").unwrap();
        let (q1, _) = donaldson_step(&q, &cfg).unwrap();
        assert_abs_diff_eq!(q1.matrix()[(0, 0)].re, 1.0, epsilon = 1e-12);
        let (q2, _) = donaldson_step(&q1, &cfg).unwrap();
        let d = prod_distance(q1.matrix(), q2.matrix(), "t").unwrap();
        assert!(d <= 1e-13);
    }

    #[test]
    fn gauge_equivariance_of_core_step() {
        let cfg = round_cfg(4);
        let q = random_product(5, 3);
        let a = step_core(&q, &cfg).unwrap();
        let b = step_core(&q.scale(2.5), &cfg).unwrap();
        for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
            assert!((y - x * 2.5).norm() <=       1e-12 * x.norm().max(1e-6), "scaling equivariance");
        }
    }

    #[test]
    fn su2_equivariance_of_step() {
        // For g unitary w.r.t. the round structure, the pullback action on
        // products commutes with the step: step(g†qg) = g†·step(q)·g.
        let p = 4;
        let cfg = round_cfg(p);
        let n = p + 1;
        // spin generator in the orthonormal round basis
        let mut jplus: CMat = Array2::zeros((n, n));
        for a in 0..p {
            jplus[(a + 1, a)] = C64::new((((a + 1) * (p - a)) as f64).sqrt(), 0.0);
        }
        let jx = (jplus.clone() + jplus.t().mapv(|c| c.conj())).mapv(|c| c * 0.5);
        // transport to monomial coefficients: x = L†c, so g = L^{-†} U L†
        let qstar = ProdMatrix::round_balanced(p);
        let l = cholesky_lower(qstar.matrix(), "t").unwrap();
        let u_on = crate::linalg::exp_i_herm(&jx, 0.37).unwrap();
        let ldag = l.t().mapv(|c| c.conj());
        let linv = solve_lower(&l, &Array2::eye(n)).unwrap();
        let linv_dag = linv.t().mapv(|c| c.conj());
        let g = linv_dag.dot(&u_on).dot(&ldag);
        let gdag = g.t().mapv(|c| c.conj());

        let q = random_product(n, 9);
        let qg = ProdMatrix::new(gdag.dot(q.matrix()).dot(&g), "t").unwrap();
        let s1 = step_core(&qg, &cfg).unwrap();
        let s0 = step_core(&q, &cfg).unwrap();
        let expected = gdag.dot(s0.matrix()).dot(&g);
        let dev: f64 = (s1.matrix() - &expected)
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-10, "equivariance deviation {dev}");
    }

    #[test]
    fn scalar_iteration_converges_to_round() {
        let p = 6;
        let cfg = round_cfg(p);
        let q0 = random_product(p + 1, 1);
        let (limit, trace) = iterate_to_fixed_point(&q0, &cfg).unwrap();
        assert!(trace.converged);
        // unique up to scale: trace gauge pins it to the round product
        let qstar = {
            let q = ProdMatrix::round_balanced(p);
            let c = gauge_factor(&q, &cfg).unwrap();
            q.scale(c)
        };
        let d = prod_distance(limit.matrix(), qstar.matrix(), "t").unwrap();
        assert!(d <= 1e-8, "distance to round balanced {d}");
        // measured rate near γ₁
        let rate = trace.rate_estimate.unwrap();
        let gamma1 = round_gamma_closed(p, 1);
        assert!((rate - gamma1).abs() / gamma1 <= 0.05, "rate {rate}");
        // certificate
        let flat = rawnsley_flatness(&limit, &cfg).unwrap();
        assert!(flat <= 1e-7, "flatness {flat}");
    }

    #[test]
    fn canonical_iteration_converges() {
        let p = 6;
        let cfg = IterationConfig::canonical(p);
        let q0 = random_product(p + 1, 2);
        let (limit, trace) = iterate_to_fixed_point(&q0, &cfg).unwrap();
        assert!(trace.converged, "did not converge");
        let flat = rawnsley_flatness(&limit, &cfg).unwrap();
        assert!(flat <= 1e-7, "flatness {flat}");
        // rate governed by the canonical closed form
        let rate = trace.rate_estimate.unwrap();
        let pf = p as f64;
        let closed = (pf + 6.0) * (pf - 1.0) / ((pf + 2.0) * (pf + 3.0));
        assert!((rate - closed).abs() / closed <= 0.05, "rate {rate} vs {closed}");
    }

    #[test]
    fn unstable_bundle_diverges_with_flag() {
        let mut cfg = IterationConfig::nu_balanced(5, BundleSpec::new(vec![0, 1]));
        cfg.max_iters = 300;
        let q0 = random_product(cfg.dim().unwrap(), 4);
        let (_limit, trace) = iterate_to_fixed_point(&q0, &cfg).unwrap();
        assert!(!trace.converged, "unstable bundle must not converge");
        let first = trace.block_ratios.first().unwrap();
        let last = trace.block_ratios.last().unwrap();
        assert!(
            last > &(first * 5.0) || *last > 1e6,
            "block ratio should grow: {first} -> {last}"
        );
    }

    #[test]
    fn nu_jacobian_spectrum_is_berezin_spectrum() {
        let p = 4;
        let cfg = round_cfg(p);
        let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
        let rep = jacobian_at(&q, &cfg, JacobianMode::Analytic).unwrap();
        // eigenvalues: γ_k with multiplicity 2k+1
        let mut expect = Vec::new();
        for k in 0..=p {
            for _ in 0..(2 * k + 1) {
                expect.push(round_gamma_closed(p, k));
            }
        }
        expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in rep.eigenvalues.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert_eq!(rep.neutral_dim, 1);
        assert_abs_diff_eq!(rep.beta.unwrap(), round_gamma_closed(p, 1), epsilon = 1e-9);
    }

    #[test]
    fn canonical_jacobian_closed_form() {
        let p = 6;
        let cfg = IterationConfig::canonical(p);
        let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
        let rep = jacobian_at(&q, &cfg, JacobianMode::Analytic).unwrap();
        // neutral: scaling plus the three first-isotypic directions
        assert_eq!(rep.neutral_dim, 4);
        let pf = p as f64;
        let closed = (pf + 6.0) * (pf - 1.0) / ((pf + 2.0) * (pf + 3.0));
        assert_abs_diff_eq!(rep.beta.unwrap(), closed, epsilon = 1e-9);
        // full spectrum: (1 + λ_k/(4πp))·γ_k with multiplicity 2k+1
        let mut expect = Vec::new();
        for k in 0..=p {
            let lam = crate::consts::lambda_k(k);
            let val = (1.0 + lam / (4.0 * PI * pf)) * round_gamma_closed(p, k);
            for _ in 0..(2 * k + 1) {
                expect.push(val);
            }
        }
        expect.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in rep.eigenvalues.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn analytic_vs_fd_jacobian() {
        for p in [4usize] {
            // fixed-measure variant
            let cfg = round_cfg(p);
            let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
            let setup =
                QuantumSetup::new(p, fs(&q, p).unwrap(), Measure::RoundLiouville).unwrap();
            let an = berezin_operator(&setup).unwrap();
            let fd = jacobian_fd_matrix(&q, &cfg).unwrap();
            let dev = (&an - &fd).iter().map(|x| x.abs()).fold(0.0f64, f64::max);
            assert!(dev <= 1e-5, "nu deviation {dev}");
            // canonical variant
            let ccfg = IterationConfig::canonical(p);
            let can = canonical_jacobian_matrix(&q, p).unwrap();
            let fd2 = jacobian_fd_matrix(&q, &ccfg).unwrap();
            let dev2 = (&can - &fd2).iter().map(|x| x.abs()).fold(0.0f64, f64::max);
            assert!(dev2 <= 1e-5, "canonical deviation {dev2}");
        }
    }

    #[test]
    fn moment_identity_and_normalization() {
        let p = 4;
        let cfg = round_cfg(p);
        let q = gauged(&ProdMatrix::round_balanced(p), &cfg);
        // μ(Id) = (Vol·rk/dim)·Id at the balanced point
        let mu = moment_at_identity(&q, &cfg).unwrap();
        let expect = 1.0 / (p as f64 + 1.0);
        for i in 0..=p {
            assert_abs_diff_eq!(mu.matrix()[(i, i)].re, expect, epsilon = 1e-9);
        }
        let res = check_moment_identity(&q, &cfg, 17).unwrap();
        assert!(res <= 1e-5, "nu moment identity residual {res}");
    }

    #[test]
    fn bundle_moment_normalization() {
        let cfg = IterationConfig::nu_balanced(3, BundleSpec::new(vec![0, 0]));
        let q = gauged(&blockwise_balanced(&cfg).unwrap(), &cfg);
        let mu = moment_at_identity(&q, &cfg).unwrap();
        let n = cfg.dim().unwrap();
        let expect = 2.0 / n as f64; // Vol·rk/dim with Vol = 1
        for i in 0..n {
            assert_abs_diff_eq!(mu.matrix()[(i, i)].re, expect, epsilon = 1e-9);
        }
    }
}
