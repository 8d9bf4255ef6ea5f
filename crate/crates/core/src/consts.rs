//! Normalization ledger for the round CP¹ model.
//!
//! Everything is pinned to the volume-one convention: the round Fubini-Study
//! form has total mass 1, with Liouville density (1+|z|²)⁻² per dLeb/π in the
//! affine chart. Consequences, each derived once and recorded here:
//!
//! * The round sphere of area 1 is the standard sphere scaled by 4π, so the
//!   Laplace-Beltrami spectrum is λ_k = 4π·k(k+1) and the lowest positive
//!   eigenvalue is λ₁ = 8π.
//! * Gauss-Bonnet gives ∫ K dA = 4π; at area 1 the Gauss curvature is the
//!   constant 4π and the scalar curvature is scal = 2K = 8π.
//! * Ric(ω) = c·ω with c = scal/2 = 4π (Kähler-Einstein constant of the
//!   round metric).
//! * The Casimir-unit Laplacian spectra of the split-bundle model carry
//!   values 2j(j+1) on scalars; matching λ_j = 4π·j(j+1) fixes the unit
//!   conversion κ = 2π.
//! * The Poisson bracket is evaluated as κ_P·2·Im(∂f·conj(∂g))/σ against the
//!   symplectic density σ per dLeb/π. Matching the leading commutator law of
//!   the spin operators on the round sphere (the bracket {x₁,x₂} = 4π·x₃ with
//!   positive sign) fixes κ_P = 2π. The raw single-level fit at p₀ returns
//!   2π·p₀/(p₀+2); the recorded constant is the bias-corrected value.

use std::f64::consts::PI;

/// Total round volume (normalization anchor).
pub const VOL_ROUND: f64 = 1.0;

/// First positive Laplace-Beltrami eigenvalue of the area-1 round sphere.
pub const LAMBDA_1: f64 = 8.0 * PI;

/// Kähler-Einstein constant of the round metric: Ric(ω) = c·ω.
pub const C_KE: f64 = 4.0 * PI;

/// Scalar curvature of the area-1 round sphere.
pub const SCAL_ROUND: f64 = 8.0 * PI;

/// Conversion from Casimir units to the volume-one spectral units.
pub const KAPPA: f64 = 2.0 * PI;

/// Poisson bracket normalization (see module docs).
pub const KAPPA_P: f64 = 2.0 * PI;

/// Laplace-Beltrami eigenvalue λ_k = 4π·k(k+1) of the area-1 round sphere.
pub fn lambda_k(k: usize) -> f64 {
    4.0 * PI * (k as f64) * (k as f64 + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_is_consistent() {
        assert_eq!(lambda_k(1), LAMBDA_1);
        assert_eq!(SCAL_ROUND, 2.0 * C_KE);
        // Casimir value 2j(j+1) times kappa reproduces lambda_j.
        for j in 0..6 {
            let casimir = 2.0 * j as f64 * (j as f64 + 1.0);
            assert!((KAPPA * casimir - lambda_k(j)).abs() < 1e-12);
        }
    }
}
