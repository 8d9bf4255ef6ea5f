//! Spectrum reports: clustered eigenvalue lists with serialized metadata.

use crate::consts::{C_KE, KAPPA, KAPPA_P, LAMBDA_1};
use serde::{Deserialize, Serialize};

/// Relative gap below which adjacent eigenvalues are treated as one cluster.
/// Spectra in scope are exactly degenerate by symmetry; 1e-6 separates
/// genuine clusters at double precision.
pub const CLUSTER_REL_TOL: f64 = 1e-6;

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ReportConstants {
    pub lambda1: f64,
    pub c_ke: f64,
    pub kappa: f64,
    pub kappa_p: f64,
}

impl Default for ReportConstants {
    fn default() -> Self {
        Self {
            lambda1: LAMBDA_1,
            c_ke: C_KE,
            kappa: KAPPA,
            kappa_p: KAPPA_P,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct BundleInfo {
    pub bundle_degrees: Vec<i64>,
    /// Units of the companion oracle spectrum: "casimir|main".
    pub oracle_units: String,
    pub kappa: f64,
}

/// Decreasing eigenvalue list with multiplicities clustered at a recorded
/// tolerance.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct SpectrumReport {
    pub p: usize,
    pub eigenvalues: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub cluster_tol: f64,
    pub setup: String,
    pub constants: ReportConstants,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleInfo>,
}

impl SpectrumReport {
    /// Cluster a decreasing list of eigenvalues at the given relative gap.
    pub fn from_sorted(
        p: usize,
        sorted_desc: &[f64],
        cluster_tol: f64,
        setup: String,
    ) -> Self {
        let (eigenvalues, multiplicities) = cluster_eigenvalues(sorted_desc, cluster_tol);
        Self {
            p,
            eigenvalues,
            multiplicities,
            cluster_tol,
            setup,
            constants: ReportConstants::default(),
            bundle: None,
        }
    }

    pub fn dimension(&self) -> usize {
        self.multiplicities.iter().sum()
    }

    /// Flat eigenvalue list with clusters expanded.
    pub fn expanded(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dimension());
        for (&v, &m) in self.eigenvalues.iter().zip(&self.multiplicities) {
            out.extend(std::iter::repeat(v).take(m));
        }
        out
    }
}

/// Group a decreasing eigenvalue list into clusters: a new cluster starts
/// when the gap to the previous value exceeds tol·max(1, |value|). Cluster
/// representatives are means.
pub fn cluster_eigenvalues(sorted_desc: &[f64], rel_tol: f64) -> (Vec<f64>, Vec<usize>) {
    let mut values = Vec::new();
    let mut counts = Vec::new();
    let mut i = 0;
    while i < sorted_desc.len() {
        let mut j = i + 1;
        let mut sum = sorted_desc[i];
        while j < sorted_desc.len() {
            let gap = sorted_desc[j - 1] - sorted_desc[j];
            if gap > rel_tol * sorted_desc[j - 1].abs().max(1.0) {
                break;
            }
            sum += sorted_desc[j];
            j += 1;
        }
        values.push(sum / (j - i) as f64);
        counts.push(j - i);
        i = j;
    }
    (values, counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clustering_groups_degenerate_values() {
        let evs = [1.0, 1.0 - 1e-9, 0.5, 0.5 + 1e-8 - 1e-8, 0.1];
        let mut sorted = evs.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let (v, m) = cluster_eigenvalues(&sorted, 1e-6);
        assert_eq!(m, vec![2, 2, 1]);
        assert!((v[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn report_serializes_dimension() {
        let rep = SpectrumReport::from_sorted(1, &[1.0, 0.3, 0.3, 0.3], 1e-6, "round".into());
        assert_eq!(rep.dimension(), 4);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"eigenvalues\""));
        assert!(json.contains("\"lambda1\""));
    }
}
