use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::codec::PatchBasis;
use crate::error::{LensError, Result};
use crate::numerics::{matmul_at_into, matmul_into, RngState};

pub const MIN_PRESERVATION_SAMPLES: usize = 10_000;
/// Two-sided tail mass of a single 3σ test.
const THREE_SIGMA_TAIL: f64 = 0.0027;
const CHUNK: usize = 512;

/// Outcome of one family of moment tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTest {
    pub tests: usize,
    /// Critical value after splitting the 3σ tail mass across the family.
    pub z_star: f64,
    pub tolerance: f64,
    pub worst: f64,
    pub pass: bool,
}

impl MomentTest {
    fn new(tests: usize, standard_error: f64, worst: f64) -> Self {
        let z_star = family_critical_value(tests);
        let tolerance = z_star * standard_error;
        Self {
            tests,
            z_star,
            tolerance,
            worst,
            pass: worst < tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub n_samples: usize,
    /// Length of the stacked coefficient vector, N·d.
    pub dim: usize,
    pub k: usize,
    pub mean: MomentTest,
    pub variance: MomentTest,
    pub covariance: MomentTest,
    /// Cross-covariance between low (index < k) and high coefficients.
    pub cross: MomentTest,
    pub per_coeff_mean: Vec<f64>,
    pub per_coeff_var: Vec<f64>,
    pub pass: bool,
}

/// z* such that m two-sided tests at z* jointly carry the tail mass of one
/// 3σ test. Equals 3 for a single test.
pub fn family_critical_value(tests: usize) -> f64 {
    let m = tests.max(1) as f64;
    let normal = Normal::standard();
    normal.inverse_cdf(1.0 - THREE_SIGMA_TAIL / (2.0 * m))
}

/// Projects z ∼ N(0, I) through the full basis (μ = 0) and tests that the
/// stacked coefficient vector looks standard normal: means, variances,
/// off-diagonal covariances, and the low/high cross block.
pub fn gaussian_preservation_check(
    basis: &PatchBasis,
    n_samples: usize,
    rng: &mut RngState,
) -> Result<StatReport> {
    if n_samples < MIN_PRESERVATION_SAMPLES {
        return Err(LensError::InsufficientData(format!(
            "{n_samples} samples requested, at least {MIN_PRESERVATION_SAMPLES} required"
        )));
    }
    let g = basis.geometry();
    let d = basis.dim();
    let n_patches = g.n_patches();
    let dim = n_patches * d;
    let unfold = g.unfold_indices();
    let v = basis.vectors();

    let mut sum = vec![0.0; dim];
    let mut gram = vec![0.0; dim * dim];
    let mut chunk = vec![0.0; CHUNK * dim];
    let mut patches = vec![0.0; n_patches * d];
    let mut done = 0;
    while done < n_samples {
        let rows = CHUNK.min(n_samples - done);
        let block = &mut chunk[..rows * dim];
        block.fill(0.0);
        for r in 0..rows {
            let z = rng.normals(g.latent_len());
            for (p, &i) in patches.iter_mut().zip(&unfold) {
                *p = z[i];
            }
            let out = &mut block[r * dim..(r + 1) * dim];
            matmul_into(&patches, v.data(), out, n_patches, d, d);
            for (s, w) in sum.iter_mut().zip(out.iter()) {
                *s += w;
            }
        }
        matmul_at_into(block, block, &mut gram, rows, dim, dim);
        done += rows;
    }

    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let cov = |i: usize, j: usize| (gram[i * dim + j] - n * mean[i] * mean[j]) / (n - 1.0);
    let var: Vec<f64> = (0..dim).map(|i| cov(i, i)).collect();

    let mut worst_cov: f64 = 0.0;
    for i in 0..dim {
        for j in i + 1..dim {
            worst_cov = worst_cov.max(cov(i, j).abs());
        }
    }
    // low/high pairs inside each patch
    let k = basis.k();
    let mut worst_cross: f64 = 0.0;
    let mut cross_tests = 0;
    for p in 0..n_patches {
        for a in 0..k {
            for b in k..d {
                worst_cross = worst_cross.max(cov(p * d + a, p * d + b).abs());
                cross_tests += 1;
            }
        }
    }
    let se = 1.0 / n.sqrt();
    let worst_mean = mean.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let worst_var = var.iter().fold(0.0_f64, |m, v| m.max((v - 1.0).abs()));
    let mean_test = MomentTest::new(dim, se, worst_mean);
    let var_test = MomentTest::new(dim, (2.0 / n).sqrt(), worst_var);
    let cov_test = MomentTest::new(dim * (dim - 1) / 2, se, worst_cov);
    let cross = if cross_tests == 0 {
        MomentTest {
            tests: 0,
            z_star: family_critical_value(1),
            tolerance: 3.0 * se,
            worst: 0.0,
            pass: true,
        }
    } else {
        MomentTest::new(cross_tests, se, worst_cross)
    };
    let pass = mean_test.pass && var_test.pass && cov_test.pass && cross.pass;
    Ok(StatReport {
        n_samples,
        dim,
        k,
        mean: mean_test,
        variance: var_test,
        covariance: cov_test,
        cross,
        per_coeff_mean: mean,
        per_coeff_var: var,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PatchGeometry;
    use crate::numerics::random_orthonormal;

    #[test]
    fn single_test_critical_value_is_three_sigma() {
        assert!((family_critical_value(1) - 3.0).abs() < 1e-3);
        assert!(family_critical_value(1000) > 4.0);
    }

    #[test]
    fn orthonormal_basis_passes_and_broken_basis_fails() {
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let mut rng = RngState::new(8);
        let v = random_orthonormal(4, &mut rng).unwrap();
        let b = PatchBasis::from_orthonormal(g, v.clone(), 2).unwrap();
        let report = gaussian_preservation_check(&b, 20_000, &mut rng).unwrap();
        assert!(report.pass, "{report:?}");

        let mut broken = v;
        for i in 0..4 {
            let x = broken.get(i, 0);
            broken.set(i, 0, 2.0 * x);
        }
        let bad =
            PatchBasis::from_parts_unchecked(g, broken, vec![0.0; 4], vec![1.0; 4], 2).unwrap();
        let report = gaussian_preservation_check(&bad, 20_000, &mut rng).unwrap();
        assert!(!report.variance.pass);
        assert!(!report.pass);
    }

    #[test]
    fn too_few_samples() {
        let g = PatchGeometry::new(1, 2, 2, 2).unwrap();
        let b = PatchBasis::identity(g, 1).unwrap();
        let mut rng = RngState::new(0);
        assert!(matches!(
            gaussian_preservation_check(&b, 10, &mut rng),
            Err(LensError::InsufficientData(_))
        ));
    }
}
