use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::numerics::Tensor;

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;
const SIGN_EPS: f64 = 1e-12;

/// Eigenpairs of a real symmetric matrix.
///
/// Eigenvalues are sorted in nonincreasing order and column `j` of
/// `eigenvectors` belongs to `eigenvalues[j]`. In every eigenvector the first
/// component with magnitude above `1e-12` is positive, which makes stored
/// bases reproducible across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Tensor,
}

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
/// drops below `1e-12 · ‖A‖_F`, or fails after 100 sweeps.
pub fn symmetric_eigen(a: &Tensor) -> Result<EigenDecomposition> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(LensError::invalid(format!(
            "symmetric_eigen expects a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(LensError::invalid("symmetric_eigen on an empty matrix"));
    }
    if !a.is_finite() {
        return Err(LensError::Numerical(
            "non-finite entry in eigen input".into(),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (a.get(i, j) - a.get(j, i)).abs();
            if gap > SYMMETRY_TOL {
                return Err(LensError::invalid(format!(
                    "matrix is not symmetric: |a[{i},{j}] - a[{j},{i}]| = {gap:.3e}"
                )));
            }
        }
    }

    // symmetrize exactly before rotating
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.get(i, j) + a.get(j, i));
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let scale = a.frobenius_norm();

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&m) <= OFF_DIAGONAL_TOL * scale;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, n, p, q, c, s);
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        converged = off(&m) <= OFF_DIAGONAL_TOL * scale;
    }
    if !converged {
        return Err(LensError::NonConvergence {
            iterations: sweeps,
            residual: off(&m),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y * n + y].total_cmp(&m[x * n + x]).then(x.cmp(&y)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        let sign = (0..n)
            .map(|k| v[k * n + src])
            .find(|x| x.abs() > SIGN_EPS)
            .map_or(1.0, |x| x.signum());
        for k in 0..n {
            vectors[k * n + dst] = sign * v[k * n + src];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: Tensor::matrix(n, n, vectors)?,
    })
}

/// Applies the similarity transform Jᵀ M J for a rotation in the (p, q) plane.
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let mkp = m[k * n + p];
        let mkq = m[k * n + q];
        m[k * n + p] = c * mkp - s * mkq;
        m[k * n + q] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[p * n + k];
        let mqk = m[q * n + k];
        m[p * n + k] = c * mpk - s * mqk;
        m[q * n + k] = s * mpk + c * mqk;
    }
}

impl EigenDecomposition {
    /// V diag(λ) Vᵀ.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        Tensor::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| v.get(i, k) * self.eigenvalues[k] * v.get(j, k))
                .sum()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_standard_gaussian, RngState};
    use proptest::prelude::*;

    fn random_symmetric(seed: u64, n: usize) -> Tensor {
        let g = sample_standard_gaussian(&mut RngState::new(seed), &[n, n]).unwrap();
        let gt = g.transpose().unwrap();
        g.add(&gt).unwrap().scale(0.5)
    }

    fn check_invariants(a: &Tensor, e: &EigenDecomposition) {
        let n = a.rows();
        let v = &e.eigenvectors;
        let vtv = v.transpose().unwrap().matmul(v).unwrap();
        assert!(vtv.max_abs_diff(&Tensor::identity(n)) <= 1e-10);
        let fro = a.frobenius_norm();
        for j in 0..n {
            let col = Tensor::matrix(n, 1, v.column(j)).unwrap();
            let av = a.matmul(&col).unwrap();
            let res = av
                .sub(&col.scale(e.eigenvalues[j]))
                .unwrap()
                .frobenius_norm();
            assert!(res <= 1e-8 * fro.max(f64::MIN_POSITIVE), "residual {res}");
        }
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn diagonal_matrix() {
        let a = Tensor::matrix(3, 3, vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 2.0, 1.0]);
        let expected =
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e.eigenvectors, expected);
    }

    #[test]
    fn two_by_two_analytic() {
        let a = Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = symmetric_eigen(&a).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Tensor::matrix(2, 2, vec![r, r, r, -r]).unwrap();
        assert!(e.eigenvectors.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn random_round_trip() {
        let a = random_symmetric(11, 8);
        let e = symmetric_eigen(&a).unwrap();
        assert!(e.reconstruct().max_abs_diff(&a) <= 1e-8);
        check_invariants(&a, &e);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            symmetric_eigen(&a),
            Err(LensError::InvalidInput(_))
        ));
    }

    #[test]
    fn sign_convention_holds() {
        let a = random_symmetric(5, 12);
        let e = symmetric_eigen(&a).unwrap();
        for j in 0..12 {
            let first = e
                .eigenvectors
                .column(j)
                .into_iter()
                .find(|x| x.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn zero_matrix_is_trivially_converged() {
        let e = symmetric_eigen(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(e.eigenvalues, vec![0.0; 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn invariants_hold_for_random_symmetric(seed in any::<u64>(), n in 2usize..=64) {
            let a = random_symmetric(seed, n);
            let e = symmetric_eigen(&a).unwrap();
            check_invariants(&a, &e);
        }
    }
}
