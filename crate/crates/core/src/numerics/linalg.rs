use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

/// A Haar-style random d×d orthonormal matrix: Gram–Schmidt (applied twice)
/// on the columns of a Gaussian matrix.
pub fn random_orthonormal(d: usize, rng: &mut RngState) -> Result<Tensor> {
    if d == 0 {
        return Err(LensError::invalid("random_orthonormal with d = 0"));
    }
    let mut cols: Vec<Vec<f64>> = (0..d).map(|_| rng.normals(d)).collect();
    for j in 0..d {
        for _pass in 0..2 {
            for i in 0..j {
                let proj: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(LensError::Numerical("degenerate Gaussian draw".into()));
        }
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(Tensor::from_fn(d, d, |i, j| cols[j][i]))
}

/// Largest singular value of a dense matrix via the eigenvalues of AᵀA.
pub fn spectral_norm_dense(a: &Tensor) -> Result<f64> {
    let ata = a.transpose()?.matmul(a)?;
    let e = crate::numerics::symmetric_eigen(&ata)?;
    Ok(e.eigenvalues[0].max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_orthonormal() {
        let mut rng = RngState::new(3);
        for d in [1, 2, 16, 64] {
            let q = random_orthonormal(d, &mut rng).unwrap();
            let qtq = q.transpose().unwrap().matmul(&q).unwrap();
            assert!(qtq.max_abs_diff(&Tensor::identity(d)) < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Tensor::matrix(2, 3, vec![3.0, 0.0, 0.0, 0.0, -5.0, 0.0]).unwrap();
        assert!((spectral_norm_dense(&a).unwrap() - 5.0).abs() < 1e-12);
    }
}
