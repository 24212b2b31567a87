use std::sync::Arc;

use crate::codec::PatchGeometry;
use crate::error::{LensError, Result};
use crate::numerics::{symmetric_eigen, Tensor};

const ORTHONORMAL_TOL: f64 = 1e-10;
const EIGENVALUE_FLOOR: f64 = -1e-10;
/// Eigenvalues below this fraction of the largest count as rank deficiency.
const RANK_RTOL: f64 = 1e-12;

/// Orthonormal patch basis with its mean, spectrum and retained count `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBasis {
    geometry: PatchGeometry,
    vectors: Arc<Tensor>,
    mean: Arc<Tensor>,
    eigenvalues: Vec<f64>,
    k: usize,
    low: Arc<Tensor>,
    low_t: Arc<Tensor>,
}

impl PatchBasis {
    /// Validates orthonormality, ordering of the spectrum and `1 ≤ k ≤ d`.
    pub fn new(
        geometry: PatchGeometry,
        vectors: Tensor,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        k: usize,
    ) -> Result<Self> {
        let basis = Self::from_parts_unchecked(geometry, vectors, mean, eigenvalues, k)?;
        let d = geometry.patch_dim();
        let v = &*basis.vectors;
        let gram = v.transpose()?.matmul(v)?;
        let err = gram.max_abs_diff(&Tensor::identity(d));
        if err > ORTHONORMAL_TOL {
            return Err(LensError::invalid(format!(
                "basis is not orthonormal: max |VᵀV − I| = {err:.3e}"
            )));
        }
        if basis.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(LensError::invalid("eigenvalues must be nonincreasing"));
        }
        if let Some(bad) = basis.eigenvalues.iter().find(|&&l| l < EIGENVALUE_FLOOR) {
            return Err(LensError::invalid(format!("negative eigenvalue {bad:.3e}")));
        }
        Ok(basis)
    }

    /// Builds a basis checking only shapes and `k`.
    ///
    /// Used for deliberately broken bases in negative-control experiments.
    pub fn from_parts_unchecked(
        geometry: PatchGeometry,
        vectors: Tensor,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        k: usize,
    ) -> Result<Self> {
        let d = geometry.patch_dim();
        if vectors.shape() != [d, d] {
            return Err(LensError::shape("basis", &[d, d], vectors.shape()));
        }
        if mean.len() != d || eigenvalues.len() != d {
            return Err(LensError::invalid(format!(
                "mean and eigenvalues must have length d={d} (got {} and {})",
                mean.len(),
                eigenvalues.len()
            )));
        }
        if k == 0 || k > d {
            return Err(LensError::invalid(format!("k={k} must lie in 1..={d}")));
        }
        let low = Tensor::from_fn(d, k, |i, j| vectors.get(i, j));
        let low_t = low.transpose()?;
        Ok(Self {
            geometry,
            vectors: Arc::new(vectors),
            mean: Arc::new(Tensor::matrix(1, d, mean)?),
            eigenvalues,
            k,
            low: Arc::new(low),
            low_t: Arc::new(low_t),
        })
    }

    /// An orthonormal basis with unit spectrum and zero mean.
    pub fn from_orthonormal(geometry: PatchGeometry, vectors: Tensor, k: usize) -> Result<Self> {
        let d = geometry.patch_dim();
        Self::new(geometry, vectors, vec![0.0; d], vec![1.0; d], k)
    }

    pub fn identity(geometry: PatchGeometry, k: usize) -> Result<Self> {
        Self::from_orthonormal(geometry, Tensor::identity(geometry.patch_dim()), k)
    }

    /// The same basis with a different retained count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::from_parts_unchecked(
            self.geometry,
            (*self.vectors).clone(),
            self.mean.data().to_vec(),
            self.eigenvalues.clone(),
            k,
        )
    }

    /// The same basis with μ = 0, for projecting zero-mean Gaussian noise.
    pub fn for_noise(&self) -> Self {
        let mut out = self.clone();
        out.mean = Arc::new(Tensor::zeros(&[1, self.dim()]));
        out
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn dim(&self) -> usize {
        self.geometry.patch_dim()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Full d×d basis, columns are eigenvectors.
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn shared_vectors(&self) -> Arc<Tensor> {
        Arc::clone(&self.vectors)
    }

    /// 1×d mean row.
    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn shared_mean(&self) -> Arc<Tensor> {
        Arc::clone(&self.mean)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Leading d×k block V'.
    pub fn low(&self) -> &Tensor {
        &self.low
    }

    pub fn shared_low(&self) -> Arc<Tensor> {
        Arc::clone(&self.low)
    }

    /// V'ᵀ, k×d.
    pub fn shared_low_t(&self) -> Arc<Tensor> {
        Arc::clone(&self.low_t)
    }

    pub fn is_zero_mean(&self) -> bool {
        self.mean.data().iter().all(|&m| m == 0.0)
    }
}

/// Patch PCA from a set of latents: mean, unbiased covariance, Jacobi
/// eigendecomposition (descending, sign-normalized).
pub fn extract_basis(samples: &[Tensor], geometry: PatchGeometry, k: usize) -> Result<PatchBasis> {
    let d = geometry.patch_dim();
    if k == 0 || k > d {
        return Err(LensError::invalid(format!("k={k} must lie in 1..={d}")));
    }
    let n_patches = samples.len() * geometry.n_patches();
    if n_patches < d {
        return Err(LensError::InsufficientData(format!(
            "{n_patches} patches available but at least d={d} are needed"
        )));
    }
    let unfold = geometry.unfold_indices();
    let mut patches: Vec<f64> = Vec::with_capacity(n_patches * d);
    for z in samples {
        geometry.check_latent(z.shape())?;
        patches.extend(unfold.iter().map(|&i| z.data()[i]));
    }

    let mut mean = vec![0.0; d];
    for row in patches.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_patches as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in patches.chunks_exact(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let out = &mut cov[i * d..(i + 1) * d];
            for j in i..d {
                out[j] += ci * centered[j];
            }
        }
    }
    let denom = (n_patches - 1).max(1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let eig = symmetric_eigen(&Tensor::matrix(d, d, cov)?)?;
    let top = eig.eigenvalues[0];
    let rank = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l > RANK_RTOL * top.max(0.0) && l > 0.0)
        .count();
    if rank < d {
        return Err(LensError::InsufficientData(format!(
            "patch covariance is rank deficient: rank {rank} of d={d} ({} degenerate directions)",
            d - rank
        )));
    }
    let eigenvalues = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    PatchBasis::new(geometry, eig.eigenvectors, mean, eigenvalues, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn geometry(c: usize, hw: usize, s: usize) -> PatchGeometry {
        PatchGeometry::new(c, hw, hw, s).unwrap()
    }

    #[test]
    fn isotropic_patches_give_flat_spectrum() {
        // d = 4, 1e5 patches of N(0, I)
        let g = geometry(1, 2, 2);
        let mut rng = RngState::new(21);
        let samples: Vec<Tensor> = (0..100_000)
            .map(|_| Tensor::new(vec![1, 2, 2], rng.normals(4)).unwrap())
            .collect();
        let b = extract_basis(&samples, g, 2).unwrap();
        for &l in b.eigenvalues() {
            assert!((0.95..=1.05).contains(&l), "eigenvalue {l}");
        }
    }

    #[test]
    fn rank_one_structure_is_recovered() {
        let g = geometry(1, 4, 2);
        let mut rng = RngState::new(3);
        let u = {
            let raw = rng.normals(4);
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            raw.into_iter().map(|v| v / n).collect::<Vec<_>>()
        };
        let unfold = g.unfold_indices();
        let samples: Vec<Tensor> = (0..2000)
            .map(|_| {
                let mut z = vec![0.0; 16];
                for p in 0..g.n_patches() {
                    let alpha = 3.0 * rng.normal();
                    for j in 0..4 {
                        z[unfold[p * 4 + j]] = alpha * u[j] + 0.01 * rng.normal();
                    }
                }
                Tensor::new(vec![1, 4, 4], z).unwrap()
            })
            .collect();
        let b = extract_basis(&samples, g, 1).unwrap();
        let v1 = b.vectors().column(0);
        let dot: f64 = v1.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!(dot.abs() > 0.999, "alignment {dot}");
    }

    #[test]
    fn too_few_patches() {
        let g = geometry(1, 2, 2);
        let z = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            extract_basis(&[z], g, 1),
            Err(LensError::InsufficientData(_))
        ));
    }

    #[test]
    fn degenerate_data_reports_rank() {
        let g = geometry(1, 2, 2);
        let samples: Vec<Tensor> = (0..10)
            .map(|i| Tensor::new(vec![1, 2, 2], vec![i as f64; 4]).unwrap())
            .collect();
        let err = extract_basis(&samples, g, 1).unwrap_err().to_string();
        assert!(err.contains("rank 1"), "{err}");
    }

    #[test]
    fn non_orthonormal_rejected_unless_unchecked() {
        let g = geometry(1, 2, 2);
        let mut v = Tensor::identity(4);
        v.set(0, 0, 2.0);
        assert!(PatchBasis::new(g, v.clone(), vec![0.0; 4], vec![1.0; 4], 2).is_err());
        assert!(PatchBasis::from_parts_unchecked(g, v, vec![0.0; 4], vec![1.0; 4], 2).is_ok());
        assert!(PatchBasis::identity(g, 0).is_err());
        assert!(PatchBasis::identity(g, 5).is_err());
    }
}
