use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::codec::{PatchBasis, PatchGeometry};
use crate::error::{LensError, Result};
use crate::numerics::Tensor;

/// Low-frequency coefficients plus the orthogonal residual of each patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffSplit {
    /// N×k.
    pub w_low: Tensor,
    /// N×d, orthogonal to span(V') row by row.
    pub residual: Tensor,
    pub geometry: PatchGeometry,
}

impl CoeffSplit {
    pub fn new(w_low: Tensor, residual: Tensor, geometry: PatchGeometry) -> Result<Self> {
        let n = geometry.n_patches();
        let d = geometry.patch_dim();
        if w_low.shape().len() != 2 || w_low.rows() != n || w_low.cols() > d {
            return Err(LensError::shape(
                "coefficient split",
                &[n, d],
                w_low.shape(),
            ));
        }
        if residual.shape() != [n, d] {
            return Err(LensError::shape(
                "coefficient split",
                &[n, d],
                residual.shape(),
            ));
        }
        Ok(Self {
            w_low,
            residual,
            geometry,
        })
    }

    pub fn k(&self) -> usize {
        self.w_low.cols()
    }
}

/// Vectorizes a C×H×W latent into its N×d patch matrix.
pub fn unfold(z: &Tensor, geometry: PatchGeometry) -> Result<Tensor> {
    geometry.check_latent(z.shape())?;
    let data = geometry
        .unfold_indices()
        .iter()
        .map(|&i| z.data()[i])
        .collect();
    Tensor::matrix(geometry.n_patches(), geometry.patch_dim(), data)
}

/// Inverse of [`unfold`].
pub fn fold(patches: &Tensor, geometry: PatchGeometry) -> Result<Tensor> {
    let expected = [geometry.n_patches(), geometry.patch_dim()];
    if patches.shape() != expected {
        return Err(LensError::shape("fold", &expected, patches.shape()));
    }
    let data = geometry
        .fold_indices()
        .iter()
        .map(|&i| patches.data()[i])
        .collect();
    Tensor::new(geometry.latent_shape().to_vec(), data)
}

fn centered_patches(z: &Tensor, basis: &PatchBasis) -> Result<Tensor> {
    let mut s = unfold(z, basis.geometry())?;
    let mean = basis.mean().data();
    let d = basis.dim();
    for row in s.data_mut().chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    Ok(s)
}

/// s̃ = s − μ, w_L = s̃ V', y = s̃ − w_L V'ᵀ.
pub fn proj(z: &Tensor, basis: &PatchBasis) -> Result<CoeffSplit> {
    let s = centered_patches(z, basis)?;
    let w_low = s.matmul(basis.low())?;
    let back = w_low.matmul(&basis.shared_low_t())?;
    let residual = s.sub(&back)?;
    CoeffSplit::new(w_low, residual, basis.geometry())
}

/// ŝ = μ + ŵ_L V'ᵀ + y, folded back into a latent.
pub fn recon(split: &CoeffSplit, basis: &PatchBasis) -> Result<Tensor> {
    check_split(split, basis)?;
    let mut patches = split.w_low.matmul(&basis.shared_low_t())?;
    patches.axpy(1.0, &split.residual);
    let mean = basis.mean().data();
    for row in patches.data_mut().chunks_exact_mut(basis.dim()) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v += m;
        }
    }
    fold(&patches, basis.geometry())
}

/// All d coefficients of every centered patch, N×d.
pub fn proj_full(z: &Tensor, basis: &PatchBasis) -> Result<Tensor> {
    centered_patches(z, basis)?.matmul(basis.vectors())
}

/// Inverse of [`proj_full`].
pub fn recon_full(coeffs: &Tensor, basis: &PatchBasis) -> Result<Tensor> {
    let mut patches = coeffs.matmul(&basis.vectors().transpose()?)?;
    let mean = basis.mean().data();
    for row in patches.data_mut().chunks_exact_mut(basis.dim()) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v += m;
        }
    }
    fold(&patches, basis.geometry())
}

fn check_split(split: &CoeffSplit, basis: &PatchBasis) -> Result<()> {
    let n = basis.geometry().n_patches();
    let expected_low = [n, basis.k()];
    if split.w_low.shape() != expected_low {
        return Err(LensError::shape(
            "recon",
            &expected_low,
            split.w_low.shape(),
        ));
    }
    let expected_res = [n, basis.dim()];
    if split.residual.shape() != expected_res {
        return Err(LensError::shape(
            "recon",
            &expected_res,
            split.residual.shape(),
        ));
    }
    Ok(())
}

/// Batched reconstruction recorded on a tape.
///
/// `w_low` is (B·N)×k and `residual` (B·N)×d, samples stacked patch-row
/// blocks. Returns B×(C·H·W), one flattened latent per row.
pub fn recon_on_tape(
    tape: &mut Tape,
    w_low: Var,
    residual: Var,
    basis: &PatchBasis,
    low_t: Var,
    mean: Var,
) -> Result<Var> {
    let g = basis.geometry();
    let rows = tape.shape(w_low)[0];
    let n = g.n_patches();
    if !rows.is_multiple_of(n) {
        return Err(LensError::invalid(format!(
            "{rows} coefficient rows is not a multiple of N={n}"
        )));
    }
    let batch = rows / n;
    let low = tape.matmul(w_low, low_t)?;
    let patches = tape.add(low, residual)?;
    let patches = tape.add_row(patches, mean)?;
    let fold = g.fold_indices();
    let block = n * basis.dim();
    let indices: Vec<usize> = (0..batch)
        .flat_map(|b| fold.iter().map(move |&i| b * block + i))
        .collect();
    tape.gather(patches, Arc::new(indices), &[batch, g.latent_len()])
}

/// Constant leaves for V'ᵀ and μ used by [`recon_on_tape`].
pub fn basis_leaves(tape: &mut Tape, basis: &PatchBasis) -> (Var, Var) {
    let low_t = tape.leaf(basis.shared_low_t(), false);
    let mean = tape.leaf(basis.shared_mean(), false);
    (low_t, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_orthonormal, RngState};

    fn random_basis(g: PatchGeometry, k: usize, rng: &mut RngState) -> PatchBasis {
        let d = g.patch_dim();
        let v = random_orthonormal(d, rng).unwrap();
        let mean = rng.normals(d);
        PatchBasis::new(g, v, mean, vec![1.0; d], k).unwrap()
    }

    fn random_latent(g: PatchGeometry, rng: &mut RngState) -> Tensor {
        Tensor::new(g.latent_shape().to_vec(), rng.normals(g.latent_len())).unwrap()
    }

    #[test]
    fn identity_basis_returns_raw_patches() {
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let b = PatchBasis::identity(g, 8).unwrap();
        let mut rng = RngState::new(1);
        let z = random_latent(g, &mut rng);
        let split = proj(&z, &b).unwrap();
        assert_eq!(split.w_low, unfold(&z, g).unwrap());
        assert_eq!(split.residual.max_abs(), 0.0);
    }

    #[test]
    fn round_trip_and_orthogonality() {
        let g = PatchGeometry::new(4, 8, 8, 4).unwrap();
        let mut rng = RngState::new(2);
        for k in [1, 8, 32, 64] {
            let b = random_basis(g, k, &mut rng);
            let z = random_latent(g, &mut rng);
            let split = proj(&z, &b).unwrap();
            assert!(recon(&split, &b).unwrap().max_abs_diff(&z) <= 1e-9);
            assert!(split.residual.matmul(b.low()).unwrap().max_abs() <= 1e-9);
            // Parseval per patch
            let s = centered_patches(&z, &b).unwrap();
            for i in 0..g.n_patches() {
                let total: f64 = s.row(i).iter().map(|v| v * v).sum();
                let low: f64 = split.w_low.row(i).iter().map(|v| v * v).sum();
                let high: f64 = split.residual.row(i).iter().map(|v| v * v).sum();
                assert!((total - low - high).abs() <= 1e-9);
            }
            // recon of a split recovers it
            let again = proj(&recon(&split, &b).unwrap(), &b).unwrap();
            assert!(again.w_low.max_abs_diff(&split.w_low) <= 1e-9);
            assert!(again.residual.max_abs_diff(&split.residual) <= 1e-9);
        }
    }

    #[test]
    fn zeroed_low_band_reprojects_to_zero() {
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let mut rng = RngState::new(3);
        let b = random_basis(g, 2, &mut rng).for_noise();
        let z = random_latent(g, &mut rng);
        let mut split = proj(&z, &b).unwrap();
        split.w_low = split.w_low.scale(0.0);
        let x = recon(&split, &b).unwrap();
        assert!(proj(&x, &b).unwrap().w_low.max_abs() <= 1e-12);
    }

    #[test]
    fn single_coefficient_perturbation_is_local_isometry() {
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let mut rng = RngState::new(4);
        let b = random_basis(g, 3, &mut rng);
        let z = random_latent(g, &mut rng);
        let split = proj(&z, &b).unwrap();
        let delta = 0.37;
        let mut moved = split.clone();
        let patch = 2;
        let v = moved.w_low.get(patch, 1);
        moved.w_low.set(patch, 1, v + delta);
        let dz = recon(&moved, &b)
            .unwrap()
            .sub(&recon(&split, &b).unwrap())
            .unwrap();
        assert!((dz.frobenius_norm() - delta).abs() <= 1e-12);
        let unfold_idx = g.unfold_indices();
        let inside: Vec<usize> = unfold_idx[patch * 8..(patch + 1) * 8].to_vec();
        for (i, &v) in dz.data().iter().enumerate() {
            if !inside.contains(&i) {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let g = PatchGeometry::new(1, 4, 4, 2).unwrap();
        let b = PatchBasis::identity(g, 2).unwrap();
        let z = Tensor::zeros(&[1, 4, 2]);
        assert!(matches!(proj(&z, &b), Err(LensError::Shape { .. })));
        let bad = CoeffSplit {
            w_low: Tensor::zeros(&[4, 3]),
            residual: Tensor::zeros(&[4, 4]),
            geometry: g,
        };
        assert!(recon(&bad, &b).is_err());
    }

    #[test]
    fn tape_recon_matches_direct() {
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let mut rng = RngState::new(5);
        let b = random_basis(g, 3, &mut rng);
        let z1 = random_latent(g, &mut rng);
        let z2 = random_latent(g, &mut rng);
        let s1 = proj(&z1, &b).unwrap();
        let s2 = proj(&z2, &b).unwrap();
        let mut tape = Tape::new();
        let (lt, mu) = basis_leaves(&mut tape, &b);
        let w1 = tape.var(s1.w_low.clone());
        let w2 = tape.var(s2.w_low.clone());
        let r1 = tape.constant(s1.residual.clone());
        let r2 = tape.constant(s2.residual.clone());
        let w = tape.concat_rows(&[w1, w2]).unwrap();
        let r = tape.concat_rows(&[r1, r2]).unwrap();
        let out = recon_on_tape(&mut tape, w, r, &b, lt, mu).unwrap();
        let x = tape.value(out);
        assert_eq!(x.shape(), &[2, 32]);
        let d1 = recon(&s1, &b).unwrap();
        let d2 = recon(&s2, &b).unwrap();
        assert!(x
            .row(0)
            .iter()
            .zip(d1.data())
            .all(|(a, b)| (a - b).abs() <= 1e-12));
        assert!(x
            .row(1)
            .iter()
            .zip(d2.data())
            .all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}
