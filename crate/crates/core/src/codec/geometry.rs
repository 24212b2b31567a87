use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Patch layout of a C×H×W latent cut into non-overlapping s×s patches.
///
/// Patches are enumerated row-major over the patch grid; inside a patch the
/// vectorization is channel-major, then row-major over the s×s window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl PatchGeometry {
    pub fn new(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || patch_size == 0 {
            return Err(LensError::invalid(format!(
                "geometry dimensions must be positive (C={channels}, H={height}, W={width}, s={patch_size})"
            )));
        }
        if !height.is_multiple_of(patch_size) || !width.is_multiple_of(patch_size) {
            return Err(LensError::invalid(format!(
                "patch size s={patch_size} must divide H={height} and W={width}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            patch_size,
        })
    }

    /// Patch dimension d = C·s².
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Number of patches N = (H/s)·(W/s).
    pub fn n_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// For each entry of the N×d patch matrix (row-major), its offset in the
    /// flattened C×H×W latent.
    pub fn unfold_indices(&self) -> Vec<usize> {
        let s = self.patch_size;
        let grid_w = self.width / s;
        let mut idx = Vec::with_capacity(self.latent_len());
        for p in 0..self.n_patches() {
            let (py, px) = (p / grid_w, p % grid_w);
            for c in 0..self.channels {
                for dy in 0..s {
                    for dx in 0..s {
                        let y = py * s + dy;
                        let x = px * s + dx;
                        idx.push(c * self.height * self.width + y * self.width + x);
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of [`unfold_indices`](Self::unfold_indices).
    pub fn fold_indices(&self) -> Vec<usize> {
        let unfold = self.unfold_indices();
        let mut fold = vec![0; unfold.len()];
        for (patch_pos, &latent_pos) in unfold.iter().enumerate() {
            fold[latent_pos] = patch_pos;
        }
        fold
    }

    pub fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let expected = self.latent_shape();
        if shape != expected {
            return Err(LensError::shape("latent", &expected, shape));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_sizes() {
        let g = PatchGeometry::new(4, 8, 8, 4).unwrap();
        assert_eq!(g.patch_dim(), 64);
        assert_eq!(g.n_patches(), 4);
        let g = PatchGeometry::new(1, 6, 4, 2).unwrap();
        assert_eq!(g.n_patches(), 6);
    }

    #[test]
    fn patch_size_must_divide() {
        let err = PatchGeometry::new(4, 8, 8, 3).unwrap_err().to_string();
        assert!(err.contains("s=3") && err.contains("H=8"), "{err}");
        assert!(PatchGeometry::new(0, 8, 8, 4).is_err());
    }

    #[test]
    fn unfold_is_a_permutation_with_expected_order() {
        let g = PatchGeometry::new(2, 4, 4, 2).unwrap();
        let idx = g.unfold_indices();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        // first patch: channel 0 rows 0..2 cols 0..2, then channel 1
        assert_eq!(&idx[..8], &[0, 1, 4, 5, 16, 17, 20, 21]);
        // second patch sits to the right of the first
        assert_eq!(idx[8], 2);
        let fold = g.fold_indices();
        for (p, &l) in idx.iter().enumerate() {
            assert_eq!(fold[l], p);
        }
    }
}
