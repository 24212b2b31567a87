use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape};
use crate::codec::{proj_full, unfold, PatchBasis};
use crate::error::{LensError, Result};
use crate::numerics::{sample_standard_gaussian, RngState, Tensor};
use crate::world::World;

const SPECTRUM_BATCH: usize = 32;

/// E_j = mean over patches and images of α_{j,ℓ}², and ρ_k = Σ_{j≤k} E_j / Σ_j E_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEnergySpectrum {
    pub energy: Vec<f64>,
    pub rho: Vec<f64>,
    pub n_images: usize,
    pub n_patches: usize,
}

impl GradientEnergySpectrum {
    fn from_sums(sums: Vec<f64>, n_images: usize, n_patches: usize) -> Self {
        let count = n_patches as f64;
        let energy: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let total: f64 = energy.iter().sum();
        let mut acc = 0.0;
        let rho = energy
            .iter()
            .map(|e| {
                acc += e;
                if total > 0.0 {
                    acc / total
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            energy,
            rho,
            n_images,
            n_patches,
        }
    }

    /// Rows `j,E_j,rho_j` with 1-based j.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |e: csv::Error| LensError::Format(e.to_string());
        w.write_record(["j", "E_j", "rho_j"]).map_err(fmt)?;
        for (j, (e, r)) in self.energy.iter().zip(&self.rho).enumerate() {
            w.write_record([(j + 1).to_string(), e.to_string(), r.to_string()])
                .map_err(fmt)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| LensError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| LensError::Format(e.to_string()))
    }

    /// Largest |ρ_k − k/d|.
    pub fn isotropy_deviation(&self) -> f64 {
        let d = self.rho.len() as f64;
        self.rho
            .iter()
            .enumerate()
            .map(|(i, r)| (r - (i + 1) as f64 / d).abs())
            .fold(0.0, f64::max)
    }
}

/// Projects reward gradients at z₀ ~ N(0, I) onto the basis directions.
///
/// When the generator reads coefficients in `basis` the gradient is taken
/// with respect to the coefficients directly, so directions the generator
/// never reads get exactly zero energy. Otherwise ∇_z r is unfolded into
/// patches and projected.
pub fn gradient_energy_spectrum(
    world: &World,
    basis: &PatchBasis,
    prompts: &[usize],
    n_images: usize,
    rng: &mut RngState,
) -> Result<GradientEnergySpectrum> {
    if n_images == 0 || prompts.is_empty() {
        return Err(LensError::invalid(
            "spectrum needs n_images ≥ 1 and a prompt",
        ));
    }
    if basis.geometry() != world.geometry() {
        return Err(LensError::invalid("basis and world geometries differ"));
    }
    for &c in prompts {
        world.prompts().check(c)?;
    }
    let g = world.geometry();
    let (n, d) = (g.n_patches(), g.patch_dim());
    let basis = basis.for_noise();
    let coeff_path = world.generator().uses_basis(&basis);
    let mut sums = vec![0.0; d];
    let mut done = 0;
    while done < n_images {
        let b = SPECTRUM_BATCH.min(n_images - done);
        let ids: Vec<usize> = (done..done + b)
            .map(|i| prompts[i % prompts.len()])
            .collect();
        let latents = (0..b)
            .map(|_| sample_standard_gaussian(rng, &g.latent_shape()))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let alpha: Tensor = if coeff_path {
            let mut w = Vec::with_capacity(b * n * d);
            for z in &latents {
                w.extend(proj_full(z, &basis)?.into_data());
            }
            let x = tape.var(Tensor::matrix(b * n, d, w)?);
            let r = world.reward_of_coeffs(&mut tape, x, &ids)?;
            backward(&tape, r, &Tensor::filled(&[b, 1], 1.0))?.get_or_zero(&tape, x)
        } else {
            let mut z = Vec::with_capacity(b * g.latent_len());
            for l in &latents {
                z.extend_from_slice(l.data());
            }
            let x = tape.var(Tensor::matrix(b, g.latent_len(), z)?);
            let r = world.reward_of_latents(&mut tape, x, &ids)?;
            let grad = backward(&tape, r, &Tensor::filled(&[b, 1], 1.0))?.get_or_zero(&tape, x);
            let mut rows = Vec::with_capacity(b * n * d);
            for s in 0..b {
                let gz = Tensor::new(g.latent_shape().to_vec(), grad.row(s).to_vec())?;
                rows.extend(unfold(&gz, g)?.matmul(basis.vectors())?.into_data());
            }
            Tensor::matrix(b * n, d, rows)?
        };
        for row in alpha.data().chunks_exact(d) {
            for (s, a) in sums.iter_mut().zip(row) {
                *s += a * a;
            }
        }
        done += b;
    }
    Ok(GradientEnergySpectrum::from_sums(
        sums,
        n_images,
        n_images * n,
    ))
}
