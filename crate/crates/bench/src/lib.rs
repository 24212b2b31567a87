//! Fixtures shared by the criterion benches.

use lens_core::codec::{extract_basis, synthetic_latents, PatchBasis, PatchGeometry};
use lens_core::net::{LensConfig, LensNet};
use lens_core::train::{NoiseBatch, TrainConfig};
use lens_core::world::{make_lowfreq_world, World};
use lens_core::RngState;

/// Default geometry: C=4, H=W=8, s=4, so N=4 and d=64.
pub fn basis() -> PatchBasis {
    let g = PatchGeometry::new(4, 8, 8, 4).expect("default geometry is valid");
    let latents = synthetic_latents(4, 8, 8, 1024, &mut RngState::new(1)).expect("positive sizes");
    extract_basis(&latents, g, g.patch_dim()).expect("enough samples for d=64")
}

pub fn lowfreq_world(basis: &PatchBasis) -> World {
    make_lowfreq_world(basis, 8).expect("j=8 fits d=64")
}

/// A network with small random weights so every branch does real work.
pub fn random_net(config: &LensConfig, seed: u64) -> LensNet {
    let mut rng = RngState::new(seed);
    let params = config
        .layout()
        .into_iter()
        .map(|(_, [r, c])| {
            lens_core::Tensor::matrix(
                r,
                c,
                rng.normals(r * c).into_iter().map(|v| 0.1 * v).collect(),
            )
            .expect("layout shapes are consistent")
        })
        .collect();
    LensNet::from_params(config.clone(), params).expect("params follow the layout")
}

pub fn noise_batch(basis: &PatchBasis, k: usize, batch: usize, seed: u64) -> NoiseBatch {
    let nb = basis.for_noise().with_k(k).expect("k ≤ d");
    let prompts: Vec<usize> = (0..batch).map(|i| i % 16).collect();
    NoiseBatch::sample(&nb, &prompts, &mut RngState::new(seed)).expect("valid basis")
}

pub fn train_config() -> TrainConfig {
    TrainConfig::default()
}
