use serde::{Deserialize, Serialize};

use crate::codec::PatchBasis;
use crate::error::{LensError, Result};
use crate::net::{LensConfig, LensNet};
use crate::numerics::{RngState, Tensor};
use crate::train::{loss_and_grad, NoiseBatch};
use crate::world::World;

/// Loss values may differ from L − c by this much relative to max(1, |L|, |c|).
pub const LOSS_SHIFT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveProbe {
    pub offset: f64,
    pub loss: f64,
    pub shifted_loss: f64,
    /// |(L' − L) + c|.
    pub shift_error: f64,
    pub gradients_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub probes: Vec<ObjectiveProbe>,
    pub max_shift_error: f64,
    pub pass: bool,
}

fn random_net(config: &LensConfig, rng: &mut RngState) -> Result<LensNet> {
    let params = config
        .layout()
        .into_iter()
        .map(|(_, [r, c])| {
            Tensor::matrix(
                r,
                c,
                rng.normals(r * c).into_iter().map(|v| 0.3 * v).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    LensNet::from_params(config.clone(), params)
}

/// Replacing r by r + c shifts the loss by −c and leaves every gradient
/// bit-identical, for random parameter draws φ and the given offsets.
pub fn verify_objective_identity(
    world: &World,
    basis: &PatchBasis,
    config: &LensConfig,
    offsets: &[f64],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<ObjectiveReport> {
    if offsets.is_empty() || batch_size == 0 {
        return Err(LensError::invalid(
            "need at least one offset and batch_size ≥ 1",
        ));
    }
    let basis = basis.for_noise().with_k(config.coeff_dim)?;
    let mut probes = Vec::with_capacity(offsets.len());
    for &c in offsets {
        let net = random_net(config, rng)?;
        let prompts: Vec<usize> = (0..batch_size)
            .map(|_| rng.below(world.n_prompts()))
            .collect();
        let batch = NoiseBatch::sample(&basis, &prompts, rng)?;
        let (base, g0) = loss_and_grad(&net, world, &basis, &batch, 1.0, 0.0)?;
        let (shifted, g1) = loss_and_grad(&net, world, &basis, &batch, 1.0, c)?;
        let identical = g0.iter().zip(&g1).all(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        probes.push(ObjectiveProbe {
            offset: c,
            loss: base.total,
            shifted_loss: shifted.total,
            shift_error: ((shifted.total - base.total) + c).abs(),
            gradients_identical: identical,
        });
    }
    let max_shift_error = probes.iter().map(|p| p.shift_error).fold(0.0, f64::max);
    let pass = probes.iter().all(|p| {
        let scale = 1.0f64.max(p.loss.abs()).max(p.offset.abs());
        p.gradients_identical && p.shift_error <= LOSS_SHIFT_TOL * scale
    });
    Ok(ObjectiveReport {
        probes,
        max_shift_error,
        pass,
    })
}
