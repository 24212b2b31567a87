use crate::autodiff::{Tape, Var};
use crate::codec::{basis_leaves, proj, recon_on_tape, PatchBasis};
use crate::error::{LensError, Result};
use crate::net::{BoundParams, LensNet, PromptBatch};
use crate::numerics::{sample_standard_gaussian, RngState, Tensor};
use crate::world::World;

/// Projected noise for a batch of samples, each paired with a prompt id.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    pub prompts: Vec<usize>,
    /// (B·N)×k low-frequency coefficients.
    pub w_low: Tensor,
    /// (B·N)×d orthogonal residuals.
    pub residual: Tensor,
}

impl NoiseBatch {
    /// Projects given latents with `basis` (whose k sets the split).
    pub fn from_latents(latents: &[Tensor], prompts: &[usize], basis: &PatchBasis) -> Result<Self> {
        if latents.len() != prompts.len() || latents.is_empty() {
            return Err(LensError::invalid(format!(
                "{} latents for {} prompts",
                latents.len(),
                prompts.len()
            )));
        }
        let g = basis.geometry();
        let (n, k, d) = (g.n_patches(), basis.k(), basis.dim());
        let mut low = Vec::with_capacity(latents.len() * n * k);
        let mut res = Vec::with_capacity(latents.len() * n * d);
        for z in latents {
            let split = proj(z, basis)?;
            low.extend_from_slice(split.w_low.data());
            res.extend_from_slice(split.residual.data());
        }
        Ok(Self {
            prompts: prompts.to_vec(),
            w_low: Tensor::matrix(latents.len() * n, k, low)?,
            residual: Tensor::matrix(latents.len() * n, d, res)?,
        })
    }

    /// Fresh z ~ N(0, I) for each prompt id, drawn in order from `rng`.
    pub fn sample(basis: &PatchBasis, prompts: &[usize], rng: &mut RngState) -> Result<Self> {
        let shape = basis.geometry().latent_shape();
        let latents = prompts
            .iter()
            .map(|_| sample_standard_gaussian(rng, &shape))
            .collect::<Result<Vec<_>>>()?;
        Self::from_latents(&latents, prompts, basis)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Loss graph handles.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    /// Batch mean of ½‖h‖².
    pub reg: Var,
    /// Batch mean reward (offset included).
    pub reward: Var,
    /// (B·N)×k modulation.
    pub delta: Var,
    /// B×1 per-sample rewards (offset included).
    pub rewards: Var,
}

/// Records reg_weight·mean(½‖h‖²) − mean(r + offset) on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    tape: &mut Tape,
    net: &LensNet,
    bound: &BoundParams,
    world: &World,
    basis: &PatchBasis,
    batch: &NoiseBatch,
    reg_weight: f64,
    reward_offset: f64,
) -> Result<LossVars> {
    let b = batch.len() as f64;
    let prompts = PromptBatch::from_table(world.prompts(), &batch.prompts)?;
    let w = tape.leaf(std::sync::Arc::new(batch.w_low.clone()), false);
    let residual = tape.leaf(std::sync::Arc::new(batch.residual.clone()), false);
    let delta = net.forward_on_tape(tape, bound, w, &prompts)?;
    let w_hat = tape.add(w, delta)?;
    let (low_t, mean) = basis_leaves(tape, basis);
    let z = recon_on_tape(tape, w_hat, residual, basis, low_t, mean)?;
    let rewards = world.reward_of_latents(tape, z, &batch.prompts)?;
    let rewards = if reward_offset == 0.0 {
        rewards
    } else {
        tape.add_scalar(rewards, reward_offset)?
    };
    let sq = tape.square(delta)?;
    let reg = tape.sum(sq)?;
    let reg = tape.scale(reg, 0.5 / b)?;
    let reward = tape.sum(rewards)?;
    let reward = tape.scale(reward, 1.0 / b)?;
    let weighted = tape.scale(reg, reg_weight)?;
    let loss = tape.sub(weighted, reward)?;
    Ok(LossVars {
        loss,
        reg,
        reward,
        delta,
        rewards,
    })
}

/// ½‖h‖² of each sample in a (B·N)×k modulation.
pub fn per_sample_reg(delta: &Tensor, n_tokens: usize) -> Vec<f64> {
    delta
        .data()
        .chunks(n_tokens * delta.cols())
        .map(|c| 0.5 * c.iter().map(|v| v * v).sum::<f64>())
        .collect()
}

/// Per-sample rewards of reconstructed latents, optionally modulated by `net`.
pub fn batch_rewards(
    world: &World,
    basis: &PatchBasis,
    batch: &NoiseBatch,
    net: Option<&LensNet>,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let mut tape = Tape::new();
    let w = tape.constant(batch.w_low.clone());
    let residual = tape.constant(batch.residual.clone());
    let (w_hat, delta) = match net {
        Some(net) => {
            let prompts = PromptBatch::from_table(world.prompts(), &batch.prompts)?;
            let bound = net.bind(&mut tape, false);
            let delta = net.forward_on_tape(&mut tape, &bound, w, &prompts)?;
            (tape.add(w, delta)?, Some(delta))
        }
        None => (w, None),
    };
    let (low_t, mean) = basis_leaves(&mut tape, basis);
    let z = recon_on_tape(&mut tape, w_hat, residual, basis, low_t, mean)?;
    let r = world.reward_of_latents(&mut tape, z, &batch.prompts)?;
    Ok((
        tape.value(r).data().to_vec(),
        delta.map(|d| tape.value(d).clone()),
    ))
}
