use serde::{Deserialize, Serialize};

use crate::codec::PatchBasis;
use crate::error::{LensError, Result};
use crate::net::LensNet;
use crate::numerics::RngState;
use crate::train::batch::{batch_rewards, per_sample_reg, NoiseBatch};
use crate::world::World;

/// Samples per evaluation forward pass.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDelta {
    pub prompt: usize,
    pub baseline_mean: f64,
    pub modulated_mean: f64,
    pub delta_mean: f64,
}

/// Paired comparison on shared noise draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_noise: usize,
    pub n_samples: usize,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub modulated_mean: f64,
    pub modulated_std: f64,
    pub delta_mean: f64,
    /// Share of samples whose reward strictly increased.
    pub fraction_improved: f64,
    /// Mean ½‖h‖² per sample.
    pub reg_mean: f64,
    /// Mean over prompts of the best attainable reward, when known.
    pub optimum_mean: Option<f64>,
    pub per_prompt: Vec<PromptDelta>,
    /// modulated − baseline, prompt-major then noise draw.
    pub deltas: Vec<f64>,
}

impl EvalReport {
    /// (modulated − baseline) / (optimum − baseline).
    pub fn gap_closed(&self) -> Option<f64> {
        self.optimum_mean
            .map(|opt| (self.modulated_mean - self.baseline_mean) / (opt - self.baseline_mean))
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Rewards with and without modulation for `n_noise` draws per prompt.
///
/// `basis` must carry the coefficient count the network was built for.
pub fn evaluate(
    net: &LensNet,
    world: &World,
    basis: &PatchBasis,
    prompts: &[usize],
    n_noise: usize,
    rng: &mut RngState,
) -> Result<EvalReport> {
    if n_noise == 0 {
        return Err(LensError::invalid("evaluation needs n_noise ≥ 1"));
    }
    if prompts.is_empty() {
        return Err(LensError::invalid("evaluation needs at least one prompt"));
    }
    if basis.k() != net.config().coeff_dim {
        return Err(LensError::invalid(format!(
            "basis keeps k={} but the network modulates {}",
            basis.k(),
            net.config().coeff_dim
        )));
    }
    for &c in prompts {
        world.prompts().check(c)?;
    }
    let ids: Vec<usize> = prompts
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, n_noise))
        .collect();
    let mut base = Vec::with_capacity(ids.len());
    let mut modulated = Vec::with_capacity(ids.len());
    let mut reg = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let batch = NoiseBatch::sample(basis, chunk, rng)?;
        base.extend(batch_rewards(world, basis, &batch, None)?.0);
        let (r, delta) = batch_rewards(world, basis, &batch, Some(net))?;
        modulated.extend(r);
        reg.extend(per_sample_reg(
            &delta.expect("modulated pass returns a delta"),
            net.config().n_tokens,
        ));
    }
    let deltas: Vec<f64> = modulated.iter().zip(&base).map(|(m, b)| m - b).collect();
    let per_prompt = prompts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let r = i * n_noise..(i + 1) * n_noise;
            let bm = mean_std(&base[r.clone()]).0;
            let mm = mean_std(&modulated[r.clone()]).0;
            PromptDelta {
                prompt: c,
                baseline_mean: bm,
                modulated_mean: mm,
                delta_mean: mean_std(&deltas[r]).0,
            }
        })
        .collect();
    let optimum_mean = prompts
        .iter()
        .map(|&c| world.optimum_reward(c))
        .collect::<Result<Option<Vec<f64>>>>()?
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    let (baseline_mean, baseline_std) = mean_std(&base);
    let (modulated_mean, modulated_std) = mean_std(&modulated);
    Ok(EvalReport {
        n_noise,
        n_samples: ids.len(),
        baseline_mean,
        baseline_std,
        modulated_mean,
        modulated_std,
        delta_mean: mean_std(&deltas).0,
        fraction_improved: deltas.iter().filter(|&&d| d > 0.0).count() as f64 / ids.len() as f64,
        reg_mean: mean_std(&reg).0,
        optimum_mean,
        per_prompt,
        deltas,
    })
}
