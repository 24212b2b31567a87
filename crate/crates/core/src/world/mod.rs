//! Frozen toy generator, prompt table and composite reward.
//!
//! Worlds are rebuilt bit-identically from a [`WorldConfig`] (plus the basis
//! file for the coefficient-selecting kinds); no weights are stored.

mod generator;
mod prompts;
mod reward;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use generator::{GeneratorKind, ToyGenerator};
pub use prompts::PromptTable;
pub use reward::{RewardComponent, RewardField, RewardWeights, COSINE_EPS};

use crate::autodiff::{Tape, Var};
use crate::codec::{PatchBasis, PatchGeometry};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

const STREAM_GENERATOR: u64 = 1;
const STREAM_PROMPTS: u64 = 2;
const STREAM_REWARD: u64 = 3;
const STREAM_TARGETS: u64 = 4;

pub const MIN_EPSILON_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorldKind {
    /// MLP generator on the whole latent, four-term reward.
    Generic,
    /// Generator reads only the first `j` PCA coefficients of each patch.
    LowFreq { j: usize },
    /// Generator reads only the last PCA coefficient of each patch.
    HighFreq,
    /// Identity generator with r = −½‖x‖².
    Isotropic,
    /// Identity generator with a per-prompt linear reward.
    Linear,
}

impl WorldKind {
    fn needs_basis(&self) -> bool {
        matches!(self, WorldKind::LowFreq { .. } | WorldKind::HighFreq)
    }
}

/// Everything needed to rebuild a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub kind: WorldKind,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub n_prompts: usize,
    pub prompt_tokens: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub weights: RewardWeights,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            kind: WorldKind::Generic,
            seed: 0,
            channels: 4,
            height: 8,
            width: 8,
            patch_size: 4,
            feature_dim: 32,
            hidden: 3072,
            n_prompts: 16,
            prompt_tokens: 4,
            embed_dim: 8,
            proj_dim: 16,
            weights: RewardWeights::default(),
        }
    }
}

impl WorldConfig {
    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.channels, self.height, self.width, self.patch_size)
    }

    /// Default sizes with the geometry taken from `basis`.
    pub fn for_basis(basis: &PatchBasis, kind: WorldKind) -> Self {
        let g = basis.geometry();
        Self {
            kind,
            channels: g.channels,
            height: g.height,
            width: g.width,
            patch_size: g.patch_size,
            ..Self::default()
        }
    }
}

/// A generator, reward field and prompt table built from one config.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    geometry: PatchGeometry,
    generator: ToyGenerator,
    reward: RewardField,
    prompts: PromptTable,
    target_features: Vec<Tensor>,
    optimum: Vec<Option<f64>>,
}

impl World {
    pub fn build(config: &WorldConfig, basis: Option<&PatchBasis>) -> Result<Self> {
        let geometry = config.geometry()?;
        if let Some(b) = basis {
            if b.geometry() != geometry {
                return Err(LensError::invalid(format!(
                    "basis geometry (C={}, H={}, W={}, s={}) does not match world (C={}, H={}, W={}, s={})",
                    b.geometry().channels,
                    b.geometry().height,
                    b.geometry().width,
                    b.geometry().patch_size,
                    geometry.channels,
                    geometry.height,
                    geometry.width,
                    geometry.patch_size
                )));
            }
        }
        if config.kind.needs_basis() && basis.is_none() {
            return Err(LensError::Config(format!(
                "world kind {:?} needs a basis file",
                config.kind
            )));
        }
        if config.n_prompts == 0 || config.proj_dim == 0 {
            return Err(LensError::Config(
                "n_prompts and proj_dim must be ≥ 1".into(),
            ));
        }
        let d = geometry.patch_dim();
        let mut gen_rng = RngState::with_stream(config.seed, STREAM_GENERATOR);
        let generator = match &config.kind {
            WorldKind::Generic | WorldKind::LowFreq { .. } | WorldKind::HighFreq => {
                let mlp =
                    ToyGenerator::mlp(geometry, config.hidden, config.feature_dim, &mut gen_rng)?;
                match (&config.kind, basis) {
                    (WorldKind::LowFreq { j }, Some(b)) => {
                        if *j == 0 || *j > d {
                            return Err(LensError::invalid(format!("j={j} must lie in 1..={d}")));
                        }
                        mlp.with_basis(b, Some((0..*j).collect()))?
                    }
                    (WorldKind::HighFreq, Some(b)) => mlp.with_basis(b, Some(vec![d - 1]))?,
                    (_, Some(b)) => mlp.with_basis(b, None)?,
                    (_, None) => mlp,
                }
            }
            WorldKind::Isotropic | WorldKind::Linear => {
                let id = ToyGenerator::identity(geometry);
                match basis {
                    Some(b) => id.with_basis(b, None)?,
                    None => id,
                }
            }
        };
        let m = generator.feature_dim();
        let prompts = PromptTable::generate(
            config.n_prompts,
            config.prompt_tokens,
            config.embed_dim,
            &mut RngState::with_stream(config.seed, STREAM_PROMPTS),
        )?;

        // target latent z*_c = A · pooled(emb_c), then x*_c = g(z*_c)
        let mut trng = RngState::with_stream(config.seed, STREAM_TARGETS);
        let latent_len = geometry.latent_len();
        let e = config.embed_dim;
        let a_scale = (config.prompt_tokens as f64 / e as f64).sqrt();
        let a: Vec<f64> = trng
            .normals(latent_len * e)
            .into_iter()
            .map(|v| v * a_scale)
            .collect();
        let mut target_features = Vec::with_capacity(config.n_prompts);
        for c in 0..config.n_prompts {
            let pooled = prompts.pooled(c)?;
            let z: Vec<f64> = (0..latent_len)
                .map(|i| {
                    a[i * e..(i + 1) * e]
                        .iter()
                        .zip(&pooled)
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect();
            target_features
                .push(generator.generate(&Tensor::new(geometry.latent_shape().to_vec(), z)?)?);
        }

        let mut rrng = RngState::with_stream(config.seed, STREAM_REWARD);
        let q = config.proj_dim;
        let w = config.weights;
        let components = match config.kind {
            WorldKind::Isotropic => vec![(1.0, RewardComponent::NegHalfSqNorm)],
            WorldKind::Linear => {
                let coef = Tensor::matrix(config.n_prompts, m, rrng.normals(config.n_prompts * m))?;
                vec![(
                    1.0,
                    RewardComponent::Linear {
                        coef: Arc::new(coef),
                    },
                )]
            }
            _ => {
                let projected = |rng: &mut RngState| -> Result<(Arc<Tensor>, Arc<Tensor>)> {
                    let s = 1.0 / (m as f64).sqrt();
                    let proj_t = Tensor::matrix(
                        m,
                        q,
                        rng.normals(m * q).into_iter().map(|v| v * s).collect(),
                    )?;
                    let mut t = Vec::with_capacity(config.n_prompts * q);
                    for x in &target_features {
                        t.extend(x.reshape(&[1, m])?.matmul(&proj_t)?.into_data());
                    }
                    Ok((
                        Arc::new(proj_t),
                        Arc::new(Tensor::matrix(config.n_prompts, q, t)?),
                    ))
                };
                let (p1, t1) = projected(&mut rrng)?;
                let (p2, t2) = projected(&mut rrng)?;
                let (p3, t3) = projected(&mut rrng)?;
                let mut dirs = Vec::with_capacity(config.n_prompts * m);
                for x in &target_features {
                    let n = x.frobenius_norm();
                    if n == 0.0 {
                        return Err(LensError::Numerical("target features are zero".into()));
                    }
                    dirs.extend(x.data().iter().map(|v| v / n));
                }
                let dirs = Arc::new(Tensor::matrix(config.n_prompts, m, dirs)?);
                vec![
                    (w.cosine, RewardComponent::Cosine { dirs }),
                    (
                        w.quad_primary,
                        RewardComponent::QuadDistance {
                            proj_t: p1,
                            targets: t1,
                        },
                    ),
                    (
                        w.quad_secondary,
                        RewardComponent::QuadDistance {
                            proj_t: p2,
                            targets: t2,
                        },
                    ),
                    (
                        w.bump,
                        RewardComponent::Bump {
                            proj_t: p3,
                            targets: t3,
                            width: q as f64,
                        },
                    ),
                ]
            }
        };
        let reward = RewardField::new(components, config.n_prompts, m)?;
        let optimum = match config.kind {
            WorldKind::Linear => vec![None; config.n_prompts],
            WorldKind::Isotropic => vec![Some(0.0); config.n_prompts],
            _ => target_features
                .iter()
                .enumerate()
                .map(|(c, x)| reward.reward(x, c).map(Some))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            config: config.clone(),
            geometry,
            generator,
            reward,
            prompts,
            target_features,
            optimum,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn generator(&self) -> &ToyGenerator {
        &self.generator
    }

    pub fn reward_field(&self) -> &RewardField {
        &self.reward
    }

    pub fn prompts(&self) -> &PromptTable {
        &self.prompts
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    /// Features x*_c at which the reward of prompt `c` peaks.
    pub fn target_features(&self, c: usize) -> Result<&Tensor> {
        self.prompts.check(c)?;
        Ok(&self.target_features[c])
    }

    /// Best attainable reward for prompt `c`, None when unbounded.
    pub fn optimum_reward(&self, c: usize) -> Result<Option<f64>> {
        self.prompts.check(c)?;
        Ok(self.optimum[c])
    }

    /// B×1 rewards of B×(C·H·W) latents.
    pub fn reward_of_latents(&self, tape: &mut Tape, z: Var, prompts: &[usize]) -> Result<Var> {
        let x = self.generator.forward_latent(tape, z)?;
        self.reward.on_tape(tape, x, prompts)
    }

    /// B×1 rewards of (B·N)×d zero-mean PCA coefficient blocks.
    pub fn reward_of_coeffs(&self, tape: &mut Tape, w: Var, prompts: &[usize]) -> Result<Var> {
        let x = self.generator.forward_coeffs(tape, w)?;
        self.reward.on_tape(tape, x, prompts)
    }

    pub fn reward_of_latent(&self, z: &Tensor, c: usize) -> Result<f64> {
        let x = self.generator.generate(z)?;
        self.reward.reward(&x, c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }
}

/// A world whose reward depends only on the first `j` PCA coefficients of
/// each patch, so the high-frequency contribution is exactly zero.
pub fn make_lowfreq_world(basis: &PatchBasis, j: usize) -> Result<World> {
    World::build(
        &WorldConfig::for_basis(basis, WorldKind::LowFreq { j }),
        Some(basis),
    )
}

/// Monte Carlo estimate of sup |r(g(w_L, w_H)) − r̄(w_L)| over sampled points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub estimate: f64,
    pub n_low: usize,
    pub n_high: usize,
    pub k: usize,
    /// Largest max − min of the reward across the high draws of one w_L.
    pub reward_range: f64,
    /// Always false: sampled points witness the estimate, not a uniform bound.
    pub is_bound: bool,
}

pub fn epsilon_estimate(
    world: &World,
    basis: &PatchBasis,
    c: usize,
    n_low: usize,
    n_high: usize,
    rng: &mut RngState,
) -> Result<EpsilonReport> {
    if n_low < MIN_EPSILON_SAMPLES || n_high < MIN_EPSILON_SAMPLES {
        return Err(LensError::invalid(format!(
            "epsilon estimate needs at least {MIN_EPSILON_SAMPLES} samples per level (got {n_low}, {n_high})"
        )));
    }
    if basis.geometry() != world.geometry() {
        return Err(LensError::invalid("basis and world geometries differ"));
    }
    world.prompts.check(c)?;
    let g = world.geometry();
    let (n, d, k) = (g.n_patches(), g.patch_dim(), basis.k());
    let prompts = vec![c; n_high];
    let mut estimate: f64 = 0.0;
    let mut range: f64 = 0.0;
    for _ in 0..n_low {
        let low = rng.normals(n * k);
        let mut w = Vec::with_capacity(n_high * n * d);
        for _ in 0..n_high {
            for p in 0..n {
                w.extend_from_slice(&low[p * k..(p + 1) * k]);
                w.extend(rng.normals(d - k));
            }
        }
        let mut tape = Tape::new();
        let wv = tape.constant(Tensor::matrix(n_high * n, d, w)?);
        let r = world.reward_of_coeffs(&mut tape, wv, &prompts)?;
        let r = tape.value(r).data();
        let mean = r.iter().sum::<f64>() / n_high as f64;
        let (lo, hi) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        range = range.max(hi - lo);
        estimate = estimate.max(r.iter().fold(0.0_f64, |m, v| m.max((v - mean).abs())));
    }
    Ok(EpsilonReport {
        estimate,
        n_low,
        n_high,
        k,
        reward_range: range,
        is_bound: false,
    })
}

#[cfg(test)]
mod tests;
