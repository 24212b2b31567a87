//! Reward-regularized training of the modulation network.
//!
//! Each step draws fresh noise, projects it, modulates the low-frequency
//! coefficients, reconstructs, generates, scores, and takes an AdamW step on
//! the network parameters. Gradients flow through the codec and the frozen
//! generator; neither is ever written.

mod batch;
mod eval;
mod metrics;
mod optim;

pub use batch::{batch_rewards, loss_on_tape, per_sample_reg, LossVars, NoiseBatch};
pub use eval::{evaluate, EvalReport, PromptDelta};
pub use metrics::{MetricsLog, MetricsRow, METRICS_COLUMNS};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Tape};
use crate::codec::PatchBasis;
use crate::error::{LensError, Result};
use crate::net::{LensConfig, LensNet, PromptBatch, SPECTRAL_MAX_ITER, SPECTRAL_TOL};
use crate::numerics::{RngState, Tensor};
use crate::world::World;

const STREAM_INIT: u64 = 10;
const STREAM_TRAIN: u64 = 11;
const STREAM_EVAL: u64 = 12;
/// Threshold above which the optional spectral penalty applies.
pub const SPECTRAL_PENALTY_THRESHOLD: f64 = 0.9;
const PENALTY_FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lens: LensConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub accumulation: usize,
    pub clip: f64,
    /// Optimizer steps. The noise stream is unbounded, so the budget is
    /// counted in steps rather than epochs.
    pub steps: usize,
    pub eval_every: usize,
    /// Held-out noise draws per prompt at each evaluation.
    pub eval_noise: usize,
    pub seed: u64,
    pub reg_weight: f64,
    /// Weight on max(0, M̂ − 0.9)²; 0 disables it.
    pub spectral_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lens: LensConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            accumulation: 1,
            clip: 1.0,
            steps: 3000,
            eval_every: 500,
            eval_noise: 8,
            seed: 0,
            reg_weight: 1.0,
            spectral_penalty: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(LensError::Config(format!(
                "learning rate must be > 0, got {}",
                o.lr
            )));
        }
        if !(self.clip > 0.0) {
            return Err(LensError::Config(format!(
                "clip must be > 0, got {}",
                self.clip
            )));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(LensError::Config(
                "batch_size and accumulation must be ≥ 1".into(),
            ));
        }
        if self.eval_every == 0 || self.eval_noise == 0 {
            return Err(LensError::Config(
                "eval_every and eval_noise must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(LensError::Config("need 0 ≤ β1, β2 < 1 and eps > 0".into()));
        }
        if !(self.reg_weight >= 0.0) || !(self.spectral_penalty >= 0.0) || !(o.weight_decay >= 0.0)
        {
            return Err(LensError::Config(
                "reg_weight, spectral_penalty and weight_decay must be ≥ 0".into(),
            ));
        }
        self.lens.validate()
    }

    /// Errors unless the network fits the world's token count and prompt width.
    pub fn check_world(&self, world: &World) -> Result<()> {
        let g = world.geometry();
        let cfg = world.config();
        if self.lens.n_tokens != g.n_patches() {
            return Err(LensError::Config(format!(
                "lens n_tokens={} but the world has N={} patches",
                self.lens.n_tokens,
                g.n_patches()
            )));
        }
        if self.lens.embed_dim != cfg.embed_dim {
            return Err(LensError::Config(format!(
                "lens embed_dim={} but prompts are {}-dimensional",
                self.lens.embed_dim, cfg.embed_dim
            )));
        }
        if self.lens.coeff_dim > g.patch_dim() {
            return Err(LensError::Config(format!(
                "k={} exceeds patch dimension d={}",
                self.lens.coeff_dim,
                g.patch_dim()
            )));
        }
        Ok(())
    }

    /// The projection basis used for noise: μ = 0, k from the lens config.
    pub fn noise_basis(&self, basis: &PatchBasis) -> Result<PatchBasis> {
        basis.for_noise().with_k(self.lens.coeff_dim)
    }
}

/// Batch-mean loss terms plus their per-sample values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub reward: f64,
    pub reg_per_sample: Vec<f64>,
    pub reward_per_sample: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: LensNet,
    pub optimizer: AdamW,
    pub step: u64,
    pub rng: RngState,
    pub last_loss: Option<LossBreakdown>,
    pub last_grad_norm: f64,
    pub last_spectral_norm: Option<f64>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = LensNet::init(
            &config.lens,
            &mut RngState::with_stream(config.seed, STREAM_INIT),
        )?;
        Ok(Self::from_net(net, config))
    }

    pub fn from_net(net: LensNet, config: &TrainConfig) -> Self {
        let optimizer = AdamW::new(config.optimizer, net.params());
        Self {
            net,
            optimizer,
            step: 0,
            rng: RngState::with_stream(config.seed, STREAM_TRAIN),
            last_loss: None,
            last_grad_norm: 0.0,
            last_spectral_norm: None,
        }
    }
}

/// Loss terms and parameter gradients for one batch.
pub fn loss_and_grad(
    net: &LensNet,
    world: &World,
    basis: &PatchBasis,
    batch: &NoiseBatch,
    reg_weight: f64,
    reward_offset: f64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let vars = loss_on_tape(
        &mut tape,
        net,
        &bound,
        world,
        basis,
        batch,
        reg_weight,
        reward_offset,
    )?;
    let total = tape.value(vars.loss).data()[0];
    let breakdown = LossBreakdown {
        total,
        reg: tape.value(vars.reg).data()[0],
        reward: tape.value(vars.reward).data()[0],
        reg_per_sample: per_sample_reg(tape.value(vars.delta), net.config().n_tokens),
        reward_per_sample: tape.value(vars.rewards).data().to_vec(),
    };
    if !total.is_finite() {
        return Err(LensError::Numerical(format!("non-finite loss {total}")));
    }
    let grads = backward(&tape, vars.loss, &Tensor::scalar(1.0))?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| grads.get_or_zero(&tape, v))
        .collect();
    Ok((breakdown, grads))
}

/// Penalty weight·(σ − 0.9)² on the Jacobian norm at the first sample of
/// `batch`, differentiated through a finite-difference JVP along the top
/// singular direction. Returns the measured σ and adds into `grads`.
fn spectral_penalty(
    net: &LensNet,
    world: &World,
    batch: &NoiseBatch,
    weight: f64,
    grads: &mut [Tensor],
) -> Result<f64> {
    let n = net.config().n_tokens;
    let probe = Tensor::matrix(
        n,
        batch.w_low.cols(),
        batch.w_low.data()[..n * batch.w_low.cols()].to_vec(),
    )?;
    let prompt = PromptBatch::from_table(world.prompts(), &batch.prompts[..1])?;
    let report = net.spectral_norm(&probe, &prompt, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?;
    if report.estimate <= SPECTRAL_PENALTY_THRESHOLD {
        return Ok(report.estimate);
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let w0 = tape.constant(probe.clone());
    let w1 = tape.constant(probe.add(&report.direction.scale(PENALTY_FD_STEP))?);
    let h0 = net.forward_on_tape(&mut tape, &bound, w0, &prompt)?;
    let h1 = net.forward_on_tape(&mut tape, &bound, w1, &prompt)?;
    let diff = tape.sub(h1, h0)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    let s = tape.sqrt(s)?;
    let sigma = tape.scale(s, 1.0 / PENALTY_FD_STEP)?;
    let excess = tape.add_scalar(sigma, -SPECTRAL_PENALTY_THRESHOLD)?;
    let pen = tape.square(excess)?;
    let pen = tape.scale(pen, weight)?;
    let g = backward(&tape, pen, &Tensor::scalar(1.0))?;
    for (acc, &v) in grads.iter_mut().zip(&bound.vars) {
        *acc = acc.add(&g.get_or_zero(&tape, v))?;
    }
    Ok(report.estimate)
}

/// One optimizer step on `prompts`, with `config.accumulation` fresh noise
/// batches. `basis` must already be the noise basis at the network's k.
pub fn train_step(
    state: &mut TrainState,
    world: &World,
    basis: &PatchBasis,
    prompts: &[usize],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if prompts.is_empty() {
        return Err(LensError::invalid("empty prompt batch"));
    }
    if basis.k() != state.net.config().coeff_dim {
        return Err(LensError::invalid(format!(
            "basis keeps k={} but the network modulates {}",
            basis.k(),
            state.net.config().coeff_dim
        )));
    }
    let acc = config.accumulation;
    let mut grads: Option<Vec<Tensor>> = None;
    let mut parts = Vec::with_capacity(acc);
    let mut first_batch = None;
    for _ in 0..acc {
        let batch = NoiseBatch::sample(basis, prompts, &mut state.rng)?;
        let (bd, g) = loss_and_grad(&state.net, world, basis, &batch, config.reg_weight, 0.0)
            .map_err(|e| match e {
                LensError::Numerical(msg) => {
                    LensError::Numerical(format!("step {}: {msg}", state.step + 1))
                }
                other => other,
            })?;
        grads = Some(match grads {
            None => g,
            Some(sum) => sum
                .iter()
                .zip(&g)
                .map(|(a, b)| a.add(b))
                .collect::<Result<_>>()?,
        });
        parts.push(bd);
        first_batch.get_or_insert(batch);
    }
    let mut grads = grads.expect("accumulation ≥ 1");
    if acc > 1 {
        let s = 1.0 / acc as f64;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    let breakdown = if acc == 1 {
        parts.pop().expect("one part")
    } else {
        let s = 1.0 / acc as f64;
        LossBreakdown {
            total: parts.iter().map(|p| p.total).sum::<f64>() * s,
            reg: parts.iter().map(|p| p.reg).sum::<f64>() * s,
            reward: parts.iter().map(|p| p.reward).sum::<f64>() * s,
            reg_per_sample: parts
                .iter()
                .flat_map(|p| p.reg_per_sample.iter().copied())
                .collect(),
            reward_per_sample: parts
                .iter()
                .flat_map(|p| p.reward_per_sample.iter().copied())
                .collect(),
        }
    };
    if config.spectral_penalty > 0.0 {
        let batch = first_batch.expect("accumulation ≥ 1");
        state.last_spectral_norm = Some(spectral_penalty(
            &state.net,
            world,
            &batch,
            config.spectral_penalty,
            &mut grads,
        )?);
    }
    let norm = clip_grad_norm(&mut grads, config.clip)
        .map_err(|e| LensError::Numerical(format!("step {}: {e}", state.step + 1)))?;
    state.optimizer.step(state.net.params_mut(), &grads)?;
    state.step += 1;
    state.last_grad_norm = norm;
    state.last_loss = Some(breakdown.clone());
    Ok(breakdown)
}

fn eval_row(
    state: &TrainState,
    world: &World,
    basis: &PatchBasis,
    config: &TrainConfig,
) -> Result<(MetricsRow, EvalReport)> {
    let prompts: Vec<usize> = (0..world.n_prompts()).collect();
    let mut rng = RngState::with_stream(config.seed, STREAM_EVAL);
    let report = evaluate(
        &state.net,
        world,
        basis,
        &prompts,
        config.eval_noise,
        &mut rng,
    )?;
    let probe = NoiseBatch::sample(
        basis,
        &[0],
        &mut RngState::with_stream(config.seed, STREAM_EVAL),
    )?;
    let prompt = PromptBatch::from_table(world.prompts(), &[0])?;
    let m_hat = state
        .net
        .spectral_norm(&probe.w_low, &prompt, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?
        .estimate;
    let row = MetricsRow {
        step: state.step,
        loss: config.reg_weight * report.reg_mean - report.modulated_mean,
        reg: report.reg_mean,
        reward: report.modulated_mean,
        grad_norm: state.last_grad_norm,
        spectral_norm: m_hat,
    };
    Ok((row, report))
}

/// Runs the loop from `state` to `config.steps`, evaluating at step 0, every
/// `eval_every` steps, and at the end. Prompts are drawn uniformly per sample.
pub fn train_from(
    mut state: TrainState,
    world: &World,
    basis: &PatchBasis,
    config: &TrainConfig,
) -> Result<(TrainState, MetricsLog, EvalReport)> {
    config.validate()?;
    config.check_world(world)?;
    if basis.geometry() != world.geometry() {
        return Err(LensError::invalid("basis and world geometries differ"));
    }
    if state.net.config() != &config.lens {
        return Err(LensError::Config(
            "network does not match the lens config".into(),
        ));
    }
    let noise_basis = config.noise_basis(basis)?;
    let mut log = MetricsLog::default();
    let (row, mut last_report) = eval_row(&state, world, &noise_basis, config)?;
    log.rows.push(row);
    let n_prompts = world.n_prompts();
    while (state.step as usize) < config.steps {
        let prompts: Vec<usize> = (0..config.batch_size)
            .map(|_| state.rng.below(n_prompts))
            .collect();
        train_step(&mut state, world, &noise_basis, &prompts, config)?;
        let s = state.step as usize;
        if s.is_multiple_of(config.eval_every) || s == config.steps {
            let (row, report) = eval_row(&state, world, &noise_basis, config)?;
            log.rows.push(row);
            last_report = report;
        }
    }
    Ok((state, log, last_report))
}

/// Fresh network trained on `world`; returns it with the metrics log.
pub fn train(
    world: &World,
    basis: &PatchBasis,
    config: &TrainConfig,
) -> Result<(LensNet, MetricsLog)> {
    let (state, log, _) = train_from(TrainState::new(config)?, world, basis, config)?;
    Ok((state.net, log))
}
