//! One training run per setting of k, s or depth, fanned out over threads.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use lens_core::codec::{load_basis, load_samples, PatchBasis};
use lens_core::net::save_checkpoint;
use lens_core::train::{evaluate, train_from, TrainConfig, TrainState};
use lens_core::world::{World, WorldConfig, WorldKind};
use lens_core::{LensError, RngState};

use crate::args::{AblateArgs, AblateDim};
use crate::commands::{
    basis_from_samples, read_json, resolve_train_config, write_json, EvalOutput,
};
use crate::manifest::Outputs;

/// RNG stream of the final held-out comparison, distinct from training eval.
const STREAM_COMPARISON: u64 = 13;
const DEFAULT_LAYERS: [usize; 3] = [1, 2, 4];

struct Setting {
    value: usize,
    world: WorldConfig,
    basis: PatchBasis,
    config: TrainConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: usize,
    pub dim: String,
    pub value: usize,
    pub k: usize,
    pub patch_size: usize,
    pub n_layers: usize,
    pub n_tokens: usize,
    pub patch_dim: usize,
    pub baseline_reward: f64,
    pub final_reward: f64,
    pub reward_delta: f64,
    pub gap_closed: Option<f64>,
    pub fraction_improved: f64,
    /// reward_delta over the reference setting's reward_delta.
    pub improvement_ratio: f64,
    /// |final − final_ref| / |final_ref|.
    pub relative_reward_gap: f64,
    pub macs: u64,
    pub params: usize,
}

/// Worker cap from LENS_THREADS, else the machine's parallelism.
pub fn worker_count(jobs: usize) -> Result<usize> {
    let cap = match std::env::var("LENS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(LensError::Config(format!(
                    "LENS_THREADS must be a positive integer, got {v:?}"
                ))
                .into())
            }
        },
        Err(_) => thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(jobs).max(1))
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|s| n.is_multiple_of(*s)).collect()
}

fn settings(a: &AblateArgs, template: &WorldConfig) -> Result<Vec<Setting>> {
    let samples = a.samples.as_deref().map(load_samples).transpose()?;
    let shared_basis = match (&a.basis, &samples) {
        (Some(p), _) => Some(load_basis(p)?),
        (None, Some(s)) => Some(basis_from_samples(
            s,
            template.patch_size,
            template.geometry()?.patch_dim(),
        )?),
        _ => None,
    };
    let base_world = World::build(template, shared_basis.as_ref())?;
    let base_config = resolve_train_config(a.config.as_deref(), &base_world)?;
    let d = template.geometry()?.patch_dim();

    let values = match (&a.values, a.dim) {
        (Some(v), _) => v.clone(),
        (None, AblateDim::K) => {
            let mut v: Vec<usize> = [d / 8, d / 4, d / 2, d]
                .into_iter()
                .filter(|&k| k > 0)
                .collect();
            v.dedup();
            v
        }
        (None, AblateDim::S) => divisors(template.height)
            .into_iter()
            .filter(|s| template.width.is_multiple_of(*s))
            .collect(),
        (None, AblateDim::Layers) => DEFAULT_LAYERS.to_vec(),
    };
    if values.is_empty() {
        return Err(LensError::Config("ablation needs at least one setting".into()).into());
    }

    values
        .into_iter()
        .map(|value| {
            let mut world = template.clone();
            let mut config = base_config.clone();
            let basis = match a.dim {
                AblateDim::S => {
                    let samples = samples.as_ref().ok_or_else(|| {
                        LensError::Config(
                            "the s sweep extracts one basis per patch size and needs --samples"
                                .into(),
                        )
                    })?;
                    world.patch_size = value;
                    let geometry = world.geometry()?;
                    let d_s = geometry.patch_dim();
                    if let WorldKind::LowFreq { j } = &mut world.kind {
                        *j = (*j).min(d_s);
                    }
                    config.lens.n_tokens = geometry.n_patches();
                    config.lens.coeff_dim = config.lens.coeff_dim.min(d_s);
                    basis_from_samples(samples, value, d_s)?
                }
                AblateDim::K => {
                    config.lens.coeff_dim = value;
                    shared_basis.clone().ok_or_else(|| {
                        LensError::Config("the k sweep needs --basis or --samples".into())
                    })?
                }
                AblateDim::Layers => {
                    config.lens.n_layers = value;
                    shared_basis.clone().ok_or_else(|| {
                        LensError::Config("the layer sweep needs --basis or --samples".into())
                    })?
                }
            };
            Ok(Setting {
                value,
                world,
                basis,
                config,
            })
        })
        .collect()
}

struct Outcome {
    row: AblationRow,
    files: Vec<PathBuf>,
}

fn run_setting(index: usize, s: &Setting, a: &AblateArgs, dim: &str) -> Result<Outcome> {
    let world = World::build(&s.world, Some(&s.basis))?;
    let (state, log, _) = train_from(TrainState::new(&s.config)?, &world, &s.basis, &s.config)
        .with_context(|| format!("setting {dim}={}", s.value))?;
    let noise_basis = s.config.noise_basis(&s.basis)?;
    let prompts: Vec<usize> = (0..world.n_prompts()).collect();
    let mut rng = RngState::with_stream(s.config.seed, STREAM_COMPARISON);
    let report = evaluate(
        &state.net,
        &world,
        &noise_basis,
        &prompts,
        a.n_noise,
        &mut rng,
    )?;

    let dir = a.out.join(format!("{index:02}-{dim}{}", s.value));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join("lens.ckpt");
    let metrics = dir.join("metrics.csv");
    let eval = dir.join("eval.json");
    let config = dir.join("config.json");
    save_checkpoint(&state.net, &ckpt)?;
    log.write_csv(&metrics)?;
    write_json(
        &eval,
        &EvalOutput {
            gap_closed: report.gap_closed(),
            report: &report,
        },
    )?;
    write_json(&config, &json!({ "train": s.config, "world": s.world }))?;

    let lens = &s.config.lens;
    let g = world.geometry();
    Ok(Outcome {
        row: AblationRow {
            setting: index,
            dim: dim.to_owned(),
            value: s.value,
            k: lens.coeff_dim,
            patch_size: g.patch_size,
            n_layers: lens.n_layers,
            n_tokens: lens.n_tokens,
            patch_dim: g.patch_dim(),
            baseline_reward: report.baseline_mean,
            final_reward: report.modulated_mean,
            reward_delta: report.delta_mean,
            gap_closed: report.gap_closed(),
            fraction_improved: report.fraction_improved,
            improvement_ratio: f64::NAN,
            relative_reward_gap: f64::NAN,
            macs: lens.macs(s.world.prompt_tokens).total(),
            params: state.net.param_count(),
        },
        files: vec![ckpt, metrics, eval, config],
    })
}

pub fn ablate(a: &AblateArgs) -> Result<Outputs> {
    let template: WorldConfig = read_json(&a.world, "world config")?;
    template.geometry()?;
    let settings = settings(a, &template)?;
    let dim = format!("{:?}", a.dim).to_lowercase();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let workers = worker_count(settings.len())?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Outcome>>>> =
        settings.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(s) = settings.get(i) else { break };
                let outcome = run_setting(i, s, a, &dim);
                *slots[i]
                    .lock()
                    .expect("no worker panics while holding a slot") = Some(outcome);
            });
        }
    });

    let mut outcomes = Vec::with_capacity(slots.len());
    for slot in slots {
        outcomes.push(
            slot.into_inner()
                .expect("slot lock")
                .expect("every setting ran")?,
        );
    }
    // The largest setting (k = d for the default k sweep) is the reference.
    let reference = outcomes.last().expect("at least one setting").row.clone();
    let mut o = Outputs::new(a.out.join("manifest.json"));
    let mut writer = csv::Writer::from_writer(Vec::new());
    for out in &mut outcomes {
        out.row.improvement_ratio = out.row.reward_delta / reference.reward_delta;
        out.row.relative_reward_gap =
            (out.row.final_reward - reference.final_reward).abs() / reference.final_reward.abs();
        writer.serialize(&out.row)?;
        for f in &out.files {
            o.file(f.clone());
        }
    }
    let table = a.out.join("comparison.csv");
    lens_core::codec::write_atomic(
        &table,
        &writer.into_inner().context("flushing comparison table")?,
    )?;
    o.file(table);
    o.config = Some(json!({
        "dim": dim,
        "values": settings.iter().map(|s| s.value).collect::<Vec<_>>(),
        "n_noise": a.n_noise,
        "settings": settings.iter().map(|s| json!({ "train": s.config, "world": s.world })).collect::<Vec<_>>(),
    }));
    o.seed("train", settings[0].config.seed);
    o.seed("world", template.seed);
    Ok(o)
}
