use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use lens_core::codec::{
    basis_header, extract_basis, load_basis, load_samples, save_basis, save_samples, sidecar_path,
    synthetic_latents, write_atomic, PatchBasis, PatchGeometry,
};
use lens_core::net::{load_checkpoint, save_checkpoint, LensConfig};
use lens_core::theory::suite::{
    run_kl_suite, run_prop1_suite, run_spectrum_suite, run_stein_suite,
};
use lens_core::theory::{
    complexity_bench, default_grid, verify_objective_identity, ComplexityReport, FIT_RESIDUAL_MAX,
};
use lens_core::train::{evaluate, train_from, EvalReport, TrainConfig, TrainState};
use lens_core::world::{World, WorldConfig, WorldKind};
use lens_core::{LensError, RngState};

use crate::ablate;
use crate::args::*;
use crate::manifest::{artifact, load_manifest, manifest_for_file, Outputs};

/// A command ran to completion but its check did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub const STEIN_SAMPLES: usize = 100_000;
pub const KL_MC_SAMPLES: usize = 100_000;
/// 2500 images of N = 4 patches gives 10⁴ patch samples.
pub const SPECTRUM_IMAGES: usize = 2500;
pub const OBJECTIVE_OFFSETS: [f64; 5] = [-10.0, -1.0, 0.5, 3.0, 100.0];
const DEFAULT_SAMPLE_COUNT: usize = 2048;
const PARAM_RATIO_MAX: f64 = 0.1;

pub fn run(command: &Command, args: &[String]) -> Result<()> {
    let start = Instant::now();
    let (name, outputs) = match command {
        Command::Samples(a) => ("samples", samples(a)?),
        Command::Basis(a) => ("basis", basis(a)?),
        Command::World(a) => ("world", world(a)?),
        Command::Train(a) => ("train", train(a)?),
        Command::Eval(a) => ("eval", eval(a)?),
        Command::Verify(a) => ("verify", verify(a)?),
        Command::Bench(a) => ("bench", bench(a)?),
        Command::Ablate(a) => ("ablate", ablate::ablate(a)?),
        Command::Replay(a) => return replay(a),
    };
    outputs.write_manifest(name, args, start.elapsed().as_secs_f64())?;
    match outputs.failure {
        Some(msg) => Err(CheckFailed(msg).into()),
        None => Ok(()),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} {}", path.display()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn latent_dims(samples: &[lens_core::Tensor]) -> Result<[usize; 3]> {
    let first = samples
        .first()
        .ok_or_else(|| LensError::InsufficientData("samples file holds no latents".into()))?;
    match *first.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(LensError::Format(format!("latents must be C×H×W, got shape {s:?}")).into()),
    }
}

pub fn basis_from_samples(
    samples: &[lens_core::Tensor],
    patch_size: usize,
    k: usize,
) -> Result<PatchBasis> {
    let [c, h, w] = latent_dims(samples)?;
    let geometry = PatchGeometry::new(c, h, w, patch_size)?;
    Ok(extract_basis(samples, geometry, k)?)
}

/// Basis extracted from default synthetic latents (C=4, H=W=8, s=4, k=32).
pub fn default_basis(seed: u64) -> Result<PatchBasis> {
    let latents = synthetic_latents(
        4,
        8,
        8,
        DEFAULT_SAMPLE_COUNT,
        &mut RngState::with_stream(seed, 7),
    )?;
    basis_from_samples(&latents, 4, 32)
}

pub fn load_world(path: &Path, basis: Option<&PatchBasis>) -> Result<(WorldConfig, World)> {
    let config: WorldConfig = read_json(path, "world config")?;
    let world = World::build(&config, basis)?;
    Ok((config, world))
}

/// The config file as written, or defaults sized to the world.
pub fn resolve_train_config(path: Option<&Path>, world: &World) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p, "training config"),
        None => {
            let mut config = TrainConfig::default();
            config.lens.n_tokens = world.geometry().n_patches();
            config.lens.embed_dim = world.config().embed_dim;
            config.lens.coeff_dim = config.lens.coeff_dim.min(world.geometry().patch_dim());
            Ok(config)
        }
    }
}

#[derive(Serialize)]
pub struct EvalOutput<'a> {
    pub gap_closed: Option<f64>,
    #[serde(flatten)]
    pub report: &'a EvalReport,
}

fn samples(a: &SamplesArgs) -> Result<Outputs> {
    let latents = synthetic_latents(
        a.channels,
        a.height,
        a.width,
        a.count,
        &mut RngState::new(a.seed),
    )?;
    ensure_parent(&a.out)?;
    save_samples(&latents, &a.out)?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.config = Some(json!({
        "count": a.count,
        "channels": a.channels,
        "height": a.height,
        "width": a.width,
    }));
    o.seed("samples", a.seed);
    o.file(a.out.clone());
    Ok(o)
}

fn basis(a: &BasisArgs) -> Result<Outputs> {
    let samples = load_samples(&a.samples)?;
    let basis = basis_from_samples(&samples, a.patch_size, a.k)?;
    ensure_parent(&a.out)?;
    save_basis(&basis, &a.out)?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.config = Some(serde_json::to_value(basis_header(&basis)?)?);
    o.file(a.out.clone());
    o.file(sidecar_path(&a.out));
    Ok(o)
}

fn world(a: &WorldArgs) -> Result<Outputs> {
    let mut config = match &a.config {
        Some(p) => read_json(p, "world config")?,
        None => WorldConfig::default(),
    };
    let basis = a.basis.as_deref().map(load_basis).transpose()?;
    if let Some(b) = &basis {
        let g = b.geometry();
        config.channels = g.channels;
        config.height = g.height;
        config.width = g.width;
        config.patch_size = g.patch_size;
    }
    let kind = a.kind.or(if a.config.is_none() {
        Some(WorldKindArg::Lowfreq)
    } else {
        None
    });
    if let Some(kind) = kind {
        config.kind = match kind {
            WorldKindArg::Generic => WorldKind::Generic,
            WorldKindArg::Lowfreq => WorldKind::LowFreq { j: a.j },
            WorldKindArg::Highfreq => WorldKind::HighFreq,
            WorldKindArg::Isotropic => WorldKind::Isotropic,
            WorldKindArg::Linear => WorldKind::Linear,
        };
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    World::build(&config, basis.as_ref())?;
    ensure_parent(&a.out)?;
    write_json(&a.out, &config)?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.seed("world", config.seed);
    o.config = Some(serde_json::to_value(&config)?);
    o.file(a.out.clone());
    Ok(o)
}

fn train(a: &TrainArgs) -> Result<Outputs> {
    let world_config: WorldConfig = read_json(&a.world, "world config")?;
    world_config.geometry()?;
    let basis = load_basis(&a.basis)?;
    let world = World::build(&world_config, Some(&basis))?;
    let config = resolve_train_config(a.config.as_deref(), &world)?;
    let (state, log, report) = train_from(TrainState::new(&config)?, &world, &basis, &config)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("lens.ckpt");
    let info = a.out.join("checkpoint.json");
    let metrics = a.out.join("metrics.csv");
    let eval = a.out.join("eval.json");
    save_checkpoint(&state.net, &ckpt)?;
    write_json(
        &info,
        &json!({
            "steps": state.step,
            "param_count": state.net.param_count(),
            "train_config": config,
            "world_config": world_config,
        }),
    )?;
    log.write_csv(&metrics)?;
    write_json(
        &eval,
        &EvalOutput {
            gap_closed: report.gap_closed(),
            report: &report,
        },
    )?;

    let mut o = Outputs::new(a.out.join("manifest.json"));
    o.seed("train", config.seed);
    o.seed("world", world_config.seed);
    o.config = Some(json!({ "train": config, "world": world_config }));
    for p in [ckpt, info, metrics, eval] {
        o.file(p);
    }
    Ok(o)
}

fn eval(a: &EvalArgs) -> Result<Outputs> {
    let basis = load_basis(&a.basis)?;
    let (world_config, world) = load_world(&a.world, Some(&basis))?;
    let net = load_checkpoint(&a.checkpoint)?;
    let check = TrainConfig {
        lens: net.config().clone(),
        ..TrainConfig::default()
    };
    check.check_world(&world)?;
    let noise_basis = check.noise_basis(&basis)?;
    let prompts: Vec<usize> = (0..world.n_prompts()).collect();
    let report = evaluate(
        &net,
        &world,
        &noise_basis,
        &prompts,
        a.n_noise,
        &mut RngState::new(a.seed),
    )?;
    ensure_parent(&a.out)?;
    write_json(
        &a.out,
        &EvalOutput {
            gap_closed: report.gap_closed(),
            report: &report,
        },
    )?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.seed("eval", a.seed);
    o.seed("world", world_config.seed);
    o.config = Some(json!({ "n_noise": a.n_noise, "lens": net.config(), "world": world_config }));
    o.file(a.out.clone());
    Ok(o)
}

#[derive(Serialize)]
pub struct BenchReport {
    pub complexity: ComplexityReport,
    pub lens_params: usize,
    pub generator_params: usize,
    pub param_ratio: f64,
    pub fit_ok: bool,
    pub pass: bool,
}

/// Complexity fit plus the lens/generator parameter budget of the default world.
pub fn bench_report(
    base: &LensConfig,
    grid: &[(usize, usize, usize)],
    reps: usize,
) -> Result<BenchReport> {
    let world_config = WorldConfig::default();
    let complexity = complexity_bench(base, grid, world_config.prompt_tokens, reps)?;
    let generator_params = World::build(&world_config, None)?.generator().param_count();
    let lens_params = LensConfig {
        n_tokens: world_config.geometry()?.n_patches(),
        embed_dim: world_config.embed_dim,
        ..LensConfig::default()
    }
    .param_count();
    let param_ratio = lens_params as f64 / generator_params as f64;
    let fit_ok = complexity.fit.max_relative_residual < FIT_RESIDUAL_MAX;
    let pass = fit_ok
        && complexity.attention_quadruples
        && complexity.counts_match_tape
        && param_ratio < PARAM_RATIO_MAX;
    Ok(BenchReport {
        complexity,
        lens_params,
        generator_params,
        param_ratio,
        fit_ok,
        pass,
    })
}

fn bench(a: &BenchArgs) -> Result<Outputs> {
    let grid: Vec<_> = a
        .tokens
        .iter()
        .flat_map(|&n| a.hidden.iter().map(move |&h| (n, a.k, h)))
        .collect();
    let report = bench_report(&LensConfig::default(), &grid, a.reps)?;
    ensure_parent(&a.out)?;
    write_json(&a.out, &report)?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.config = Some(json!({ "grid": grid, "reps": a.reps }));
    o.volatile_file(a.out.clone());
    if !report.pass {
        o.failure = Some(format!("complexity checks failed; see {}", a.out.display()));
    }
    Ok(o)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn verify(a: &VerifyArgs) -> Result<Outputs> {
    ensure_parent(&a.out)?;
    let mut o = Outputs::new(manifest_for_file(&a.out));
    o.seed("suite", a.seed);
    let suite = format!("{:?}", a.suite).to_lowercase();
    let mut config = json!({ "suite": suite });
    let pass = match a.suite {
        Suite::Prop1 => {
            let r = run_prop1_suite(a.seed)?;
            write_json(&a.out, &r)?;
            r.pass
        }
        Suite::Stein => {
            let n = a.samples.unwrap_or(STEIN_SAMPLES);
            config["samples"] = n.into();
            let r = run_stein_suite(n, a.seed)?;
            write_json(&a.out, &r)?;
            r.pass
        }
        Suite::Kl => {
            let n = a.samples.unwrap_or(KL_MC_SAMPLES);
            config["samples"] = n.into();
            let r = run_kl_suite(n, a.seed)?;
            write_json(&a.out, &r)?;
            r.pass
        }
        Suite::Objective => {
            let basis = match &a.basis {
                Some(p) => load_basis(p)?,
                None => default_basis(a.seed)?,
            };
            let world_config = WorldConfig {
                seed: a.seed,
                ..WorldConfig::for_basis(&basis, WorldKind::Generic)
            };
            let world = World::build(&world_config, Some(&basis))?;
            let lens = LensConfig {
                n_tokens: world.geometry().n_patches(),
                embed_dim: world_config.embed_dim,
                coeff_dim: LensConfig::default().coeff_dim.min(basis.dim()),
                ..LensConfig::default()
            };
            config["world"] = serde_json::to_value(&world_config)?;
            config["lens"] = serde_json::to_value(&lens)?;
            config["offsets"] = serde_json::to_value(OBJECTIVE_OFFSETS)?;
            let mut rng = RngState::with_stream(a.seed, 1);
            let r =
                verify_objective_identity(&world, &basis, &lens, &OBJECTIVE_OFFSETS, 8, &mut rng)?;
            write_json(&a.out, &r)?;
            r.pass
        }
        Suite::Spectrum => {
            let basis = match &a.basis {
                Some(p) => load_basis(p)?,
                None => default_basis(a.seed)?,
            };
            let n = a.samples.unwrap_or(SPECTRUM_IMAGES);
            config["images"] = n.into();
            config["j"] = a.j.into();
            let r = run_spectrum_suite(&basis, a.j, n, a.seed)?;
            write_json(&a.out, &r)?;
            for (name, spectrum) in [("lowfreq.csv", &r.lowfreq), ("isotropic.csv", &r.isotropic)] {
                let path = with_suffix(&a.out, name);
                write_atomic(&path, spectrum.to_csv()?.as_bytes())?;
                o.file(path);
            }
            r.pass
        }
        Suite::Bench => {
            let r = bench_report(
                &LensConfig::default(),
                &default_grid(LensConfig::default().coeff_dim),
                3,
            )?;
            write_json(&a.out, &r)?;
            o.volatile_file(a.out.clone());
            r.pass
        }
    };
    if a.suite != Suite::Bench {
        o.artifacts.insert(0, (a.out.clone(), true));
    }
    o.config = Some(config);
    if !pass {
        o.failure = Some(format!(
            "{suite} verification failed; see {}",
            a.out.display()
        ));
    }
    Ok(o)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let old = load_manifest(&a.manifest)?;
    let cli = crate::args::Cli::try_parse_from(
        std::iter::once("lens".to_owned()).chain(old.args.iter().cloned()),
    )
    .map_err(|e| LensError::Config(format!("stored arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(LensError::Config("a replay manifest cannot be replayed".into()).into());
    }
    run(&cli.command, &old.args)?;
    let mut checked = 0;
    let mut mismatched = Vec::new();
    for art in old.artifacts.iter().filter(|a| a.deterministic) {
        let now = artifact(&art.path, true)?;
        checked += 1;
        if now.sha256 != art.sha256 {
            mismatched.push(art.path.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(CheckFailed(format!(
            "replay produced different bytes for: {}",
            mismatched.join(", ")
        ))
        .into());
    }
    println!(
        "replayed `{}`: {checked} artifacts bit-identical",
        old.command
    );
    Ok(())
}
