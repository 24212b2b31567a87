//! Standard instance sets for each verification, as run by the CLI and the
//! acceptance tests.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::PatchBasis;
use crate::error::{LensError, Result};
use crate::net::{LensConfig, LensNet, PromptBatch};
use crate::numerics::{RngState, Tensor};
use crate::theory::{
    gradient_energy_spectrum, verify_prop1, verify_quadratic_kl, verify_stein,
    GradientEnergySpectrum, KlReport, LowReward, Perturbation, Prop1Instance, SteinReport,
};
use crate::world::{make_lowfreq_world, World, WorldConfig, WorldKind};

pub const PROP1_EPSILONS: [f64; 3] = [0.05, 0.1, 0.5];
pub const KL_EPSILONS: [f64; 6] = [0.01, 0.05, 0.1, 0.3, 0.5, 0.9];
pub const KL_DIMS: [usize; 3] = [1, 4, 16];
/// Largest allowed |ρ_k − k/d| for the isotropic control.
pub const ISOTROPY_TOL: f64 = 0.03;

fn points_for(dim: usize) -> usize {
    match dim {
        1 | 2 => 400,
        3 => 160,
        _ => 48,
    }
}

/// Eleven grid instances over d ∈ {2, 3, 4}, every ε in [`PROP1_EPSILONS`],
/// and perturbations from smooth to nearly discontinuous.
pub fn prop1_instances(seed: u64) -> Vec<Prop1Instance> {
    let mut rng = RngState::new(seed);
    let quad = LowReward::NegQuadratic { scale: 1.0 };
    let cosine = |rng: &mut RngState, k: usize| LowReward::Cosine {
        a: rng.normals(k),
        b: rng.normals(k),
        c: rng.normals(k),
    };
    let sign = Perturbation::SignLike { sharpness: 40.0 };
    let specs: Vec<(usize, usize, f64, LowReward, Perturbation)> = vec![
        (2, 1, 0.1, quad.clone(), Perturbation::SinHigh),
        (2, 1, 0.1, quad.clone(), Perturbation::Zero),
        (2, 1, 0.05, quad.clone(), sign.clone()),
        (
            2,
            1,
            0.5,
            cosine(&mut rng, 1),
            Perturbation::random_cosines(2, 4, &mut rng),
        ),
        (3, 1, 0.05, quad.clone(), Perturbation::SinHigh),
        (3, 2, 0.1, cosine(&mut rng, 2), sign.clone()),
        (
            3,
            2,
            0.5,
            quad.clone(),
            Perturbation::random_cosines(3, 4, &mut rng),
        ),
        (
            3,
            1,
            0.5,
            cosine(&mut rng, 1),
            Perturbation::random_cosines(3, 6, &mut rng),
        ),
        (
            4,
            2,
            0.05,
            cosine(&mut rng, 2),
            Perturbation::random_cosines(4, 4, &mut rng),
        ),
        (4, 2, 0.1, quad.clone(), Perturbation::SinHigh),
        (4, 3, 0.5, quad, sign),
    ];
    specs
        .into_iter()
        .map(|(dim, k, epsilon, low, delta)| Prop1Instance {
            dim,
            k,
            epsilon,
            points_per_axis: points_for(dim),
            low,
            delta,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    pub instance: Prop1Instance,
    pub report: KlReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Suite {
    pub results: Vec<Prop1Result>,
    pub pass: bool,
}

pub fn run_prop1_suite(seed: u64) -> Result<Prop1Suite> {
    let results = prop1_instances(seed)
        .into_iter()
        .map(|instance| {
            let report = verify_prop1(&instance)?;
            Ok(Prop1Result { instance, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = results.iter().all(|r| r.report.pass);
    Ok(Prop1Suite { results, pass })
}

/// A map h for the Stein check, applied row-block-wise.
#[derive(Clone, Debug)]
pub enum SteinCase {
    Zero {
        dim: usize,
    },
    Linear {
        a_t: Tensor,
    },
    Affine {
        a_t: Tensor,
        b: Tensor,
    },
    TanhLinear {
        a_t: Tensor,
    },
    /// w ∘ σ(w).
    Silu {
        dim: usize,
    },
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    Lens {
        net: Arc<LensNet>,
        prompt: Tensor,
    },
}

impl SteinCase {
    pub fn name(&self) -> String {
        match self {
            SteinCase::Zero { .. } => "zero".into(),
            SteinCase::Linear { .. } => "linear".into(),
            SteinCase::Affine { .. } => "affine".into(),
            SteinCase::TanhLinear { .. } => "tanh_linear".into(),
            SteinCase::Silu { .. } => "silu".into(),
            SteinCase::Mlp { w1, .. } => format!("mlp_{}x{}", w1.rows(), w1.cols()),
            SteinCase::Lens { net, .. } => {
                format!("lens_{}x{}", net.config().n_tokens, net.config().coeff_dim)
            }
        }
    }

    pub fn sample_shape(&self) -> [usize; 2] {
        match self {
            SteinCase::Zero { dim } | SteinCase::Silu { dim } => [1, *dim],
            SteinCase::Linear { a_t }
            | SteinCase::Affine { a_t, .. }
            | SteinCase::TanhLinear { a_t } => [1, a_t.rows()],
            SteinCase::Mlp { w1, .. } => [1, w1.rows()],
            SteinCase::Lens { net, .. } => [net.config().n_tokens, net.config().coeff_dim],
        }
    }

    /// E Tr J when it is known in closed form.
    pub fn analytic_trace(&self) -> Option<f64> {
        match self {
            SteinCase::Zero { .. } => Some(0.0),
            SteinCase::Linear { a_t } | SteinCase::Affine { a_t, .. } => {
                Some((0..a_t.rows()).map(|i| a_t.get(i, i)).sum())
            }
            _ => None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(Arc::new(t.clone()), false);
        match self {
            SteinCase::Zero { .. } => tape.scale(x, 0.0),
            SteinCase::Linear { a_t } => {
                let a = leaf(tape, a_t);
                tape.matmul(x, a)
            }
            SteinCase::Affine { a_t, b } => {
                let (a, b) = (leaf(tape, a_t), leaf(tape, b));
                let y = tape.matmul(x, a)?;
                tape.add_row(y, b)
            }
            SteinCase::TanhLinear { a_t } => {
                let a = leaf(tape, a_t);
                let y = tape.matmul(x, a)?;
                tape.tanh(y)
            }
            SteinCase::Silu { .. } => {
                let s = tape.sigmoid(x)?;
                tape.mul(x, s)
            }
            SteinCase::Mlp { w1, b1, w2, b2 } => {
                let (w1, b1, w2, b2) = (
                    leaf(tape, w1),
                    leaf(tape, b1),
                    leaf(tape, w2),
                    leaf(tape, b2),
                );
                let y = tape.matmul(x, w1)?;
                let y = tape.add_row(y, b1)?;
                let y = tape.tanh(y)?;
                let y = tape.matmul(y, w2)?;
                tape.add_row(y, b2)
            }
            SteinCase::Lens { net, prompt } => {
                let n = net.config().n_tokens;
                let b = tape.shape(x)[0] / n;
                let embs = vec![prompt; b];
                let batch = PromptBatch::from_embeddings(&embs)?;
                let bound = net.bind(tape, false);
                net.forward_on_tape(tape, &bound, x, &batch)
            }
        }
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Result<Tensor> {
    Tensor::matrix(
        rows,
        cols,
        rng.normals(rows * cols)
            .into_iter()
            .map(|v| v * scale)
            .collect(),
    )
}

/// Five analytic maps, nineteen random MLPs and one random lens network.
pub fn stein_cases(seed: u64) -> Result<Vec<SteinCase>> {
    let mut rng = RngState::with_stream(seed, 1);
    let n = 6;
    let s = 1.0 / (n as f64).sqrt();
    let mut cases = vec![
        SteinCase::Zero { dim: n },
        SteinCase::Linear {
            a_t: gaussian(n, n, s, &mut rng)?,
        },
        SteinCase::Affine {
            a_t: gaussian(n, n, s, &mut rng)?,
            b: gaussian(1, n, 1.0, &mut rng)?,
        },
        SteinCase::TanhLinear {
            a_t: gaussian(n, n, 2.0 * s, &mut rng)?,
        },
        SteinCase::Silu { dim: n },
    ];
    for i in 0..19 {
        let dim = 2 + i % 7;
        let hidden = 8 + 4 * (i % 3);
        cases.push(SteinCase::Mlp {
            w1: gaussian(dim, hidden, 1.0 / (dim as f64).sqrt(), &mut rng)?,
            b1: gaussian(1, hidden, 0.5, &mut rng)?,
            w2: gaussian(hidden, dim, 1.0 / (hidden as f64).sqrt(), &mut rng)?,
            b2: gaussian(1, dim, 0.5, &mut rng)?,
        });
    }
    let cfg = LensConfig {
        n_tokens: 4,
        coeff_dim: 4,
        hidden: 8,
        n_layers: 1,
        n_heads: 2,
        embed_dim: 4,
        gate_init_logit: 0.0,
    };
    let params = cfg
        .layout()
        .into_iter()
        .map(|(_, [r, c])| gaussian(r, c, 0.5 / (r as f64).sqrt(), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    cases.push(SteinCase::Lens {
        net: Arc::new(LensNet::from_params(cfg, params)?),
        prompt: gaussian(3, 4, 1.0, &mut rng)?,
    });
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinResult {
    pub report: SteinReport,
    pub analytic_trace: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinSuite {
    pub results: Vec<SteinResult>,
    pub pass: bool,
}

/// Each case gets its own RNG stream.
pub fn run_stein_suite(n_samples: usize, seed: u64) -> Result<SteinSuite> {
    let results = stein_cases(seed)?
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = RngState::with_stream(seed, 100 + i as u64);
            let batch = if matches!(case, SteinCase::Lens { .. }) {
                16
            } else {
                512
            };
            let report = verify_stein(
                &case.name(),
                |t, x| case.apply(t, x),
                case.sample_shape(),
                n_samples,
                batch,
                &mut rng,
            )?;
            Ok(SteinResult {
                report,
                analytic_trace: case.analytic_trace(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = results.iter().all(|r| {
        r.report.pass
            && r.analytic_trace
                .is_none_or(|t| (r.report.rhs - t).abs() <= 1e-10 * t.abs().max(1.0))
    });
    Ok(SteinSuite { results, pass })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlCase {
    pub epsilon: f64,
    pub dim: usize,
    pub report: KlReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSuite {
    pub cases: Vec<KlCase>,
    pub violations: usize,
    pub mc_failures: usize,
    pub pass: bool,
}

pub fn run_kl_suite(mc_samples: usize, seed: u64) -> Result<KlSuite> {
    let mut cases = Vec::new();
    for (i, &dim) in KL_DIMS.iter().enumerate() {
        for (j, &epsilon) in KL_EPSILONS.iter().enumerate() {
            let mut rng = RngState::with_stream(seed, (i * KL_EPSILONS.len() + j) as u64);
            let report = verify_quadratic_kl(epsilon, dim, Some((mc_samples, &mut rng)))?;
            cases.push(KlCase {
                epsilon,
                dim,
                report,
            });
        }
    }
    let violations = cases
        .iter()
        .filter(|c| (c.report.exact - c.report.approx.unwrap_or(f64::NAN)).abs() > c.report.bound)
        .count();
    let mc_failures = cases
        .iter()
        .filter(|c| c.report.monte_carlo.as_ref().is_some_and(|m| !m.pass))
        .count();
    Ok(KlSuite {
        pass: violations == 0 && mc_failures == 0,
        cases,
        violations,
        mc_failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSuite {
    pub j: usize,
    pub lowfreq: GradientEnergySpectrum,
    /// ρ_j == 1 and E_m == 0 for every m > j, both exactly.
    pub lowfreq_exact: bool,
    pub isotropic: GradientEnergySpectrum,
    pub isotropic_deviation: f64,
    pub pass: bool,
}

/// Spectrum of `make_lowfreq_world(basis, j)` and of the isotropic control,
/// each over `n_images` images (N patches per image).
pub fn run_spectrum_suite(
    basis: &PatchBasis,
    j: usize,
    n_images: usize,
    seed: u64,
) -> Result<SpectrumSuite> {
    let d = basis.dim();
    if j == 0 || j > d {
        return Err(LensError::invalid(format!("j={j} must lie in 1..={d}")));
    }
    let world = make_lowfreq_world(basis, j)?;
    let prompts: Vec<usize> = (0..world.n_prompts()).collect();
    let lowfreq = gradient_energy_spectrum(
        &world,
        basis,
        &prompts,
        n_images,
        &mut RngState::with_stream(seed, 1),
    )?;
    let lowfreq_exact = lowfreq.rho[j - 1] == 1.0 && lowfreq.energy[j..].iter().all(|&e| e == 0.0);
    let iso_world = World::build(
        &WorldConfig::for_basis(basis, WorldKind::Isotropic),
        Some(basis),
    )?;
    let isotropic = gradient_energy_spectrum(
        &iso_world,
        basis,
        &[0],
        n_images,
        &mut RngState::with_stream(seed, 2),
    )?;
    let isotropic_deviation = isotropic.isotropy_deviation();
    Ok(SpectrumSuite {
        j,
        pass: lowfreq_exact && isotropic_deviation < ISOTROPY_TOL && lowfreq.rho[d - 1] == 1.0,
        lowfreq,
        lowfreq_exact,
        isotropic,
        isotropic_deviation,
    })
}
