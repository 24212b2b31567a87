use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::numerics::RngState;
use crate::theory::{KlMethod, KlReport};

/// Added to 2ε when judging a quadrature KL.
pub const QUADRATURE_TOL: f64 = 1e-4;
/// Allowed deviation of the prior's Riemann sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-4;
pub const GRID_HALF_WIDTH: f64 = 6.0;
pub const MAX_GRID_DIM: usize = 4;

/// Density values on a product grid with equal spacing per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the axes, last axis fastest.
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl GridDensity {
    pub fn from_fn(axes: Vec<Vec<f64>>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.len() < 2) {
            return Err(LensError::invalid(
                "grid needs at least one axis of ≥ 2 points",
            ));
        }
        let total: usize = axes.iter().map(Vec::len).product();
        let mut values = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes.len()];
        let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
        for _ in 0..total {
            let v = f(&point);
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LensError::Numerical(format!(
                    "density value {v} at {point:?}"
                )));
            }
            values.push(v);
            for ax in (0..axes.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < axes[ax].len() {
                    point[ax] = axes[ax][idx[ax]];
                    break;
                }
                idx[ax] = 0;
                point[ax] = axes[ax][0];
            }
        }
        Ok(Self {
            axes,
            values,
            normalized: false,
        })
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a[1] - a[0]).product()
    }

    pub fn riemann_sum(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Divides by the Riemann sum; returns that normalizing constant.
    pub fn normalize(&mut self) -> Result<f64> {
        let z = self.riemann_sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(LensError::Numerical(format!("normalizing constant {z}")));
        }
        for v in &mut self.values {
            *v /= z;
        }
        self.normalized = true;
        Ok(z)
    }

    /// Σ p log(p/q) ΔV over cells where p > 0.
    pub fn kl_to(&self, other: &GridDensity) -> Result<f64> {
        if self.axes != other.axes {
            return Err(LensError::invalid("densities live on different grids"));
        }
        let mut acc = 0.0;
        for (&p, &q) in self.values.iter().zip(&other.values) {
            if p > 0.0 {
                if q <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                acc += p * (p / q).ln();
            }
        }
        Ok(acc * self.cell_volume())
    }
}

pub fn uniform_axis(points: usize, half_width: f64) -> Vec<f64> {
    let step = 2.0 * half_width / (points - 1) as f64;
    (0..points).map(|i| -half_width + i as f64 * step).collect()
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// The low-frequency part r̄(w_L) of a grid reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LowReward {
    /// −scale·‖w_L‖².
    NegQuadratic { scale: f64 },
    /// Σ_i a_i cos(b_i w_L,i + c_i).
    Cosine {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    },
}

impl LowReward {
    fn eval(&self, w: &[f64]) -> f64 {
        match self {
            LowReward::NegQuadratic { scale } => -scale * w.iter().map(|x| x * x).sum::<f64>(),
            LowReward::Cosine { a, b, c } => w
                .iter()
                .enumerate()
                .map(|(i, x)| a[i % a.len()] * (b[i % b.len()] * x + c[i % c.len()]).cos())
                .sum(),
        }
    }
}

/// The perturbation δ(w), with |δ| ≤ ε everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Perturbation {
    Zero,
    /// ε·sin(first high coordinate).
    SinHigh,
    /// ε·tanh(sharpness·w_H,0), a smoothed sign.
    SignLike {
        sharpness: f64,
    },
    /// ε·Σ_m u_m cos(fᵀ_m w + p_m) with Σ|u_m| = 1.
    RandomCosines {
        weights: Vec<f64>,
        freqs: Vec<Vec<f64>>,
        phases: Vec<f64>,
    },
}

impl Perturbation {
    pub fn random_cosines(dim: usize, terms: usize, rng: &mut RngState) -> Self {
        let raw: Vec<f64> = (0..terms).map(|_| rng.normal()).collect();
        let l1: f64 = raw.iter().map(|v| v.abs()).sum();
        Perturbation::RandomCosines {
            weights: raw.iter().map(|v| v / l1).collect(),
            freqs: (0..terms).map(|_| rng.normals(dim)).collect(),
            phases: (0..terms)
                .map(|_| rng.uniform_range(0.0, std::f64::consts::TAU))
                .collect(),
        }
    }

    fn eval(&self, eps: f64, w: &[f64], k: usize) -> f64 {
        match self {
            Perturbation::Zero => 0.0,
            Perturbation::SinHigh => eps * w[k].sin(),
            Perturbation::SignLike { sharpness } => eps * (sharpness * w[k]).tanh(),
            Perturbation::RandomCosines {
                weights,
                freqs,
                phases,
            } => {
                eps * weights
                    .iter()
                    .zip(freqs)
                    .zip(phases)
                    .map(|((u, f), p)| {
                        u * (f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + p).cos()
                    })
                    .sum::<f64>()
            }
        }
    }
}

/// One grid instance: w ∈ R^dim, the first `k` coordinates low-frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Instance {
    pub dim: usize,
    pub k: usize,
    pub epsilon: f64,
    pub points_per_axis: usize,
    pub low: LowReward,
    pub delta: Perturbation,
}

/// Grid-quadrature KL(q* ‖ q̃*) for r = r̄(w_L) + δ(w), judged against 2ε.
pub fn verify_prop1(inst: &Prop1Instance) -> Result<KlReport> {
    if inst.dim == 0 || inst.dim > MAX_GRID_DIM {
        return Err(LensError::invalid(format!(
            "grid oracle supports 1..={MAX_GRID_DIM} dimensions, got {}",
            inst.dim
        )));
    }
    if inst.k == 0 || inst.k >= inst.dim {
        return Err(LensError::invalid(format!(
            "need 1 ≤ k < dim, got k={} dim={}",
            inst.k, inst.dim
        )));
    }
    if !(inst.epsilon >= 0.0) {
        return Err(LensError::invalid("ε must be ≥ 0"));
    }
    if inst.points_per_axis < 2 {
        return Err(LensError::invalid(
            "grid too coarse: need ≥ 2 points per axis",
        ));
    }
    let axes = vec![uniform_axis(inst.points_per_axis, GRID_HALF_WIDTH); inst.dim];
    let prior = |w: &[f64]| w.iter().map(|&x| std_normal_pdf(x)).product::<f64>();
    let q = GridDensity::from_fn(axes.clone(), prior)?;
    let mass = q.riemann_sum();
    if (mass - 1.0).abs() > NORMALIZATION_TOL {
        return Err(LensError::InvalidInput(format!(
            "grid too coarse: prior integrates to {mass}"
        )));
    }
    let k = inst.k;
    let mut full = GridDensity::from_fn(axes.clone(), |w| {
        prior(w) * (inst.low.eval(&w[..k]) + inst.delta.eval(inst.epsilon, w, k)).exp()
    })?;
    let mut tilted_low = GridDensity::from_fn(axes, |w| prior(w) * inst.low.eval(&w[..k]).exp())?;
    full.normalize()?;
    tilted_low.normalize()?;
    let kl = full.kl_to(&tilted_low)?.max(0.0);
    let bound = 2.0 * inst.epsilon;
    Ok(KlReport {
        method: KlMethod::Grid,
        exact: kl,
        approx: None,
        bound,
        tolerance: QUADRATURE_TOL,
        pass: kl <= bound + QUADRATURE_TOL,
        monte_carlo: None,
    })
}
