use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, jacobian_vector_product, Tape, Var};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITER: usize = 100;
/// Consecutive growing steps that count as divergence.
pub const DIVERGENCE_STREAK: usize = 10;
const START_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub estimate: f64,
    pub iterations: usize,
    /// |σ_t − σ_{t−1}| at the last iteration.
    pub residual: f64,
    pub converged: bool,
    /// Unit input direction of the last JVP.
    pub direction: Tensor,
}

/// Power iteration on JᵀJ for the Jacobian of `f` at `probe`, using one JVP
/// and one reverse pass per iteration.
pub fn spectral_norm<F>(f: F, probe: &Tensor, tol: f64, max_iter: usize) -> Result<SpectralReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !probe.is_finite() {
        return Err(LensError::Numerical("spectral probe is not finite".into()));
    }
    let mut tape = Tape::new();
    let x = tape.var(probe.clone());
    let out = f(&mut tape, x)?;
    let mut rng = RngState::new(START_SEED);
    let mut v = Tensor::new(probe.shape().to_vec(), rng.normals(probe.len()))?;
    v = v.scale(1.0 / v.frobenius_norm());
    let mut sigma = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let u = jacobian_vector_product(&tape, &[(x, v.clone())], out)?;
        let next = u.frobenius_norm();
        if !next.is_finite() {
            return Err(LensError::Numerical(format!(
                "non-finite JVP norm at iteration {it}"
            )));
        }
        if next == 0.0 {
            return Ok(SpectralReport {
                estimate: 0.0,
                iterations: it,
                residual: 0.0,
                converged: true,
                direction: v,
            });
        }
        residual = (next - sigma).abs();
        sigma = next;
        if residual < tol {
            return Ok(SpectralReport {
                estimate: sigma,
                iterations: it,
                residual,
                converged: true,
                direction: v,
            });
        }
        let grads = backward(&tape, out, &u)?;
        let w = grads.get_or_zero(&tape, x);
        let norm = w.frobenius_norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(LensError::Numerical(format!(
                "degenerate transpose product at iteration {it}"
            )));
        }
        v = w.scale(1.0 / norm);
    }
    Ok(SpectralReport {
        estimate: sigma,
        iterations: max_iter,
        residual,
        converged: false,
        direction: v,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub solution: Tensor,
    pub iterations: usize,
    /// ‖Δx‖∞ per iteration.
    pub steps: Vec<f64>,
    /// Spectral norm of J_h measured at the target.
    pub spectral_norm: f64,
    pub warning: Option<String>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

/// Solves x + h(x) = target by x ← target − h(x).
pub fn invert_fixed_point<F>(
    f: F,
    target: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<InversionReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(tol > 0.0) || max_iter == 0 {
        return Err(LensError::invalid(
            "inversion needs tol > 0 and max_iter ≥ 1",
        ));
    }
    let measured = spectral_norm(&f, target, SPECTRAL_TOL, SPECTRAL_MAX_ITER)?.estimate;
    let warning = (measured >= 1.0).then(|| {
        format!("measured spectral norm {measured:.4} ≥ 1; contraction is not guaranteed")
    });
    let mut x = target.clone();
    let mut steps = Vec::new();
    let mut streak = 0;
    for it in 1..=max_iter {
        let next = match eval(&f, &x).and_then(|h| target.sub(&h)) {
            Ok(n) if n.is_finite() => n,
            Ok(_) | Err(LensError::Numerical(_)) => {
                return Err(LensError::Divergence {
                    iterations: it,
                    spectral_norm: measured,
                })
            }
            Err(e) => return Err(e),
        };
        let step = next.max_abs_diff(&x);
        x = next;
        if let Some(&prev) = steps.last() {
            streak = if step > prev { streak + 1 } else { 0 };
        }
        steps.push(step);
        if step < tol {
            return Ok(InversionReport {
                solution: x,
                iterations: it,
                steps,
                spectral_norm: measured,
                warning,
            });
        }
        if streak >= DIVERGENCE_STREAK {
            return Err(LensError::Divergence {
                iterations: it,
                spectral_norm: measured,
            });
        }
    }
    Err(LensError::NonConvergence {
        iterations: max_iter,
        residual: steps.last().copied().unwrap_or(f64::NAN),
    })
}
