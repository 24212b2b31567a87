use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMethod {
    Analytic,
    Grid,
    ChangeOfVariables,
}

/// Monte Carlo witness for an exact value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCheck {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// |estimate − exact| ≤ 3 SE.
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub method: KlMethod,
    pub exact: f64,
    pub approx: Option<f64>,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub monte_carlo: Option<McCheck>,
}

/// n(−log(1−M) − M).
pub fn quadratic_kl_bound(n: usize, m: f64) -> f64 {
    n as f64 * (-(1.0 - m).ln() - m)
}

/// KL(N(0,(1+ε)²I_n) ‖ N(0,I_n)), the pushforward of w ↦ (1+ε)w.
pub fn linear_pushforward_kl(eps: f64, n: usize) -> f64 {
    let s = 1.0 + eps;
    0.5 * n as f64 * (s * s - 1.0 - 2.0 * s.ln())
}

/// Exact vs quadratic KL for h(w) = ε·w on R^n, optionally witnessed by a
/// change-of-variables Monte Carlo estimate with `mc = (samples, rng)`.
pub fn verify_quadratic_kl(
    eps: f64,
    n: usize,
    mc: Option<(usize, &mut RngState)>,
) -> Result<KlReport> {
    if !(0.0..1.0).contains(&eps) {
        return Err(LensError::invalid(format!(
            "ε_lin = {eps} outside [0, 1); the residual map is not a contraction"
        )));
    }
    if n == 0 {
        return Err(LensError::invalid("dimension must be ≥ 1"));
    }
    let exact = linear_pushforward_kl(eps, n);
    let approx = 0.5 * n as f64 * eps * eps;
    let bound = quadratic_kl_bound(n, eps);
    let monte_carlo = match mc {
        Some((samples, rng)) => Some(mc_pushforward_kl(eps, n, samples, rng, exact)?),
        None => None,
    };
    let pass = (exact - approx).abs() <= bound && monte_carlo.as_ref().is_none_or(|m| m.pass);
    Ok(KlReport {
        method: KlMethod::Analytic,
        exact,
        approx: Some(approx),
        bound,
        tolerance: 0.0,
        pass,
        monte_carlo,
    })
}

/// E_w[log p(T w) − log q(T w)] with log p(T w) = log q(w) − log|det J_T|.
fn mc_pushforward_kl(
    eps: f64,
    n: usize,
    samples: usize,
    rng: &mut RngState,
    exact: f64,
) -> Result<McCheck> {
    if samples < 2 {
        return Err(LensError::invalid("Monte Carlo check needs ≥ 2 samples"));
    }
    let s = 1.0 + eps;
    let log_det = n as f64 * s.ln();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let w2: f64 = rng.normals(n).iter().map(|v| v * v).sum();
        let log_q_w = -0.5 * w2;
        let log_q_tw = -0.5 * s * s * w2;
        let v = log_q_w - log_det - log_q_tw;
        sum += v;
        sum_sq += v * v;
    }
    let m = samples as f64;
    let estimate = sum / m;
    let var = ((sum_sq - m * estimate * estimate) / (m - 1.0)).max(0.0);
    let std_error = (var / m).sqrt();
    Ok(McCheck {
        estimate,
        std_error,
        n_samples: samples,
        pass: (estimate - exact).abs() <= 3.0 * std_error + 1e-12 * exact.abs().max(1.0),
    })
}
