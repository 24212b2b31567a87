use serde::{Deserialize, Serialize};

use crate::autodiff::{jacobian_vector_product, Tape, Var};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

/// Above this input size the trace switches to Hutchinson probes.
pub const EXACT_TRACE_MAX_DIM: usize = 256;
pub const HUTCHINSON_PROBES: usize = 256;
/// Pass threshold in combined standard errors.
pub const STEIN_SIGMAS: f64 = 4.0;
const GROWTH_SCALES: [f64; 2] = [1e2, 1e3];
const GROWTH_DIRECTIONS: usize = 4;
/// ‖h(10³u)‖/‖h(10²u)‖ above this is treated as superlinear growth.
const GROWTH_RATIO_MAX: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceMethod {
    Exact,
    Hutchinson { probes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinReport {
    pub name: String,
    pub n_samples: usize,
    pub dim: usize,
    /// E⟨w, h(w)⟩.
    pub lhs: f64,
    pub lhs_se: f64,
    /// E Tr J_h(w).
    pub rhs: f64,
    pub rhs_se: f64,
    pub combined_se: f64,
    /// |lhs − rhs| / combined_se, 0 when both sides agree exactly.
    pub z_score: f64,
    pub trace: TraceMethod,
    /// Largest ‖h(10³u)‖/‖h(10²u)‖ over random directions.
    pub growth_ratio: f64,
    pub pass: bool,
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn mean_se(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }
}

/// Monte Carlo check of E⟨w, h(w)⟩ = E Tr J_h(w) for w ~ N(0, I).
///
/// `h` receives a (B·rows)×cols leaf holding B stacked samples and must act
/// on each rows-block independently, so its Jacobian is block diagonal.
pub fn verify_stein<F>(
    name: &str,
    h: F,
    sample_shape: [usize; 2],
    n_samples: usize,
    batch: usize,
    rng: &mut RngState,
) -> Result<SteinReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let [rows, cols] = sample_shape;
    let dim = rows * cols;
    if dim == 0 || n_samples < 2 || batch == 0 {
        return Err(LensError::invalid(
            "Stein check needs dim ≥ 1, n ≥ 2, batch ≥ 1",
        ));
    }
    let growth_ratio = growth_probe(&h, sample_shape, &mut rng.split(u64::MAX))?;
    let trace = if dim <= EXACT_TRACE_MAX_DIM {
        TraceMethod::Exact
    } else {
        TraceMethod::Hutchinson {
            probes: HUTCHINSON_PROBES,
        }
    };
    let mut probe_rng = rng.split(u64::MAX - 1);
    let mut lhs = Moments::default();
    let mut rhs = Moments::default();
    let mut done = 0;
    while done < n_samples {
        let b = batch.min(n_samples - done);
        let w = Tensor::matrix(b * rows, cols, rng.normals(b * dim))?;
        let mut tape = Tape::new();
        let x = tape.var(w.clone());
        let out = h(&mut tape, x)?;
        if tape.shape(out) != [b * rows, cols] {
            return Err(LensError::shape(
                "stein map",
                &[b * rows, cols],
                tape.shape(out),
            ));
        }
        let hv = tape.value(out).data();
        for s in 0..b {
            let r = s * dim..(s + 1) * dim;
            lhs.push(
                w.data()[r.clone()]
                    .iter()
                    .zip(&hv[r])
                    .map(|(a, c)| a * c)
                    .sum(),
            );
        }
        let mut traces = vec![0.0; b];
        match trace {
            TraceMethod::Exact => {
                for j in 0..dim {
                    let mut t = vec![0.0; b * dim];
                    for s in 0..b {
                        t[s * dim + j] = 1.0;
                    }
                    let jv = jacobian_vector_product(
                        &tape,
                        &[(x, Tensor::matrix(b * rows, cols, t)?)],
                        out,
                    )?;
                    for (s, tr) in traces.iter_mut().enumerate() {
                        *tr += jv.data()[s * dim + j];
                    }
                }
            }
            TraceMethod::Hutchinson { probes } => {
                for _ in 0..probes {
                    let v: Vec<f64> = (0..b * dim).map(|_| probe_rng.rademacher()).collect();
                    let jv = jacobian_vector_product(
                        &tape,
                        &[(x, Tensor::matrix(b * rows, cols, v.clone())?)],
                        out,
                    )?;
                    for (s, tr) in traces.iter_mut().enumerate() {
                        let r = s * dim..(s + 1) * dim;
                        *tr += v[r.clone()]
                            .iter()
                            .zip(&jv.data()[r])
                            .map(|(a, c)| a * c)
                            .sum::<f64>()
                            / probes as f64;
                    }
                }
            }
        }
        traces.into_iter().for_each(|t| rhs.push(t));
        done += b;
    }
    let (l, lse) = lhs.mean_se();
    let (r, rse) = rhs.mean_se();
    let combined = (lse * lse + rse * rse).sqrt();
    let diff = (l - r).abs();
    let z_score = if diff == 0.0 { 0.0 } else { diff / combined };
    let growth_ok = growth_ratio <= GROWTH_RATIO_MAX;
    Ok(SteinReport {
        name: name.to_owned(),
        n_samples,
        dim,
        lhs: l,
        lhs_se: lse,
        rhs: r,
        rhs_se: rse,
        combined_se: combined,
        z_score,
        trace,
        growth_ratio,
        pass: growth_ok && z_score <= STEIN_SIGMAS,
    })
}

fn growth_probe<F>(h: &F, [rows, cols]: [usize; 2], rng: &mut RngState) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for _ in 0..GROWTH_DIRECTIONS {
        let u = Tensor::matrix(rows, cols, rng.normals(rows * cols))?;
        let u = u.scale(1.0 / u.frobenius_norm());
        let norms = GROWTH_SCALES
            .iter()
            .map(|&t| {
                let mut tape = Tape::new();
                let x = tape.constant(u.scale(t));
                let out = h(&mut tape, x)?;
                Ok(tape.value(out).frobenius_norm())
            })
            .collect::<Result<Vec<f64>>>()?;
        if !norms.iter().all(|v| v.is_finite()) {
            return Ok(f64::INFINITY);
        }
        if norms[0] > 0.0 {
            worst = worst.max(norms[1] / norms[0]);
        }
    }
    Ok(worst)
}
