use crate::autodiff::{backward, Tape, Var};
use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub worst_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst_coord: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitude, per unit of function value, below which relative
/// error is measured against this floor instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// |a − b| / max(|a|, |b|, floor · max(1, |f|)).
///
/// Scaling the floor with the function value keeps the verdict unchanged
/// when `f` is multiplied by a constant. Central differences carry round-off
/// of order ulp(f)/h, so a fixed floor would judge large-valued functions by
/// noise alone on their near-zero coordinates.
pub fn relative_error(a: f64, b: f64, f: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR * f.abs().max(1.0))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` builds the function on a tape from one leaf per input and returns the
/// scalar output. With `max_coords = Some(n)` only `n` randomly chosen
/// coordinates are differenced (chosen with `seed`); otherwise all are.
pub fn check_gradient<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    max_coords: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(LensError::invalid("check_gradient needs a scalar output"));
    }
    let grads = backward(&tape, out, &Tensor::filled(tape.shape(out), 1.0))?;
    let value = tape.value(out).data()[0];

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data()[0])
    };

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if let Some((n, seed)) = max_coords {
        if n < coords.len() {
            let mut rng = RngState::new(seed);
            for i in 0..n {
                let j = i + rng.below(coords.len() - i);
                coords.swap(i, j);
            }
            coords.truncate(n);
        }
    }

    let mut report = GradCheckReport {
        coords_checked: coords.len(),
        worst_rel_err: 0.0,
        worst_coord: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, j) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let original = work[i].data()[j];
        work[i].data_mut()[j] = original + step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = original - step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric, value);
        if err >= report.worst_rel_err {
            report.worst_rel_err = err;
            report.worst_coord = (i, j);
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
