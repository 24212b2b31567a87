//! Reverse-mode differentiation over recorded tensor primitives.
//!
//! A [`Tape`] is built by running ordinary code against it; every primitive
//! is evaluated eagerly and appended in topological order. [`backward`]
//! walks the record in reverse, [`jacobian_vector_product`] walks it
//! forward with tangents, and [`Tape::replay`] re-evaluates it with new leaf
//! values.

mod check;
mod grad;
mod tape;

pub use check::{check_gradient, relative_error, GradCheckReport, FD_STEP, REL_ERR_FLOOR};
pub use grad::{backward, jacobian_vector_product, Gradients};
pub use tape::{Op, Tape, Var, LN_EPS_DEFAULT};

use crate::error::Result;
use crate::numerics::Tensor;

/// A function evaluated on a fresh tape.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Recorded {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        backward(&self.tape, self.output, seed)
    }

    /// J·direction with respect to the single input at `input`.
    pub fn jvp(&self, input: usize, direction: &Tensor) -> Result<Tensor> {
        jacobian_vector_product(
            &self.tape,
            &[(self.inputs[input], direction.clone())],
            self.output,
        )
    }
}

/// Records `f` applied to differentiable leaves holding `inputs`.
pub fn record<F>(inputs: &[Tensor], f: F) -> Result<Recorded>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let output = f(&mut tape, &vars)?;
    Ok(Recorded {
        tape,
        inputs: vars,
        output,
    })
}

#[cfg(test)]
mod tests;
