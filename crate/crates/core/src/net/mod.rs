//! The coefficient modulation network h_φ.
//!
//! A small pre-norm transformer over the N patch tokens of a sample. Each
//! block runs self-attention, sigmoid-gated cross-attention to the prompt
//! tokens, and a 4× feed-forward layer. The output head maps back to the k
//! low-frequency coefficients and starts at zero.

mod checkpoint;
mod config;
mod model;
mod spectral;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{LensConfig, MacCount};
pub use model::{sinusoidal_table, BoundParams, LensNet, PromptBatch};
pub use spectral::{
    invert_fixed_point, spectral_norm, InversionReport, SpectralReport, DIVERGENCE_STREAK,
    SPECTRAL_MAX_ITER, SPECTRAL_TOL,
};

use crate::error::Result;
use crate::numerics::Tensor;

impl LensNet {
    /// Spectral norm of J_{h_φ} at `probe` for a fixed prompt.
    pub fn spectral_norm(
        &self,
        probe: &Tensor,
        prompt: &PromptBatch,
        tol: f64,
        max_iter: usize,
    ) -> Result<SpectralReport> {
        spectral_norm(
            |tape, w| {
                let bound = self.bind(tape, false);
                self.forward_on_tape(tape, &bound, w, prompt)
            },
            probe,
            tol,
            max_iter,
        )
    }

    /// Solves w + h_φ(w) = target.
    pub fn invert(
        &self,
        target: &Tensor,
        prompt: &PromptBatch,
        tol: f64,
        max_iter: usize,
    ) -> Result<InversionReport> {
        invert_fixed_point(
            |tape, w| {
                let bound = self.bind(tape, false);
                self.forward_on_tape(tape, &bound, w, prompt)
            },
            target,
            tol,
            max_iter,
        )
    }
}
