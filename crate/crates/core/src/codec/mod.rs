//! Patch-wise PCA noise codec.
//!
//! Latents are cut into s×s patches, centered, and expressed in an
//! orthonormal basis. Only the first `k` coefficients are kept explicitly;
//! the rest of each patch travels as an orthogonal residual so that
//! reconstruction is exact.

mod basis;
mod geometry;
mod io;
mod stats;
mod transform;

pub use basis::{extract_basis, PatchBasis};
pub use geometry::PatchGeometry;
pub use io::{
    basis_header, decode_basis, decode_samples, encode_basis, encode_samples, load_basis,
    load_samples, save_basis, save_samples, sidecar_path, synthetic_latents, write_atomic,
    BasisHeader, BASIS_MAGIC, SAMPLES_MAGIC,
};
pub use stats::{
    family_critical_value, gaussian_preservation_check, MomentTest, StatReport,
    MIN_PRESERVATION_SAMPLES,
};
pub use transform::{
    basis_leaves, fold, proj, proj_full, recon, recon_full, recon_on_tape, unfold, CoeffSplit,
};
