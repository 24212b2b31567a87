//! Dense tensors, a seeded Gaussian sampler and symmetric eigendecomposition.

mod eigen;
mod linalg;
mod rng;
mod tensor;

pub use eigen::{symmetric_eigen, EigenDecomposition};
pub use linalg::{random_orthonormal, spectral_norm_dense};
pub use rng::{sample_standard_gaussian, RngState};
pub use tensor::Tensor;
pub(crate) use tensor::{matmul_at_into, matmul_bt_into, matmul_into};
