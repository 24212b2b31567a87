use rand_chacha::ChaCha8Rng;
use rand_core::{Rng, SeedableRng};

use crate::error::{LensError, Result};
use crate::numerics::Tensor;

/// Seeded, counter-based random stream.
///
/// Backed by ChaCha8 so that independent streams can be derived from one
/// seed with [`RngState::split`] and every stream is replayable from
/// `(seed, stream, position)`.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position within the stream, in 32-bit words consumed.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// An independent stream derived from this one's seed. Does not advance `self`.
    pub fn split(&self, stream: u64) -> RngState {
        RngState::with_stream(
            self.seed,
            self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer uniform on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// One standard normal draw (Box–Muller, both outputs used).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// A tensor of i.i.d. N(0, 1) entries drawn from `rng`.
pub fn sample_standard_gaussian(rng: &mut RngState, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(LensError::invalid(format!(
            "cannot sample a zero-sized tensor of shape {shape:?}"
        )));
    }
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n))
}
