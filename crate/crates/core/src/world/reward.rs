use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LensError, Result};
use crate::numerics::Tensor;

/// Guards the cosine denominator at x = 0.
pub const COSINE_EPS: f64 = 1e-12;

/// One smooth scalar field r_i(x, c).
#[derive(Clone, Debug)]
pub enum RewardComponent {
    /// −‖P x − t_c‖². `proj_t` is m×q, `targets` n_prompts×q.
    QuadDistance {
        proj_t: Arc<Tensor>,
        targets: Arc<Tensor>,
    },
    /// ⟨x, u_c⟩ / ‖x‖ with unit rows u_c in `dirs` (n_prompts×m).
    Cosine { dirs: Arc<Tensor> },
    /// exp(−‖R x − t_c‖² / width).
    Bump {
        proj_t: Arc<Tensor>,
        targets: Arc<Tensor>,
        width: f64,
    },
    /// ⟨a_c, x⟩. Unbounded, only for closed-form checks.
    Linear { coef: Arc<Tensor> },
    /// −½‖x‖².
    NegHalfSqNorm,
}

impl RewardComponent {
    pub fn name(&self) -> &'static str {
        match self {
            RewardComponent::QuadDistance { .. } => "quad_distance",
            RewardComponent::Cosine { .. } => "cosine",
            RewardComponent::Bump { .. } => "bump",
            RewardComponent::Linear { .. } => "linear",
            RewardComponent::NegHalfSqNorm => "neg_half_sq_norm",
        }
    }

    /// Supremum over x, or None when unbounded.
    pub fn upper_bound(&self) -> Option<f64> {
        match self {
            RewardComponent::QuadDistance { .. } | RewardComponent::NegHalfSqNorm => Some(0.0),
            RewardComponent::Cosine { .. } | RewardComponent::Bump { .. } => Some(1.0),
            RewardComponent::Linear { .. } => None,
        }
    }

    fn rows(t: &Tensor, prompts: &[usize]) -> Result<Tensor> {
        let c = t.cols();
        let mut data = Vec::with_capacity(prompts.len() * c);
        for &p in prompts {
            data.extend_from_slice(t.row(p));
        }
        Tensor::matrix(prompts.len(), c, data)
    }

    /// B×1 values for B×m features.
    fn on_tape(&self, tape: &mut Tape, x: Var, prompts: &[usize]) -> Result<Var> {
        match self {
            RewardComponent::QuadDistance { proj_t, targets } => {
                let p = tape.leaf(Arc::clone(proj_t), false);
                let t = tape.constant(Self::rows(targets, prompts)?);
                let px = tape.matmul(x, p)?;
                let diff = tape.sub(px, t)?;
                let sq = tape.square(diff)?;
                let dist = tape.row_sum(sq)?;
                tape.scale(dist, -1.0)
            }
            RewardComponent::Cosine { dirs } => {
                let u = tape.constant(Self::rows(dirs, prompts)?);
                let xu = tape.mul(x, u)?;
                let num = tape.row_sum(xu)?;
                let sq = tape.square(x)?;
                let norm_sq = tape.row_sum(sq)?;
                let norm_sq = tape.add_scalar(norm_sq, COSINE_EPS)?;
                let norm = tape.sqrt(norm_sq)?;
                let inv = tape.recip(norm)?;
                tape.mul(num, inv)
            }
            RewardComponent::Bump {
                proj_t,
                targets,
                width,
            } => {
                let p = tape.leaf(Arc::clone(proj_t), false);
                let t = tape.constant(Self::rows(targets, prompts)?);
                let px = tape.matmul(x, p)?;
                let diff = tape.sub(px, t)?;
                let sq = tape.square(diff)?;
                let dist = tape.row_sum(sq)?;
                let arg = tape.scale(dist, -1.0 / width)?;
                tape.exp(arg)
            }
            RewardComponent::Linear { coef } => {
                let a = tape.constant(Self::rows(coef, prompts)?);
                let ax = tape.mul(x, a)?;
                tape.row_sum(ax)
            }
            RewardComponent::NegHalfSqNorm => {
                let sq = tape.square(x)?;
                let s = tape.row_sum(sq)?;
                tape.scale(s, -0.5)
            }
        }
    }
}

/// Weighted sum r = Σ λ_i r_i.
#[derive(Clone, Debug)]
pub struct RewardField {
    components: Vec<(f64, RewardComponent)>,
    n_prompts: usize,
    feature_dim: usize,
}

/// Per-component weights of the default four-term field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub cosine: f64,
    pub quad_primary: f64,
    pub quad_secondary: f64,
    pub bump: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            cosine: 0.01,
            quad_primary: 5.0,
            quad_secondary: 1.0,
            bump: 0.05,
        }
    }
}

impl RewardField {
    pub fn new(
        components: Vec<(f64, RewardComponent)>,
        n_prompts: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        for (lambda, c) in &components {
            if !lambda.is_finite() {
                return Err(LensError::Config(format!(
                    "non-finite weight for {}",
                    c.name()
                )));
            }
        }
        Ok(Self {
            components,
            n_prompts,
            feature_dim,
        })
    }

    pub fn components(&self) -> &[(f64, RewardComponent)] {
        &self.components
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Σ sup λ_i r_i, or None when some weighted term is unbounded above.
    pub fn upper_bound(&self) -> Option<f64> {
        let mut total = 0.0;
        for (lambda, c) in &self.components {
            total += match c {
                _ if *lambda == 0.0 => 0.0,
                _ if *lambda > 0.0 => lambda * c.upper_bound()?,
                // −cos ≤ 1 and −bump ≤ 0
                RewardComponent::Cosine { .. } => -lambda,
                RewardComponent::Bump { .. } => 0.0,
                _ => return None,
            };
        }
        Some(total)
    }

    fn check_prompts(&self, prompts: &[usize]) -> Result<()> {
        if let Some(&bad) = prompts.iter().find(|&&p| p >= self.n_prompts) {
            return Err(LensError::invalid(format!(
                "unknown prompt id {bad} (field has {})",
                self.n_prompts
            )));
        }
        Ok(())
    }

    /// B×1 rewards for B×m features, one prompt id per row.
    pub fn on_tape(&self, tape: &mut Tape, x: Var, prompts: &[usize]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.feature_dim || shape[0] != prompts.len() {
            return Err(LensError::shape(
                "reward",
                &[prompts.len(), self.feature_dim],
                &shape,
            ));
        }
        self.check_prompts(prompts)?;
        let mut total: Option<Var> = None;
        for (lambda, c) in &self.components {
            let r = c.on_tape(tape, x, prompts)?;
            let r = tape.scale(r, *lambda)?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(tape.constant(Tensor::zeros(&[prompts.len(), 1]))),
        }
    }

    /// r(x, c) for one feature vector of length m.
    pub fn reward(&self, x: &Tensor, c: usize) -> Result<f64> {
        if !x.is_finite() {
            return Err(LensError::invalid("reward input is not finite"));
        }
        if x.len() != self.feature_dim {
            return Err(LensError::shape("reward", &[self.feature_dim], x.shape()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.reshape(&[1, self.feature_dim])?);
        let r = self.on_tape(&mut tape, xv, &[c])?;
        Ok(tape.value(r).data()[0])
    }
}
