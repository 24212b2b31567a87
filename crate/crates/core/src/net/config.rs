use serde::{Deserialize, Serialize};

use crate::error::{LensError, Result};

/// Shape of the modulation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensConfig {
    pub n_tokens: usize,
    pub coeff_dim: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub gate_init_logit: f64,
}

impl Default for LensConfig {
    fn default() -> Self {
        Self {
            n_tokens: 4,
            coeff_dim: 32,
            hidden: 32,
            n_layers: 4,
            n_heads: 4,
            embed_dim: 8,
            gate_init_logit: -2.0,
        }
    }
}

/// Multiply-adds of one forward pass for a single sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacCount {
    /// Q·Kᵀ and A·V of self-attention, 2·L·N²·h.
    pub attention: u64,
    /// Token-side projections: self QKVO and cross Q/O, 6·L·N·h².
    pub projections: u64,
    /// 8·L·N·h².
    pub ffn: u64,
    /// Cross-attention scores and mixing, 2·L·N·T·h.
    pub cross_attention: u64,
    /// Input and output projections, 2·N·k·h.
    pub io: u64,
    /// Prompt-only work (cross K/V, pooled bias), independent of N and k.
    pub prompt: u64,
}

impl MacCount {
    /// Work that scales with the token count; the complexity fit uses this.
    pub fn token_total(&self) -> u64 {
        self.attention + self.projections + self.ffn + self.cross_attention + self.io
    }

    pub fn total(&self) -> u64 {
        self.token_total() + self.prompt
    }
}

impl LensConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_tokens", self.n_tokens),
            ("coeff_dim", self.coeff_dim),
            ("hidden", self.hidden),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(LensError::Config(format!("{name} must be ≥ 1")));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(LensError::Config(format!(
                "hidden={} is not divisible by n_heads={}",
                self.hidden, self.n_heads
            )));
        }
        if !self.gate_init_logit.is_finite() {
            return Err(LensError::Config("gate_init_logit must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Trainable tensors in declaration order: name and shape.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (k, h, e) = (self.coeff_dim, self.hidden, self.embed_dim);
        let mut out = vec![
            ("input.w".to_string(), [k, h]),
            ("input.b".to_string(), [1, h]),
            ("pooled.w".to_string(), [e, h]),
            ("pooled.b".to_string(), [1, h]),
        ];
        for l in 0..self.n_layers {
            let mut push =
                |name: &str, shape: [usize; 2]| out.push((format!("layer{l}.{name}"), shape));
            push("ln_self.g", [1, h]);
            push("ln_self.b", [1, h]);
            for p in ["q", "k", "v", "o"] {
                push(&format!("self.w{p}"), [h, h]);
                push(&format!("self.b{p}"), [1, h]);
            }
            push("ln_cross.g", [1, h]);
            push("ln_cross.b", [1, h]);
            push("cross.wq", [h, h]);
            push("cross.bq", [1, h]);
            push("cross.wk", [e, h]);
            push("cross.bk", [1, h]);
            push("cross.wv", [e, h]);
            push("cross.bv", [1, h]);
            push("cross.wo", [h, h]);
            push("cross.bo", [1, h]);
            push("cross.gate", [1, 1]);
            push("ln_ffn.g", [1, h]);
            push("ln_ffn.b", [1, h]);
            push("ffn.w1", [h, 4 * h]);
            push("ffn.b1", [1, 4 * h]);
            push("ffn.w2", [4 * h, h]);
            push("ffn.b2", [1, h]);
        }
        out.push(("final_ln.g".to_string(), [1, h]));
        out.push(("final_ln.b".to_string(), [1, h]));
        out.push(("output.w".to_string(), [h, k]));
        out.push(("output.b".to_string(), [1, k]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    /// Closed-form MAC count for `prompt_tokens` prompt tokens.
    pub fn macs(&self, prompt_tokens: usize) -> MacCount {
        let (n, k, h, e, t) = (
            self.n_tokens as u64,
            self.coeff_dim as u64,
            self.hidden as u64,
            self.embed_dim as u64,
            prompt_tokens as u64,
        );
        let l = self.n_layers as u64;
        MacCount {
            attention: l * 2 * n * n * h,
            projections: l * 6 * n * h * h,
            ffn: l * 8 * n * h * h,
            cross_attention: l * 2 * n * t * h,
            io: 2 * n * k * h,
            prompt: l * 2 * t * e * h + e * h,
        }
    }
}
