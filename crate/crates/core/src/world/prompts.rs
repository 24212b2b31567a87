use std::sync::Arc;

use crate::error::{LensError, Result};
use crate::numerics::{RngState, Tensor};

/// Fixed table of prompt token embeddings, one T×e matrix per prompt id.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTable {
    tokens: usize,
    embed_dim: usize,
    table: Vec<Arc<Tensor>>,
}

impl PromptTable {
    pub fn generate(
        n_prompts: usize,
        tokens: usize,
        embed_dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if n_prompts == 0 || tokens == 0 || embed_dim == 0 {
            return Err(LensError::Config(format!(
                "prompt table needs positive sizes (prompts={n_prompts}, T={tokens}, e={embed_dim})"
            )));
        }
        let table = (0..n_prompts)
            .map(|_| {
                Tensor::matrix(tokens, embed_dim, rng.normals(tokens * embed_dim)).map(Arc::new)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            embed_dim,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn check(&self, c: usize) -> Result<()> {
        if c >= self.table.len() {
            return Err(LensError::invalid(format!(
                "unknown prompt id {c} (table has {})",
                self.table.len()
            )));
        }
        Ok(())
    }

    /// T×e token embeddings of prompt `c`.
    pub fn embedding(&self, c: usize) -> Result<&Tensor> {
        self.check(c)?;
        Ok(&self.table[c])
    }

    pub fn shared_embedding(&self, c: usize) -> Result<Arc<Tensor>> {
        self.check(c)?;
        Ok(Arc::clone(&self.table[c]))
    }

    /// Token-mean of the embeddings.
    pub fn pooled(&self, c: usize) -> Result<Vec<f64>> {
        let emb = self.embedding(c)?;
        let mut out = vec![0.0; self.embed_dim];
        for t in 0..self.tokens {
            for (o, v) in out.iter_mut().zip(emb.row(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.tokens as f64);
        Ok(out)
    }
}
