use std::sync::Arc;

use crate::autodiff::{Tape, Var, LN_EPS_DEFAULT};
use crate::codec::CoeffSplit;
use crate::error::{LensError, Result};
use crate::net::LensConfig;
use crate::numerics::{RngState, Tensor};
use crate::world::PromptTable;

/// Added to masked attention scores; exp underflows to exactly zero.
const MASKED: f64 = -1e30;

/// Prompt conditioning for a batch: stacked tokens and pooled embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBatch {
    /// (B·T)×e.
    pub tokens: Tensor,
    /// B×e token means.
    pub pooled: Tensor,
    pub tokens_per_prompt: usize,
}

impl PromptBatch {
    pub fn from_embeddings(embeddings: &[&Tensor]) -> Result<Self> {
        let first = embeddings
            .first()
            .ok_or_else(|| LensError::invalid("empty prompt batch"))?;
        let (t, e) = (first.rows(), first.cols());
        let mut tokens = Vec::with_capacity(embeddings.len() * t * e);
        let mut pooled = Vec::with_capacity(embeddings.len() * e);
        for emb in embeddings {
            if emb.shape() != [t, e] {
                return Err(LensError::shape("prompt batch", &[t, e], emb.shape()));
            }
            tokens.extend_from_slice(emb.data());
            for j in 0..e {
                pooled.push((0..t).map(|r| emb.get(r, j)).sum::<f64>() / t as f64);
            }
        }
        Ok(Self {
            tokens: Tensor::matrix(embeddings.len() * t, e, tokens)?,
            pooled: Tensor::matrix(embeddings.len(), e, pooled)?,
            tokens_per_prompt: t,
        })
    }

    pub fn from_table(table: &PromptTable, ids: &[usize]) -> Result<Self> {
        let embs = ids
            .iter()
            .map(|&c| table.embedding(c))
            .collect::<Result<Vec<_>>>()?;
        Self::from_embeddings(&embs)
    }

    pub fn batch(&self) -> usize {
        self.pooled.rows()
    }
}

/// Parameters φ of the modulation network plus the fixed positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct LensNet {
    config: LensConfig,
    params: Vec<Tensor>,
    positional: Arc<Tensor>,
}

/// Sinusoidal table, row i = position i over the row-major patch grid.
pub fn sinusoidal_table(n: usize, h: usize) -> Tensor {
    Tensor::from_fn(n, h, |i, j| {
        let freq = 10_000f64.powf(-((2 * (j / 2)) as f64) / h as f64);
        let angle = i as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameter leaves bound on a tape, in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub(crate) positional: Var,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl LensNet {
    /// Fresh network: output head exactly zero, gate logits at the configured
    /// value, layer-norm gains 1, other weights N(0, 1/fan_in), biases 0.
    pub fn init(config: &LensConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, [r, c])| {
                let t = if name.starts_with("output.") {
                    Tensor::zeros(&[r, c])
                } else if name.ends_with(".gate") {
                    Tensor::filled(&[r, c], config.gate_init_logit)
                } else if name.ends_with(".g") {
                    Tensor::filled(&[r, c], 1.0)
                } else if r == 1 {
                    Tensor::zeros(&[r, c])
                } else {
                    let s = 1.0 / (r as f64).sqrt();
                    Tensor::matrix(
                        r,
                        c,
                        rng.normals(r * c).into_iter().map(|v| v * s).collect(),
                    )?
                };
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config.clone(), params)
    }

    pub fn from_params(config: LensConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.len() {
            return Err(LensError::invalid(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape {
                return Err(LensError::invalid(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        let positional = Arc::new(sinusoidal_table(config.n_tokens, config.hidden));
        Ok(Self {
            config,
            params,
            positional,
        })
    }

    pub fn config(&self) -> &LensConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn positional(&self) -> &Tensor {
        &self.positional
    }

    /// Replaces the positional table (N×h), e.g. to permute token positions.
    pub fn set_positional(&mut self, table: Tensor) -> Result<()> {
        let expected = [self.config.n_tokens, self.config.hidden];
        if table.shape() != expected {
            return Err(LensError::shape(
                "positional table",
                &expected,
                table.shape(),
            ));
        }
        self.positional = Arc::new(table);
        Ok(())
    }

    /// Index of the named tensor in layout order.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.config.layout().iter().position(|(n, _)| n == name)
    }

    pub fn bind(&self, tape: &mut Tape, differentiable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(Arc::new(p.clone()), differentiable))
            .collect();
        let positional = tape.leaf(Arc::clone(&self.positional), false);
        BoundParams { vars, positional }
    }

    /// Wraps caller-owned parameter leaves, e.g. for finite-difference checks.
    pub fn bind_vars(&self, tape: &mut Tape, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(LensError::invalid(format!(
                "expected {} parameter leaves, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (v, p) in vars.iter().zip(&self.params) {
            if tape.shape(*v) != p.shape() {
                return Err(LensError::shape("bind_vars", p.shape(), tape.shape(*v)));
            }
        }
        let positional = tape.leaf(Arc::clone(&self.positional), false);
        Ok(BoundParams { vars, positional })
    }

    /// Δw_L for stacked coefficients `w` ((B·N)×k), one prompt per sample.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        w: Var,
        prompts: &PromptBatch,
    ) -> Result<Var> {
        let c = &self.config;
        let (n, k, h) = (c.n_tokens, c.coeff_dim, c.hidden);
        let b = prompts.batch();
        let t = prompts.tokens_per_prompt;
        if tape.shape(w) != [b * n, k] {
            return Err(LensError::shape("lens forward", &[b * n, k], tape.shape(w)));
        }
        if prompts.tokens.cols() != c.embed_dim {
            return Err(LensError::shape(
                "lens prompt",
                &[t, c.embed_dim],
                &[t, prompts.tokens.cols()],
            ));
        }
        let mut p = Cursor {
            vars: &bound.vars,
            pos: 0,
        };

        let (in_w, in_b) = (p.next(), p.next());
        let x = tape.matmul(w, in_w)?;
        let mut x = tape.add_row(x, in_b)?;
        let pos = if b == 1 {
            bound.positional
        } else {
            let idx: Vec<usize> = (0..b * n * h).map(|i| i % (n * h)).collect();
            tape.gather(bound.positional, Arc::new(idx), &[b * n, h])?
        };
        x = tape.add(x, pos)?;

        // pooled prompt bias, broadcast to every token of its sample
        let (pw, pb) = (p.next(), p.next());
        let pooled = tape.constant(prompts.pooled.clone());
        let bias = tape.matmul(pooled, pw)?;
        let bias = tape.add_row(bias, pb)?;
        let bias = if n == 1 {
            bias
        } else {
            let idx: Vec<usize> = (0..b * n * h).map(|i| (i / (n * h)) * h + i % h).collect();
            tape.gather(bias, Arc::new(idx), &[b * n, h])?
        };
        x = tape.add(x, bias)?;

        let tokens = tape.constant(prompts.tokens.clone());
        let self_mask = (b > 1).then(|| tape.constant(block_mask(b, n, n)));
        let cross_mask = (b > 1).then(|| tape.constant(block_mask(b, n, t)));

        for _ in 0..c.n_layers {
            // self-attention
            let hn = layer_norm(tape, x, p.next(), p.next())?;
            let q = affine(tape, hn, p.next(), p.next())?;
            let kk = affine(tape, hn, p.next(), p.next())?;
            let v = affine(tape, hn, p.next(), p.next())?;
            let att = attention(tape, q, kk, v, c.n_heads, self_mask)?;
            let out = affine(tape, att, p.next(), p.next())?;
            x = tape.add(x, out)?;

            // gated cross-attention
            let hn = layer_norm(tape, x, p.next(), p.next())?;
            let q = affine(tape, hn, p.next(), p.next())?;
            let kk = affine(tape, tokens, p.next(), p.next())?;
            let v = affine(tape, tokens, p.next(), p.next())?;
            let att = attention(tape, q, kk, v, c.n_heads, cross_mask)?;
            let out = affine(tape, att, p.next(), p.next())?;
            let gate = tape.sigmoid(p.next())?;
            let out = tape.mul_scalar(out, gate)?;
            x = tape.add(x, out)?;

            // feed-forward
            let hn = layer_norm(tape, x, p.next(), p.next())?;
            let f = affine(tape, hn, p.next(), p.next())?;
            let f = tape.tanh(f)?;
            let f = affine(tape, f, p.next(), p.next())?;
            x = tape.add(x, f)?;
        }
        let hn = layer_norm(tape, x, p.next(), p.next())?;
        let out = affine(tape, hn, p.next(), p.next())?;
        debug_assert_eq!(p.pos, bound.vars.len());
        Ok(out)
    }

    /// h_φ(w_L, c) for one N×k coefficient matrix.
    pub fn forward(&self, w_low: &Tensor, prompt: &PromptBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let w = tape.constant(w_low.clone());
        let out = self.forward_on_tape(&mut tape, &bound, w, prompt)?;
        Ok(tape.value(out).clone())
    }

    /// w_L ← w_L + h_φ(w_L, c); the residual is carried over untouched.
    pub fn modulate(&self, split: &CoeffSplit, prompt: &PromptBatch) -> Result<CoeffSplit> {
        let delta = self.forward(&split.w_low, prompt)?;
        Ok(CoeffSplit {
            w_low: split.w_low.add(&delta)?,
            residual: split.residual.clone(),
            geometry: split.geometry,
        })
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var> {
    let y = tape.layer_norm_rows(x, LN_EPS_DEFAULT)?;
    let y = tape.mul_row(y, g)?;
    tape.add_row(y, b)
}

/// 0 on the per-sample diagonal blocks, [`MASKED`] elsewhere.
fn block_mask(batch: usize, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(batch * rows, batch * cols, |i, j| {
        if i / rows == j / cols {
            0.0
        } else {
            MASKED
        }
    })
}

fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let h = tape.shape(q)[1];
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, hd * dh, dh)?,
                tape.slice_cols(k, hd * dh, dh)?,
                tape.slice_cols(v, hd * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, scale)?;
        if let Some(m) = mask {
            s = tape.add(s, m)?;
        }
        let a = tape.softmax_rows(s)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
