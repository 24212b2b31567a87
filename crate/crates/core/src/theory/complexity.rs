use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{LensError, Result};
use crate::net::{LensConfig, LensNet, MacCount, PromptBatch};
use crate::numerics::{RngState, Tensor};

/// Two-term fits must explain the counts to within this relative residual.
pub const FIT_RESIDUAL_MAX: f64 = 0.05;
/// Measured time ratios must stay within this factor of MAC ratios.
pub const TIMING_SLACK: f64 = 1.5;
/// Timing comparisons only count for token counts at least this large.
pub const TIMING_MIN_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub n_tokens: usize,
    pub coeff_dim: usize,
    pub hidden: usize,
    pub macs: MacCount,
    pub token_macs: u64,
    /// Multiply-adds recorded by the tape for one forward pass.
    pub counted_macs: u64,
    pub params: usize,
    /// Best of the timed forward passes.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacFit {
    pub coefficients: Vec<f64>,
    /// max |fit − count| / count over the rows.
    pub max_relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingCheck {
    pub from: usize,
    pub to: usize,
    pub mac_ratio: f64,
    pub time_ratio: f64,
    pub within_slack: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub prompt_tokens: usize,
    pub rows: Vec<ComplexityRow>,
    /// token MACs ≈ c₁N²h + c₂Nh².
    pub fit: MacFit,
    /// token MACs ≈ c₁N²h + c₂Nh² + c₃Nkh.
    pub fit_with_io: MacFit,
    pub counts_match_tape: bool,
    /// Attention term ×4 for every row pair whose N doubles at fixed (k, h).
    pub attention_quadruples: bool,
    /// FFN term ×4 for every row pair whose h doubles at fixed (N, k).
    pub ffn_quadruples: bool,
    pub timing: Vec<TimingCheck>,
}

/// Least squares on the columns of `x` via the normal equations.
fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let p = x[0].len();
    // scale columns to unit max so the normal equations stay well conditioned
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            x.iter()
                .map(|r| r[j].abs())
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE)
        })
        .collect();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] / scale[i] * row[j] / scale[j];
            }
            a[i][p] += row[i] / scale[i] * yi;
        }
    }
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .expect("nonempty");
        if a[piv][c].abs() < 1e-12 {
            return Err(LensError::Numerical(
                "singular design matrix in MAC fit".into(),
            ));
        }
        a.swap(c, piv);
        let pivot_row = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != c {
                let f = row[c] / pivot_row[c];
                for (x, &pv) in row[c..=p].iter_mut().zip(&pivot_row[c..=p]) {
                    *x -= f * pv;
                }
            }
        }
    }
    Ok((0..p).map(|i| a[i][p] / a[i][i] / scale[i]).collect())
}

fn fit(rows: &[ComplexityRow], features: impl Fn(&ComplexityRow) -> Vec<f64>) -> Result<MacFit> {
    let x: Vec<Vec<f64>> = rows.iter().map(&features).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.token_macs as f64).collect();
    let coefficients = least_squares(&x, &y)?;
    let max_relative_residual = x
        .iter()
        .zip(&y)
        .map(|(f, yi)| {
            (f.iter().zip(&coefficients).map(|(a, b)| a * b).sum::<f64>() - yi).abs() / yi
        })
        .fold(0.0, f64::max);
    Ok(MacFit {
        coefficients,
        max_relative_residual,
    })
}

/// Counts, times and fits the network's multiply-adds over `(N, k, h)` configs
/// derived from `base`. Each config is timed `reps` times (best kept).
pub fn complexity_bench(
    base: &LensConfig,
    configs: &[(usize, usize, usize)],
    prompt_tokens: usize,
    reps: usize,
) -> Result<ComplexityReport> {
    if configs.len() < 3 {
        return Err(LensError::invalid(
            "complexity fit needs at least 3 configs",
        ));
    }
    let mut rng = RngState::new(0xc0de);
    let mut rows = Vec::with_capacity(configs.len());
    for &(n, k, h) in configs {
        let cfg = LensConfig {
            n_tokens: n,
            coeff_dim: k,
            hidden: h,
            ..base.clone()
        };
        let net = LensNet::init(&cfg, &mut rng)?;
        let w = Tensor::matrix(n, k, rng.normals(n * k))?;
        let emb = Tensor::matrix(
            prompt_tokens,
            cfg.embed_dim,
            rng.normals(prompt_tokens * cfg.embed_dim),
        )?;
        let prompt = PromptBatch::from_embeddings(&[&emb])?;
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let wv = tape.constant(w.clone());
        net.forward_on_tape(&mut tape, &bound, wv, &prompt)?;
        let counted = tape.matmul_macs();
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            std::hint::black_box(net.forward(&w, &prompt)?);
            best = best.min(t.elapsed().as_secs_f64());
        }
        let macs = cfg.macs(prompt_tokens);
        rows.push(ComplexityRow {
            n_tokens: n,
            coeff_dim: k,
            hidden: h,
            token_macs: macs.token_total(),
            macs,
            counted_macs: counted,
            params: cfg.param_count(),
            seconds: best,
        });
    }
    let fit2 = fit(&rows, |r| {
        let (n, h) = (r.n_tokens as f64, r.hidden as f64);
        vec![n * n * h, n * h * h]
    })?;
    let fit3 = fit(&rows, |r| {
        let (n, h, k) = (r.n_tokens as f64, r.hidden as f64, r.coeff_dim as f64);
        vec![n * n * h, n * h * h, n * k * h]
    })
    .unwrap_or(MacFit {
        coefficients: vec![],
        max_relative_residual: f64::NAN,
    });
    let counts_match_tape = rows.iter().all(|r| r.counted_macs == r.macs.total());
    let mut attention_quadruples = true;
    let mut ffn_quadruples = true;
    let mut timing = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if a.coeff_dim != b.coeff_dim {
                continue;
            }
            if b.hidden == a.hidden && b.n_tokens == 2 * a.n_tokens {
                attention_quadruples &= b.macs.attention == 4 * a.macs.attention;
            }
            if b.n_tokens == a.n_tokens && b.hidden == 2 * a.hidden {
                ffn_quadruples &= b.macs.ffn == 4 * a.macs.ffn;
            }
            if b.hidden == a.hidden && b.n_tokens > a.n_tokens && a.n_tokens >= TIMING_MIN_TOKENS {
                let mac_ratio = b.macs.total() as f64 / a.macs.total() as f64;
                let time_ratio = b.seconds / a.seconds;
                timing.push(TimingCheck {
                    from: i,
                    to: j,
                    mac_ratio,
                    time_ratio,
                    within_slack: time_ratio <= mac_ratio * TIMING_SLACK
                        && time_ratio >= mac_ratio / TIMING_SLACK,
                });
            }
        }
    }
    Ok(ComplexityReport {
        prompt_tokens,
        rows,
        fit: fit2,
        fit_with_io: fit3,
        counts_match_tape,
        attention_quadruples,
        ffn_quadruples,
        timing,
    })
}

/// The 3×3 (N, h) grid at fixed k used by the complexity claim.
pub fn default_grid(k: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for n in [16, 32, 64] {
        for h in [32, 64, 128] {
            out.push((n, k, h));
        }
    }
    out
}
