//! Gaussian statistics of the raw attention blocks, the KL-based
//! bootstrapping loss and the attention-gap diagnostic.
//!
//! The score matrix splits into four blocks by query/key modality:
//!
//! ```text
//!          keys A   keys V
//! rows A [  A2A  |  A2V  ]
//! rows V [  V2A  |  V2V  ]
//! ```
//!
//! Each block is summarised as `N(μ, σ²)` over its entries. The loss pulls
//! the cross blocks toward the self blocks of the key modality
//! (`A2V → V2V`, `V2A → A2A`), with the self blocks held as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to every block variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockId {
    A2A,
    A2V,
    V2A,
    V2V,
}

impl BlockId {
    pub const ALL: [BlockId; 4] = [BlockId::A2A, BlockId::A2V, BlockId::V2A, BlockId::V2V];

    /// `(row0, col0, rows, cols)` of the block inside the score matrix.
    pub fn range(self, t_a: usize, t_v: usize) -> (usize, usize, usize, usize) {
        match self {
            BlockId::A2A => (0, 0, t_a, t_a),
            BlockId::A2V => (0, t_a, t_a, t_v),
            BlockId::V2A => (t_a, 0, t_v, t_a),
            BlockId::V2V => (t_a, t_a, t_v, t_v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub block: BlockId,
    pub mu: f64,
    pub sigma2: f64,
}

impl BlockStats {
    pub fn new(block: BlockId, mu: f64, sigma2: f64) -> Self {
        Self { block, mu, sigma2 }
    }
}

/// The four block summaries of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub a2a: BlockStats,
    pub a2v: BlockStats,
    pub v2a: BlockStats,
    pub v2v: BlockStats,
}

impl AttentionStats {
    pub fn get(&self, block: BlockId) -> &BlockStats {
        match block {
            BlockId::A2A => &self.a2a,
            BlockId::A2V => &self.a2v,
            BlockId::V2A => &self.v2a,
            BlockId::V2V => &self.v2v,
        }
    }

    /// The self-attention anchors `(V2V, A2A)`.
    pub fn anchors(&self) -> Anchors {
        Anchors { v2v: self.v2v, a2a: self.a2a }
    }
}

/// Anchor statistics treated as constants by the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub v2v: BlockStats,
    pub a2a: BlockStats,
}

fn check_square(scores: &Tensor, t_a: usize, t_v: usize) -> Result<()> {
    if t_a < 1 || t_v < 1 {
        return Err(Error::DegenerateModality { t_a, t_v });
    }
    let n = t_a + t_v;
    if scores.shape() != (n, n) {
        return Err(Error::dim("block_stats", scores.shape(), (n, n)));
    }
    Ok(())
}

/// Raw (unfloored) mean and population variance of one block.
fn moments(scores: &Tensor, block: BlockId, t_a: usize, t_v: usize) -> (f64, f64) {
    let (r0, c0, rows, cols) = block.range(t_a, t_v);
    let n = (rows * cols) as f64;
    let entries = || (r0..r0 + rows).flat_map(move |r| scores.row(r)[c0..c0 + cols].iter());
    let mu = entries().sum::<f64>() / n;
    let var = entries().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Mean and floored population variance of each block of a raw score matrix.
pub fn block_stats(scores: &Tensor, t_a: usize, t_v: usize) -> Result<AttentionStats> {
    check_square(scores, t_a, t_v)?;
    let stat = |b| {
        let (mu, var) = moments(scores, b, t_a, t_v);
        BlockStats::new(b, mu, var.max(VARIANCE_FLOOR))
    };
    Ok(AttentionStats {
        a2a: stat(BlockId::A2A),
        a2v: stat(BlockId::A2V),
        v2a: stat(BlockId::V2A),
        v2v: stat(BlockId::V2V),
    })
}

fn check_finite(s: &BlockStats) -> Result<()> {
    if !s.mu.is_finite() || !s.sigma2.is_finite() {
        return Err(Error::Numeric(format!("non-finite statistics for {:?}", s.block)));
    }
    if s.sigma2 < VARIANCE_FLOOR {
        return Err(Error::Numeric(format!("variance {} of {:?} below floor", s.sigma2, s.block)));
    }
    Ok(())
}

/// `KL(N(μ_p, σ_p²) ‖ N(μ_q, σ_q²))` in closed form.
pub fn gaussian_kl(p: &BlockStats, q: &BlockStats) -> Result<f64> {
    check_finite(p)?;
    check_finite(q)?;
    let sigma_p = p.sigma2.sqrt();
    let sigma_q = q.sigma2.sqrt();
    let diff = p.mu - q.mu;
    Ok((sigma_q / sigma_p).ln() - 0.5 + (p.sigma2 + diff * diff) / (2.0 * q.sigma2))
}

/// Gradient of [`gaussian_kl`] w.r.t. `(μ_p, σ_p²)`. The anchor `q` is a
/// constant, so no gradient is defined for it.
pub fn gaussian_kl_grad(p: &BlockStats, q: &BlockStats) -> (f64, f64) {
    let d_mu = (p.mu - q.mu) / q.sigma2;
    let d_sigma2 = 0.5 / q.sigma2 - 0.5 / p.sigma2;
    (d_mu, d_sigma2)
}

/// Bootstrapping loss of one sample against explicit anchors.
pub fn ab_loss_against(stats: &AttentionStats, anchors: &Anchors) -> Result<f64> {
    Ok(gaussian_kl(&stats.a2v, &anchors.v2v)? + gaussian_kl(&stats.v2a, &anchors.a2a)?)
}

/// `KL(A2V ‖ V2V) + KL(V2A ‖ A2A)` for one sample.
pub fn ab_loss(stats: &AttentionStats) -> Result<f64> {
    ab_loss_against(stats, &stats.anchors())
}

/// Batch loss: mean of the per-sample losses.
pub fn ab_loss_batch(stats: &[AttentionStats]) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for s in stats {
        total += ab_loss(s)?;
    }
    Ok(total / stats.len() as f64)
}

/// Gradient of the loss w.r.t. each block's `(μ, σ²)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StatsGrad {
    pub mu: [f64; 4],
    pub sigma2: [f64; 4],
}

impl StatsGrad {
    pub fn get(&self, block: BlockId) -> (f64, f64) {
        let i = block as usize;
        (self.mu[i], self.sigma2[i])
    }
}

/// Gradient of [`ab_loss_against`] w.r.t. the block statistics. Entries for
/// the anchor blocks are exactly zero.
pub fn ab_loss_grad(stats: &AttentionStats, anchors: &Anchors) -> StatsGrad {
    let mut g = StatsGrad::default();
    let (m, s) = gaussian_kl_grad(&stats.a2v, &anchors.v2v);
    g.mu[BlockId::A2V as usize] = m;
    g.sigma2[BlockId::A2V as usize] = s;
    let (m, s) = gaussian_kl_grad(&stats.v2a, &anchors.a2a);
    g.mu[BlockId::V2A as usize] = m;
    g.sigma2[BlockId::V2A as usize] = s;
    g
}

/// Chains a statistics gradient back onto the raw scores. Blocks whose
/// variance sits on the floor pass no variance gradient.
pub fn scores_grad(scores: &Tensor, t_a: usize, t_v: usize, grad: &StatsGrad, weight: f64) -> Result<Tensor> {
    check_square(scores, t_a, t_v)?;
    let mut out = Tensor::zeros(scores.rows(), scores.cols());
    for block in BlockId::ALL {
        let (g_mu, mut g_var) = grad.get(block);
        if g_mu == 0.0 && g_var == 0.0 {
            continue;
        }
        let (mu, var) = moments(scores, block, t_a, t_v);
        if var < VARIANCE_FLOOR {
            g_var = 0.0;
        }
        let (r0, c0, rows, cols) = block.range(t_a, t_v);
        let n = (rows * cols) as f64;
        for r in r0..r0 + rows {
            for c in c0..c0 + cols {
                let x = scores.get(r, c);
                out.set(r, c, weight * (g_mu / n + g_var * 2.0 * (x - mu) / n));
            }
        }
    }
    Ok(out)
}

/// Self-minus-cross mean gaps `(μ_V2V − μ_A2V, μ_A2A − μ_V2A)`.
pub fn attention_gap(stats: &AttentionStats) -> (f64, f64) {
    (stats.v2v.mu - stats.a2v.mu, stats.a2a.mu - stats.v2a.mu)
}

/// Batch mean of [`attention_gap`].
pub fn mean_attention_gap(stats: &[AttentionStats]) -> (f64, f64) {
    let n = stats.len().max(1) as f64;
    let (gv, ga) = stats.iter().map(attention_gap).fold((0.0, 0.0), |acc, g| (acc.0 + g.0, acc.1 + g.1));
    (gv / n, ga / n)
}
