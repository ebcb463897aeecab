//! Frozen-model diagnostics: per-batch attention-gap records, probability
//! error by rank, and Spearman rank correlation.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{block_stats, mean_attention_gap, AttentionStats, BlockId};
use crate::data::{batch_order, Split};
use crate::error::{Error, Result};
use crate::model::{predict, Model};
use crate::pem::ranks;

/// Batch-mean block statistics of the raw attention scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub batch_index: usize,
    pub gap_v: f64,
    pub gap_a: f64,
    pub mu_a2a: f64,
    pub mu_a2v: f64,
    pub mu_v2a: f64,
    pub mu_v2v: f64,
    pub sigma2_a2a: f64,
    pub sigma2_a2v: f64,
    pub sigma2_v2a: f64,
    pub sigma2_v2v: f64,
}

impl GapRecord {
    pub fn from_stats(batch_index: usize, stats: &[AttentionStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::Contract("gap record over an empty batch".into()));
        }
        let n = stats.len() as f64;
        let mean = |block: BlockId, var: bool| {
            stats
                .iter()
                .map(|s| {
                    let b = s.get(block);
                    if var {
                        b.sigma2
                    } else {
                        b.mu
                    }
                })
                .sum::<f64>()
                / n
        };
        let (gap_v, gap_a) = mean_attention_gap(stats);
        Ok(Self {
            batch_index,
            gap_v,
            gap_a,
            mu_a2a: mean(BlockId::A2A, false),
            mu_a2v: mean(BlockId::A2V, false),
            mu_v2a: mean(BlockId::V2A, false),
            mu_v2v: mean(BlockId::V2V, false),
            sigma2_a2a: mean(BlockId::A2A, true),
            sigma2_a2v: mean(BlockId::A2V, true),
            sigma2_v2a: mean(BlockId::V2A, true),
            sigma2_v2v: mean(BlockId::V2V, true),
        })
    }
}

/// Per-sample block statistics of the frozen model on the given indices.
pub fn split_stats(split: &Split, model: &Model, indices: &[usize]) -> Result<Vec<AttentionStats>> {
    let dims = model.dims();
    let batch = split.encode(model, indices)?;
    predict(&batch, &model.fusion)?.iter().map(|o| block_stats(&o.scores, dims.t_a, dims.t_v)).collect()
}

/// One record per batch, batches in the same seeded order as adaptation.
pub fn gap_records(split: &Split, model: &Model, batch_size: usize, seed: u64) -> Result<Vec<GapRecord>> {
    batch_order(split.len(), batch_size, seed)?
        .iter()
        .enumerate()
        .map(|(i, idx)| GapRecord::from_stats(i, &split_stats(split, model, idx)?))
        .collect()
}

/// Mean `(gap_v, gap_a)` of the frozen model over a whole split.
pub fn split_gap(split: &Split, model: &Model) -> Result<(f64, f64)> {
    let indices: Vec<usize> = (0..split.len()).collect();
    let mut stats = Vec::with_capacity(split.len());
    for chunk in indices.chunks(256) {
        stats.extend(split_stats(split, model, chunk)?);
    }
    if stats.is_empty() {
        return Err(Error::Contract("gap over an empty split".into()));
    }
    Ok(mean_attention_gap(&stats))
}

/// Mean `|p_corrupt − p_clean|` per rank, where rank is taken from the
/// corrupted prediction. Entry 0 is rank 1.
pub fn rank_errors(clean: &[Vec<f64>], corrupted: &[Vec<f64>]) -> Result<Vec<f64>> {
    if clean.len() != corrupted.len() {
        return Err(Error::Contract(format!("{} clean vs {} corrupted predictions", clean.len(), corrupted.len())));
    }
    let Some(first) = clean.first() else {
        return Err(Error::Contract("rank errors over an empty set".into()));
    };
    let c = first.len();
    let mut sums = vec![0.0; c];
    for (p, q) in clean.iter().zip(corrupted) {
        if p.len() != c || q.len() != c {
            return Err(Error::Dimension { op: "rank_errors", left: (1, p.len()), right: (1, q.len()) });
        }
        for (i, r) in ranks(q).into_iter().enumerate() {
            sums[r - 1] += (q[i] - p[i]).abs();
        }
    }
    let n = clean.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = r;
        }
        start = end;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in spearman input".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroNorm("spearman input is constant"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn rank_errors_by_corrupted_rank() {
        let clean = vec![vec![0.7, 0.2, 0.1]];
        let corrupted = vec![vec![0.2, 0.5, 0.3]];
        let e = rank_errors(&clean, &corrupted).unwrap();
        assert_eq!(e.len(), 3);
        assert!((e[0] - 0.3).abs() < 1e-15);
        assert!((e[1] - 0.2).abs() < 1e-15);
        assert!((e[2] - 0.5).abs() < 1e-15);
        assert!(rank_errors(&clean, &[]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_symmetric(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&y, &x)) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn spearman_invariant_under_monotone_maps(x in proptest::collection::vec(-5.0f64..5.0, 3..20)) {
            let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            if let Ok(r) = spearman(&x, &y) {
                prop_assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }
}
