//! Entropy objectives over predicted class distributions: Shannon entropy,
//! class ranks, the top-k reliable set, principal entropy, and a
//! class-balance regulariser.
//!
//! Gradients are w.r.t. the probabilities. The reliable set is treated as a
//! constant inside a step.

use crate::error::{Error, Result};

/// Probabilities below this contribute nothing to any entropy term.
pub const PROB_FLOOR: f64 = 1e-12;

/// A validated probability vector together with its ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    p: Vec<f64>,
    ranks: Vec<usize>,
}

impl Prediction {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Parameter("empty probability vector".into()));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Numeric("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probabilities sum to {total}")));
        }
        let ranks = ranks(&p);
        Ok(Self { p, ranks })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p < PROB_FLOOR {
        0.0
    } else {
        p * p.ln()
    }
}

#[inline]
fn plogp_grad(p: f64) -> f64 {
    if p < PROB_FLOOR {
        0.0
    } else {
        p.ln() + 1.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| plogp(x)).sum::<f64>()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Class order by descending probability, ties by ascending index.
pub fn class_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    order
}

/// 1-based rank of each class. Always a permutation of `1..=C`.
pub fn ranks(p: &[f64]) -> Vec<usize> {
    let mut r = vec![0; p.len()];
    for (pos, &class) in class_order(p).iter().enumerate() {
        r[class] = pos + 1;
    }
    r
}

fn check_k(k: usize, c: usize) -> Result<()> {
    if k == 0 || k > c {
        return Err(Error::Parameter(format!("k = {k} outside [1, {c}]")));
    }
    Ok(())
}

/// Indices of the `k` top-ranked classes, ascending.
pub fn reliable_set(p: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, p.len())?;
    let mut set: Vec<usize> = class_order(p).into_iter().take(k).collect();
    set.sort_unstable();
    Ok(set)
}

/// Membership mask of the reliable set.
pub fn reliable_mask(p: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; p.len()];
    for i in reliable_set(p, k)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// Entropy restricted to a fixed class mask.
pub fn masked_entropy(p: &[f64], mask: &[bool]) -> f64 {
    -p.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| plogp(x)).sum::<f64>()
}

/// Gradient of [`masked_entropy`] w.r.t. `p`.
pub fn masked_entropy_grad(p: &[f64], mask: &[bool]) -> Vec<f64> {
    p.iter().zip(mask).map(|(&x, &m)| if m { -plogp_grad(x) } else { 0.0 }).collect()
}

/// Entropy summed over the `k` most probable classes only.
pub fn principal_entropy(p: &[f64], k: usize) -> Result<f64> {
    Ok(masked_entropy(p, &reliable_mask(p, k)?))
}

pub fn principal_entropy_grad(p: &[f64], k: usize) -> Result<Vec<f64>> {
    Ok(masked_entropy_grad(p, &reliable_mask(p, k)?))
}

/// Mean principal entropy over a batch, reliable set chosen per sample.
pub fn pem_loss(batch: &[Vec<f64>], k: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for p in batch {
        total += principal_entropy(p, k)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean Shannon entropy over a batch.
pub fn em_loss(batch: &[Vec<f64>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(batch.iter().map(|p| entropy(p)).sum::<f64>() / batch.len() as f64)
}

fn batch_mean(batch: &[Vec<f64>]) -> Vec<f64> {
    let c = batch[0].len();
    let mut mean = vec![0.0; c];
    for p in batch {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `−H(mean(p))`: lowest when the batch spreads evenly over classes.
pub fn class_balance_loss(batch: &[Vec<f64>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(-entropy(&batch_mean(batch)))
}

/// Gradient of [`class_balance_loss`] w.r.t. each sample's `p`.
pub fn class_balance_grad(batch: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mean = batch_mean(batch);
    let n = batch.len() as f64;
    let g: Vec<f64> = mean.iter().map(|&m| plogp_grad(m) / n).collect();
    vec![g; batch.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert_abs_diff_eq!(entropy(&[0.25; 4]), 4f64.ln(), epsilon = 1e-15);
        // −(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let by_hand = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert_abs_diff_eq!(entropy(&[0.7, 0.2, 0.1]), by_hand, epsilon = 1e-15);
        assert_abs_diff_eq!(by_hand, 0.80182, epsilon = 1e-5);
    }

    #[test]
    fn rank_cases() {
        assert_eq!(ranks(&[0.5, 0.3, 0.2]), vec![1, 2, 3]);
        assert_eq!(ranks(&[0.2, 0.3, 0.5]), vec![3, 2, 1]);
        assert_eq!(ranks(&[0.4, 0.4, 0.2]), vec![1, 2, 3]);
    }

    #[test]
    fn reliable_set_cases() {
        assert_eq!(reliable_set(&[0.5, 0.3, 0.2], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(reliable_set(&[0.5, 0.3, 0.2], 1).unwrap(), vec![0]);
        assert_eq!(reliable_set(&[0.1, 0.6, 0.3], 2).unwrap(), vec![1, 2]);
        assert!(matches!(reliable_set(&[0.5, 0.5], 0), Err(Error::Parameter(_))));
        assert!(matches!(reliable_set(&[0.5, 0.5], 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn principal_entropy_cases() {
        let p = [0.7, 0.2, 0.1];
        assert_eq!(principal_entropy(&p, 3).unwrap(), entropy(&p));
        let by_hand = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln());
        assert_abs_diff_eq!(principal_entropy(&p, 2).unwrap(), by_hand, epsilon = 1e-15);
        assert_abs_diff_eq!(by_hand, 0.57156, epsilon = 1e-5);
        for k in 1..=3 {
            assert_eq!(principal_entropy(&[0.0, 0.0, 1.0], k).unwrap(), 0.0);
        }
    }

    #[test]
    fn pem_batch_cases() {
        assert_eq!(pem_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap(), 0.0);
        let p = vec![0.6, 0.3, 0.1];
        assert_eq!(pem_loss(std::slice::from_ref(&p), 2).unwrap(), principal_entropy(&p, 2).unwrap());
        assert!(matches!(pem_loss(&[], 1), Err(Error::Contract(_))));
    }

    #[test]
    fn class_balance_extremes() {
        let batch = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        assert_abs_diff_eq!(class_balance_loss(&batch).unwrap(), -(3f64.ln()), epsilon = 1e-15);
        let same = vec![vec![0.0, 1.0, 0.0]; 4];
        assert_eq!(class_balance_loss(&same).unwrap(), 0.0);
    }

    #[test]
    fn class_balance_gradient_matches_finite_differences() {
        let batch = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]];
        let g = class_balance_grad(&batch);
        let h = 1e-6;
        for n in 0..2 {
            for c in 0..3 {
                let mut p = batch.clone();
                p[n][c] += h;
                let mut m = batch.clone();
                m[n][c] -= h;
                let num = (class_balance_loss(&p).unwrap() - class_balance_loss(&m).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(g[n][c], num, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn prediction_validation() {
        assert!(Prediction::new(vec![0.5, 0.6]).is_err());
        assert!(Prediction::new(vec![]).is_err());
        let p = Prediction::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(p.ranks(), &[2, 1]);
        assert_eq!(p.argmax(), 1);
    }

    fn simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn ranks_are_a_permutation_with_argmax_first(p in (2usize..12).prop_flat_map(simplex)) {
            let r = ranks(&p);
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=p.len()).collect::<Vec<_>>());
            prop_assert_eq!(r[argmax(&p)], 1);
        }

        #[test]
        fn principal_entropy_bounded_and_monotone(p in (2usize..12).prop_flat_map(simplex)) {
            let h = entropy(&p);
            let mut prev = 0.0;
            for k in 1..=p.len() {
                let hp = principal_entropy(&p, k).unwrap();
                prop_assert!(hp >= 0.0);
                prop_assert!(hp <= h + 1e-15);
                prop_assert!(hp >= prev);
                prev = hp;
                if k < p.len() {
                    let a = reliable_set(&p, k).unwrap();
                    let b = reliable_set(&p, k + 1).unwrap();
                    prop_assert!(a.iter().all(|i| b.contains(i)));
                }
            }
            prop_assert_eq!(principal_entropy_grad(&p, p.len()).unwrap(), masked_entropy_grad(&p, &vec![true; p.len()]));
        }
    }
}
