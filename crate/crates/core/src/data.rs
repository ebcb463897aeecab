//! Raw two-modality samples, splits, and seeded batching.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch};
use crate::rng;
use crate::tensor::Tensor;

/// One sample before encoding: `T_A × raw_dim` and `T_V × raw_dim` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub a: Tensor,
    pub v: Tensor,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub samples: Vec<RawSample>,
}

impl Split {
    pub fn new(samples: Vec<RawSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Encodes the samples at `indices` into a token batch.
    pub fn encode(&self, model: &Model, indices: &[usize]) -> Result<TokenBatch> {
        let raw_a: Vec<Tensor> = indices.iter().map(|&i| self.samples[i].a.clone()).collect();
        let raw_v: Vec<Tensor> = indices.iter().map(|&i| self.samples[i].v.clone()).collect();
        let labels = indices.iter().map(|&i| self.samples[i].label).collect();
        model.encode(&raw_a, &raw_v, labels)
    }

    pub fn bitwise_eq(&self, other: &Split) -> bool {
        fn eq(a: &Tensor, b: &Tensor) -> bool {
            a.shape() == b.shape() && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.len() == other.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(x, y)| x.label == y.label && eq(&x.a, &y.a) && eq(&x.v, &y.v))
    }
}

/// Sample order shuffled by the `order` substream of `seed`, cut into
/// batches of at most `batch_size`. Every index appears exactly once.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, rng::ORDER));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
