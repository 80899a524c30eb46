use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding::{rng, Stream};

/// Sample indices of one mini-batch, unique within the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices(pub Vec<usize>);

impl BatchIndices {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Partitions a permutation of `0..n` into consecutive batches.
///
/// The permutation depends only on `(seed, epoch)`. The final short batch
/// is kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<BatchIndices>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed, Stream::Batches { epoch }));
    Ok(order
        .chunks(batch_size)
        .map(|c| BatchIndices(c.to_vec()))
        .collect())
}
