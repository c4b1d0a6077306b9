//! Mini-batch ordering and assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::PairedSample;
use crate::tensor::Tensor;

/// Stacked observations for both modalities plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: [Tensor; 2],
    pub y: Vec<usize>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PairedSample>) -> Result<Self> {
        let samples: Vec<&PairedSample> = samples.into_iter().collect();
        let m1: Vec<&Tensor> = samples.iter().map(|s| &s.x_m1).collect();
        let m2: Vec<&Tensor> = samples.iter().map(|s| &s.x_m2).collect();
        Ok(Self {
            x: [Tensor::stack(&m1)?, Tensor::stack(&m2)?],
            y: samples.iter().map(|s| s.y).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Index batches for one epoch: a permutation of `0..n` drawn from
/// `(shuffle_seed, epoch)`, cut into chunks of `batch_size` (last one short).
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
