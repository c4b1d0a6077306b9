//! Train / validation / test partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PairedDataset;

pub const MIN_SPLIT_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// `(train, val, test)`.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` followed by a contiguous partition of sizes
/// `floor(f_train * n)`, `floor(f_val * n)` and the remainder.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < MIN_SPLIT_SAMPLES {
        return Err(Error::Split(format!(
            "{n} samples cannot fill three partitions (need >= {MIN_SPLIT_SAMPLES})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // The small slack absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    let n_train = (spec.fractions[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = (spec.fractions[1] * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Split(format!(
            "fractions {:?} leave an empty partition for {n} samples",
            spec.fractions
        )));
    }
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(SplitIndices {
        train: order,
        val,
        test,
    })
}

pub fn split(
    dataset: &PairedDataset,
    spec: &SplitSpec,
) -> Result<(PairedDataset, PairedDataset, PairedDataset)> {
    if dataset.is_empty() {
        return Err(Error::Split("dataset is empty".into()));
    }
    let idx = split_indices(dataset.len(), spec)?;
    Ok((
        dataset.subset(&idx.train),
        dataset.subset(&idx.val),
        dataset.subset(&idx.test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(n: usize) -> (usize, usize, usize) {
        let s = split_indices(n, &SplitSpec::default()).unwrap();
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn hundred_splits_70_10_20() {
        assert_eq!(sizes(100), (70, 10, 20));
    }

    #[test]
    fn ten_splits_7_1_2() {
        assert_eq!(sizes(10), (7, 1, 2));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        assert!(matches!(
            split_indices(9, &SplitSpec::default()),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn seeds_control_the_partition() {
        let a = split_indices(100, &SplitSpec::default()).unwrap();
        let b = split_indices(100, &SplitSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = split_indices(
            100,
            &SplitSpec {
                seed: 1,
                ..SplitSpec::default()
            },
        )
        .unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let spec = SplitSpec {
            fractions: [0.7, 0.2, 0.2],
            seed: 0,
        };
        assert!(matches!(split_indices(100, &spec), Err(Error::Config(_))));
        let spec = SplitSpec {
            fractions: [1.1, -0.05, -0.05],
            seed: 0,
        };
        assert!(split_indices(100, &spec).is_err());
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(n in 10usize..2000, seed in any::<u64>()) {
            let s = split_indices(n, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        }
    }
}
