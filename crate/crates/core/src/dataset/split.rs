use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, Manifest};

pub const DEFAULT_RATIOS: [f64; 3] = [0.75, 0.15, 0.10];

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

/// Partition sizes for `n` samples.
///
/// Train takes the ceiling of its quota, validation its nearest integer with
/// ties rounded down, and test the remainder. For 2091 samples at 75:15:10
/// this yields 1569/314/208; for 10 samples 8/1/1.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(DatasetError::BadRatios(ratios));
    }
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let nf = n as f64;
    // Quotas are nudged by a tolerance so exact products like 0.15 * 100
    // do not pick up representation error.
    let train = ((ratios[0] * nf) - 1e-9).ceil().max(0.0) as usize;
    let train = train.min(n);
    let val = ((ratios[1] * nf) - 0.5 - 1e-9).ceil().max(0.0) as usize;
    let val = val.min(n - train);
    Ok([train, val, n - train - val])
}

/// Seeded shuffle followed by a cut at [`split_sizes`].
pub fn split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Splits, DatasetError> {
    let [n_train, n_val, _] = split_sizes(manifest.len(), ratios)?;
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(Splits {
        train: manifest.subset(train),
        val: manifest.subset(val),
        test: manifest.subset(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn manifest(n: usize) -> Manifest {
        let samples = (0..n)
            .map(|i| Sample {
                image: format!("{i}.png"),
                width: 10,
                height: 10,
                bbox: BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                landmarks: vec![],
                visible: None,
            })
            .collect();
        Manifest::new("catflw48", samples)
    }

    #[test]
    fn catflw_split_sizes() {
        assert_eq!(split_sizes(2091, DEFAULT_RATIOS).unwrap(), [1569, 314, 208]);
    }

    #[test]
    fn ten_samples() {
        assert_eq!(split_sizes(10, DEFAULT_RATIOS).unwrap(), [8, 1, 1]);
        assert_eq!(split_sizes(100, DEFAULT_RATIOS).unwrap(), [75, 15, 10]);
        assert_eq!(split_sizes(20, DEFAULT_RATIOS).unwrap(), [15, 3, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(split_sizes(0, DEFAULT_RATIOS), Err(DatasetError::Empty)));
        assert!(matches!(
            split_sizes(10, [0.5, 0.5, 0.5]),
            Err(DatasetError::BadRatios(_))
        ));
    }

    #[test]
    fn same_seed_same_partition() {
        let m = manifest(50);
        assert_eq!(split(&m, DEFAULT_RATIOS, 7).unwrap(), split(&m, DEFAULT_RATIOS, 7).unwrap());
        assert_ne!(
            split(&m, DEFAULT_RATIOS, 7).unwrap().train,
            split(&m, DEFAULT_RATIOS, 8).unwrap().train
        );
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..400, seed in any::<u64>()) {
            let m = manifest(n);
            let s = split(&m, DEFAULT_RATIOS, seed).unwrap();
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            let mut all: Vec<&str> = s.train.samples.iter()
                .chain(&s.val.samples)
                .chain(&s.test.samples)
                .map(|x| x.image.as_str())
                .collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
