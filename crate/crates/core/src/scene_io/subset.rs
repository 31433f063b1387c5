use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Draw `k` distinct training ids uniformly without replacement.
///
/// The ids are sorted, shuffled once with `seed`, and the first `k` are
/// returned, so for a fixed seed the subsets are nested as `k` grows.
pub fn sample_training_subset(train_ids: &[String], k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 || k > train_ids.len() {
        return Err(Error::invalid(format!(
            "subset size {k} is outside 1..={}",
            train_ids.len()
        )));
    }
    let mut ids = train_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != train_ids.len() {
        return Err(Error::invalid("training ids contain duplicates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(k);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("scene_{i:04}")).collect()
    }

    #[test]
    fn full_size_returns_everything() {
        let all = ids(181);
        for seed in [0, 1, 99] {
            let s: HashSet<_> = sample_training_subset(&all, 181, seed).unwrap().into_iter().collect();
            assert_eq!(s.len(), 181);
        }
    }

    #[test]
    fn deterministic_and_nested() {
        let all = ids(181);
        let a = sample_training_subset(&all, 5, 42).unwrap();
        assert_eq!(a, sample_training_subset(&all, 5, 42).unwrap());
        let b: HashSet<_> = sample_training_subset(&all, 10, 42).unwrap().into_iter().collect();
        assert!(a.iter().all(|id| b.contains(id)));
    }

    #[test]
    fn out_of_range() {
        assert!(sample_training_subset(&ids(5), 0, 1).is_err());
        assert!(sample_training_subset(&ids(5), 6, 1).is_err());
    }

    proptest! {
        #[test]
        fn pure_in_inputs_and_distinct(n in 1usize..60, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let all = ids(n);
            let k = 1 + ((n - 1) as f64 * frac) as usize;
            let mut rev = all.clone();
            rev.reverse();
            let a = sample_training_subset(&all, k, seed).unwrap();
            prop_assert_eq!(&a, &sample_training_subset(&rev, k, seed).unwrap());
            let set: HashSet<_> = a.iter().collect();
            prop_assert_eq!(set.len(), k);
        }
    }
}
