//! Per-batch retain/forget class sets and their multi-hot encodings.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Binary vector over the label space.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MultiHotClassSet {
    bits: Vec<u8>,
}

impl MultiHotClassSet {
    pub fn zeros(num_classes: usize) -> Self {
        MultiHotClassSet {
            bits: vec![0; num_classes],
        }
    }

    pub fn ones(num_classes: usize) -> Self {
        MultiHotClassSet {
            bits: vec![1; num_classes],
        }
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract("multi-hot entries must be 0 or 1".into()));
        }
        Ok(MultiHotClassSet { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class).is_some_and(|&b| b == 1)
    }

    /// Indices of set bits, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Dot product with a one-hot label, i.e. membership of `label`.
    pub fn dot_label(&self, label: usize) -> u8 {
        self.bits.get(label).copied().unwrap_or(0)
    }

    /// Elementwise OR (max) with another vector of equal length.
    pub fn or(&self, other: &MultiHotClassSet) -> Result<MultiHotClassSet> {
        if self.len() != other.len() {
            return Err(Error::shape("or", &[self.len()], &[other.len()]));
        }
        Ok(MultiHotClassSet {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a.max(b)).collect(),
        })
    }
}

/// Sum of one-hot vectors of the unique `labels`.
pub fn multi_hot<I: IntoIterator<Item = usize>>(labels: I, num_classes: usize) -> Result<MultiHotClassSet> {
    let mut bits = vec![0u8; num_classes];
    for l in labels {
        if l >= num_classes {
            return Err(Error::Index {
                index: l,
                len: num_classes,
            });
        }
        bits[l] = 1;
    }
    Ok(MultiHotClassSet { bits })
}

/// `1 - a`.
pub fn complement(a: &MultiHotClassSet) -> MultiHotClassSet {
    MultiHotClassSet {
        bits: a.bits.iter().map(|&b| 1 - b).collect(),
    }
}

/// Which parts of the drop-and-expand randomization are applied per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropExpand {
    None,
    DropOnly,
    DropAndExpand,
}

impl fmt::Display for DropExpand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropExpand::None => "none",
            DropExpand::DropOnly => "drop_only",
            DropExpand::DropAndExpand => "drop_and_expand",
        })
    }
}

impl FromStr for DropExpand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DropExpand::None),
            "drop_only" => Ok(DropExpand::DropOnly),
            "drop_and_expand" => Ok(DropExpand::DropAndExpand),
            other => Err(Error::Config(format!(
                "drop_expand must be none|drop_only|drop_and_expand, got {other:?}"
            ))),
        }
    }
}

/// Retain/forget split for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub retain_set: BTreeSet<usize>,
    pub forget_set: BTreeSet<usize>,
    pub drop_set: BTreeSet<usize>,
    pub expand_set: BTreeSet<usize>,
    pub retain: MultiHotClassSet,
    pub forget: MultiHotClassSet,
    pub r_a: usize,
    pub r_u: usize,
}

/// First `k` entries of a partial Fisher-Yates shuffle of `pool`.
fn choose_subset<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut v = pool.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..v.len());
        v.swap(i, j);
    }
    v.truncate(k);
    v
}

impl BatchPlan {
    /// Plan with explicit drop/expand counts; subsets are drawn from `rng`.
    pub fn from_counts<R: Rng + ?Sized>(
        batch_labels: &BTreeSet<usize>,
        num_classes: usize,
        r_a: usize,
        r_u: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&bad) = batch_labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                index: bad,
                len: num_classes,
            });
        }
        let present: Vec<usize> = batch_labels.iter().copied().collect();
        let absent: Vec<usize> = (0..num_classes).filter(|c| !batch_labels.contains(c)).collect();
        if r_a > present.len() || r_u > absent.len() {
            return Err(Error::Contract(format!(
                "drop {r_a} of {} / expand {r_u} of {}",
                present.len(),
                absent.len()
            )));
        }
        let drop_set: BTreeSet<usize> = choose_subset(&present, r_a, rng).into_iter().collect();
        let expand_set: BTreeSet<usize> = choose_subset(&absent, r_u, rng).into_iter().collect();
        let retain_set: BTreeSet<usize> = batch_labels
            .difference(&drop_set)
            .copied()
            .chain(expand_set.iter().copied())
            .collect();
        let forget_set: BTreeSet<usize> = (0..num_classes).filter(|c| !retain_set.contains(c)).collect();
        let retain = multi_hot(retain_set.iter().copied(), num_classes)?;
        let forget = complement(&retain);
        Ok(BatchPlan {
            retain_set,
            forget_set,
            drop_set,
            expand_set,
            retain,
            forget,
            r_a,
            r_u,
        })
    }
}

/// Randomized retain/forget sets for a batch containing `batch_labels`.
///
/// `r_a` is uniform on `[0, |present|)` and `r_u` uniform on `[0, |absent|)`
/// (zero when nothing is absent). `mode` disables either draw.
pub fn drop_and_expand<R: Rng + ?Sized>(
    batch_labels: &BTreeSet<usize>,
    num_classes: usize,
    mode: DropExpand,
    rng: &mut R,
) -> Result<BatchPlan> {
    if batch_labels.is_empty() {
        return Err(Error::Contract("batch has no labels".into()));
    }
    if num_classes < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    let present = batch_labels.len();
    let absent = num_classes.saturating_sub(present);
    let r_a = match mode {
        DropExpand::None => 0,
        _ => rng.random_range(0..present),
    };
    let r_u = match mode {
        DropExpand::DropAndExpand if absent > 0 => rng.random_range(0..absent),
        _ => 0,
    };
    BatchPlan::from_counts(batch_labels, num_classes, r_a, r_u, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn multi_hot_examples() {
        assert_eq!(multi_hot([0, 2], 4).unwrap().bits(), &[1, 0, 1, 0]);
        assert_eq!(multi_hot([], 3).unwrap().bits(), &[0, 0, 0]);
        assert_eq!(multi_hot([0, 1, 2], 3).unwrap().bits(), &[1, 1, 1]);
        // duplicates collapse: the sum runs over unique labels
        assert_eq!(multi_hot([1, 1], 2).unwrap().bits(), &[0, 1]);
        assert!(matches!(multi_hot([4], 4), Err(Error::Index { index: 4, len: 4 })));
    }

    #[test]
    fn complement_examples() {
        let a = MultiHotClassSet::from_bits(vec![1, 0, 1, 0]).unwrap();
        assert_eq!(complement(&a).bits(), &[0, 1, 0, 1]);
        assert_eq!(complement(&MultiHotClassSet::ones(3)).bits(), &[0, 0, 0]);
    }

    #[test]
    fn full_batch_never_expands() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = set(&[0, 1, 2, 3]);
        for _ in 0..200 {
            let p = drop_and_expand(&all, 4, DropExpand::DropAndExpand, &mut rng).unwrap();
            assert!(p.expand_set.is_empty());
            let expect: BTreeSet<usize> = all.difference(&p.drop_set).copied().collect();
            assert_eq!(p.retain_set, expect);
        }
    }

    #[test]
    fn zero_counts_are_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = set(&[1, 3]);
        let p = BatchPlan::from_counts(&labels, 5, 0, 0, &mut rng).unwrap();
        assert_eq!(p.retain_set, labels);
        assert_eq!(p.forget_set, set(&[0, 2, 4]));
        assert_eq!(p.retain.bits(), &[0, 1, 0, 1, 0]);
        assert_eq!(p.forget.bits(), &[1, 0, 1, 0, 1]);
    }

    #[test]
    fn mode_none_keeps_batch_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = set(&[0, 2, 5]);
        for _ in 0..50 {
            let p = drop_and_expand(&labels, 8, DropExpand::None, &mut rng).unwrap();
            assert_eq!(p.retain_set, labels);
        }
    }

    #[test]
    fn r_a_is_uniform_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let labels = set(&[0, 1, 2, 3]);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let p = drop_and_expand(&labels, 8, DropExpand::DropAndExpand, &mut rng).unwrap();
            counts[p.r_a] += 1;
        }
        let e = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-square with 3 degrees of freedom
        assert!(chi2 < 11.345, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn batch_labels_can_land_in_forget_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = set(&[0, 1, 2]);
        let hits = (0..500)
            .filter(|_| {
                let p = drop_and_expand(&labels, 6, DropExpand::DropAndExpand, &mut rng).unwrap();
                labels.iter().any(|l| p.forget_set.contains(l))
            })
            .count();
        assert!(hits > 0);
    }

    #[test]
    fn deterministic_under_seed() {
        let labels = set(&[0, 1, 4, 6]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| drop_and_expand(&labels, 8, DropExpand::DropAndExpand, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
    }

    proptest! {
        #[test]
        fn plan_invariants(
            n in 2usize..12,
            raw in proptest::collection::vec(0usize..12, 1..12),
            seed in 0u64..10_000,
        ) {
            let labels: BTreeSet<usize> = raw.into_iter().map(|l| l % n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = drop_and_expand(&labels, n, DropExpand::DropAndExpand, &mut rng).unwrap();
            for i in 0..n {
                prop_assert_eq!(p.retain.bits()[i] + p.forget.bits()[i], 1);
            }
            prop_assert!(p.retain_set.is_disjoint(&p.forget_set));
            prop_assert_eq!(p.retain_set.len() + p.forget_set.len(), n);
            prop_assert!(p.drop_set.is_subset(&labels));
            prop_assert!(p.expand_set.is_disjoint(&labels));
            prop_assert_eq!(p.drop_set.len(), p.r_a);
            prop_assert!(p.r_a < labels.len());
            let absent = n - labels.len();
            prop_assert!(p.r_u < absent.max(1));
        }

        #[test]
        fn complement_is_involution(bits in proptest::collection::vec(0u8..2, 0..32)) {
            let a = MultiHotClassSet::from_bits(bits).unwrap();
            prop_assert_eq!(complement(&complement(&a)), a);
        }
    }
}
