//! Seeded k-fold plans and attribute-balanced subsampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::ReviewCorpus;
use crate::error::{Result, VeilError};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub k: usize,
    /// Slice index of every item.
    pub assignment: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Permutes `0..n` with the seed and cuts it into `k` near-equal slices.
/// Fold `f` tests on slice `f`, develops on slice `(f+1) mod k` and trains
/// on the rest, which is 8:1:1 for `k = 10`. With `k = 2` there is no
/// spare slice, so dev is the last ninth of the (permuted) non-test slice.
pub fn kfold_split(n_items: usize, k: usize, seed_value: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(VeilError::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if n_items < k {
        return Err(VeilError::Config(format!(
            "{n_items} items cannot fill {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, seed::ROLE_SPLIT, k as u64));
    order.shuffle(&mut rng);
    let base = n_items / k;
    let extra = n_items % k;
    let mut slices = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        slices.push(order[start..start + len].to_vec());
        start += len;
    }
    let mut assignment = vec![0; n_items];
    for (f, s) in slices.iter().enumerate() {
        for &i in s {
            assignment[i] = f;
        }
    }
    if k == 2 {
        let folds = (0..2)
            .map(|f| {
                let rest = &slices[1 - f];
                let n_dev = rest.len().div_ceil(9).min(rest.len() - 1);
                let (train, dev) = rest.split_at(rest.len() - n_dev);
                let (mut train, mut dev, mut test) =
                    (train.to_vec(), dev.to_vec(), slices[f].clone());
                train.sort_unstable();
                dev.sort_unstable();
                test.sort_unstable();
                Fold { train, dev, test }
            })
            .collect();
        return Ok(SplitPlan {
            k,
            assignment,
            folds,
        });
    }
    let folds = (0..k)
        .map(|f| {
            let dev_slice = (f + 1) % k;
            let mut train: Vec<usize> = (0..k)
                .filter(|&s| s != f && s != dev_slice)
                .flat_map(|s| slices[s].iter().copied())
                .collect();
            train.sort_unstable();
            let mut dev = slices[dev_slice].clone();
            dev.sort_unstable();
            let mut test = slices[f].clone();
            test.sort_unstable();
            Fold { train, dev, test }
        })
        .collect();
    Ok(SplitPlan {
        k,
        assignment,
        folds,
    })
}

/// Keeps exactly `n_per_class` reviews of every declared class of
/// `attribute`, sampled without replacement, in original corpus order.
pub fn balance_subsample(
    corpus: &ReviewCorpus,
    attribute: &str,
    n_per_class: usize,
    seed_value: u64,
) -> Result<ReviewCorpus> {
    let schema = corpus.schema();
    let classes = schema
        .values(attribute)
        .ok_or_else(|| VeilError::Config(format!("unknown attribute `{attribute}`")))?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.reviews.iter().enumerate() {
        let v = r.attribute(attribute).expect("review attributes are fixed");
        let c = schema
            .index(attribute, v)
            .ok_or_else(|| VeilError::Data(format!("undeclared {attribute} `{v}`")))?;
        by_class.entry(c).or_default().push(i);
    }
    let deficits: Vec<String> = classes
        .iter()
        .enumerate()
        .filter_map(|(c, name)| {
            let have = by_class.get(&c).map_or(0, Vec::len);
            (have < n_per_class).then(|| format!("{name}: {have} < {n_per_class}"))
        })
        .collect();
    if !deficits.is_empty() {
        return Err(VeilError::Data(format!(
            "not enough records per class ({})",
            deficits.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, seed::ROLE_SUBSAMPLE, 0));
    let mut keep = Vec::with_capacity(n_per_class * classes.len());
    for c in 0..classes.len() {
        let members = by_class.get(&c).map(Vec::as_slice).unwrap_or(&[]);
        keep.extend(members.choose_multiple(&mut rng, n_per_class).copied());
    }
    keep.sort_unstable();
    Ok(corpus.subset(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{Review, LOC_VALUES};

    #[test]
    fn ten_items_ten_folds() {
        let plan = kfold_split(10, 10, 3).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.dev.len(), f.test.len()), (8, 1, 1));
        }
    }

    #[test]
    fn six_hundred_sentences() {
        let plan = kfold_split(600, 10, 0).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.dev.len(), f.test.len()), (480, 60, 60));
        }
    }

    #[test]
    fn tests_partition_and_folds_are_disjoint() {
        let plan = kfold_split(103, 7, 9).unwrap();
        let mut seen: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..103).collect::<Vec<_>>());
        for f in &plan.folds {
            let mut all = [f.train.clone(), f.dev.clone(), f.test.clone()].concat();
            all.sort_unstable();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
        }
        assert_eq!(plan, kfold_split(103, 7, 9).unwrap());
        assert_ne!(plan, kfold_split(103, 7, 10).unwrap());
        assert!(kfold_split(5, 10, 0).is_err());
        assert!(kfold_split(5, 1, 0).is_err());
    }

    #[test]
    fn two_folds_carve_dev_from_train() {
        let plan = kfold_split(50, 2, 1).unwrap();
        for f in &plan.folds {
            assert_eq!(f.test.len(), 25);
            assert_eq!((f.train.len(), f.dev.len()), (22, 3));
        }
    }

    fn corpus(counts: [usize; 5]) -> ReviewCorpus {
        let mut reviews = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                reviews.push(Review {
                    text: format!("r{c}-{i}"),
                    rating: 1 + (i % 5) as u8,
                    sex: "F".into(),
                    age: "U35".into(),
                    loc: LOC_VALUES[c].into(),
                });
            }
        }
        ReviewCorpus {
            reviews,
            loc_classes: LOC_VALUES.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn balanced_counts_and_determinism() {
        let c = corpus([30, 12, 50, 20, 15]);
        let b = balance_subsample(&c, "loc", 12, 4).unwrap();
        assert_eq!(b.len(), 60);
        for l in LOC_VALUES {
            assert_eq!(b.reviews.iter().filter(|r| r.loc == l).count(), 12);
        }
        // the smallest class is taken whole
        assert_eq!(b.reviews.iter().filter(|r| r.loc == "UK").count(), 12);
        assert_eq!(b, balance_subsample(&c, "loc", 12, 4).unwrap());
        // records are untouched and keep their relative order
        let pos: Vec<usize> = b
            .reviews
            .iter()
            .map(|r| c.reviews.iter().position(|x| x == r).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(balance_subsample(&c, "loc", 0, 1).unwrap().is_empty());
        let err = balance_subsample(&c, "loc", 13, 1).unwrap_err().to_string();
        assert!(err.contains("UK: 12 < 13"), "{err}");
    }
}
