use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Partition};
use crate::error::{Error, Result};

/// Per unseen category: images used to condition generation and the disjoint held-out images
/// generated sets are compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct UnseenSplit {
    pub conditioning: BTreeMap<usize, Vec<usize>>,
    pub reference: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSplits {
    pub train: BTreeMap<usize, Vec<usize>>,
    pub val: BTreeMap<usize, Vec<usize>>,
    pub test: BTreeMap<usize, Vec<usize>>,
}

fn shuffled_indices(n: usize, seed: u64, category: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(
        seed ^ (category as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
    ));
    idx
}

/// Splits every unseen category into `parts[0]` conditioning and `parts[1]` reference images.
/// The parts must be non-empty and cover each category exactly.
pub fn split_unseen(dataset: &Dataset, parts: [usize; 2], seed: u64) -> Result<UnseenSplit> {
    if parts.contains(&0) {
        return Err(Error::Validation(format!(
            "unseen split {}:{} leaves one side empty",
            parts[0], parts[1]
        )));
    }
    let mut split = UnseenSplit {
        conditioning: BTreeMap::new(),
        reference: BTreeMap::new(),
    };
    for &cat in dataset.partition(Partition::Unseen) {
        let n = dataset.images_in(cat);
        if parts[0] + parts[1] != n {
            return Err(Error::Validation(format!(
                "unseen split {}:{} does not partition the {n} images of '{}'",
                parts[0],
                parts[1],
                dataset.category(cat).name
            )));
        }
        let idx = shuffled_indices(n, seed, cat);
        split.conditioning.insert(cat, idx[..parts[0]].to_vec());
        split.reference.insert(cat, idx[parts[0]..].to_vec());
    }
    Ok(split)
}

/// Disjoint per-category train/val/test image sets over the unseen categories, with exactly
/// the requested counts.
pub fn classification_splits(
    dataset: &Dataset,
    counts: [usize; 3],
    seed: u64,
) -> Result<ClassificationSplits> {
    if counts.contains(&0) {
        return Err(Error::Validation(format!(
            "classification split {counts:?} has an empty part"
        )));
    }
    let total: usize = counts.iter().sum();
    let mut splits = ClassificationSplits {
        train: BTreeMap::new(),
        val: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for &cat in dataset.partition(Partition::Unseen) {
        let n = dataset.images_in(cat);
        if total > n {
            return Err(Error::Validation(format!(
                "classification split {}:{}:{} needs {total} images but '{}' has {n}",
                counts[0],
                counts[1],
                counts[2],
                dataset.category(cat).name
            )));
        }
        let idx = shuffled_indices(n, seed.wrapping_add(1), cat);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        splits.train.insert(cat, idx[..a].to_vec());
        splits.val.insert(cat, idx[a..b].to_vec());
        splits.test.insert(cat, idx[b..total].to_vec());
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifestRow {
    pub category: String,
    pub image: String,
    pub partition: String,
}

impl SplitManifestRow {
    pub fn rows(
        dataset: &Dataset,
        partition: &str,
        sets: &BTreeMap<usize, Vec<usize>>,
    ) -> Vec<SplitManifestRow> {
        sets.iter()
            .flat_map(|(&cat, images)| {
                let c = dataset.category(cat);
                images.iter().map(move |&i| SplitManifestRow {
                    category: c.name.clone(),
                    image: c.images[i].name.clone(),
                    partition: partition.to_string(),
                })
            })
            .collect()
    }
}

/// Writes `category,image,partition` rows.
pub fn write_split_manifest(path: &Path, rows: &[SplitManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "image", "partition"])?;
    for r in rows {
        w.write_record([&r.category, &r.image, &r.partition])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::SyntheticSpec;
    use proptest::prelude::*;

    fn assert_partition(sets: &[&Vec<usize>], n: usize) {
        let mut all: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        let len = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), len, "sets overlap");
        assert!(all.iter().all(|&i| i < n));
    }

    #[test]
    fn flower_shaped_unseen_split() {
        let ds = SyntheticSpec::new(6, 40, 4).build().unwrap();
        let split = split_unseen(&ds, [10, 30], 0).unwrap();
        for cat in ds.partition(Partition::Unseen) {
            let (a, b) = (&split.conditioning[cat], &split.reference[cat]);
            assert_eq!(a.len() + b.len(), 40);
            assert_partition(&[a, b], 40);
        }
    }

    #[test]
    fn degenerate_unseen_split_rejected() {
        let ds = SyntheticSpec::new(6, 40, 4).build().unwrap();
        assert!(matches!(split_unseen(&ds, [0, 40], 0), Err(Error::Validation(_))));
        assert!(matches!(split_unseen(&ds, [10, 20], 0), Err(Error::Validation(_))));
    }

    #[test]
    fn classification_counts() {
        let ds = SyntheticSpec::new(6, 40, 4).build().unwrap();
        let s = classification_splits(&ds, [10, 15, 15], 3).unwrap();
        for cat in ds.partition(Partition::Unseen) {
            assert_eq!(s.train[cat].len(), 10);
            assert_eq!(s.val[cat].len(), 15);
            assert_eq!(s.test[cat].len(), 15);
            assert_partition(&[&s.train[cat], &s.val[cat], &s.test[cat]], 40);
        }
        let ds = SyntheticSpec::new(6, 100, 4).build().unwrap();
        let s = classification_splits(&ds, [30, 35, 35], 3).unwrap();
        assert_eq!(s.test.values().next().unwrap().len(), 35);
        assert!(matches!(
            classification_splits(&ds, [50, 35, 35], 3),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn manifest_csv() {
        let ds = SyntheticSpec::new(4, 6, 4).with_seen_count(2).build().unwrap();
        let split = split_unseen(&ds, [2, 4], 0).unwrap();
        let mut rows = SplitManifestRow::rows(&ds, "conditioning", &split.conditioning);
        rows.extend(SplitManifestRow::rows(&ds, "reference", &split.reference));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        write_split_manifest(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("category,image,partition\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn splits_are_partitions(n in 3usize..30, first in 1usize..29, seed in any::<u64>()) {
            prop_assume!(first < n);
            let ds = SyntheticSpec::new(3, n, 4).with_seen_count(1).build().unwrap();
            let split = split_unseen(&ds, [first, n - first], seed).unwrap();
            for cat in ds.partition(Partition::Unseen) {
                let mut all = split.conditioning[cat].clone();
                all.extend(&split.reference[cat]);
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }
}
