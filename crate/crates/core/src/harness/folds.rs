//! Class-level cross-validation folds.

use super::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    /// Sample indices whose class is a training class.
    pub train_samples: Vec<usize>,
    pub test_samples: Vec<usize>,
}

impl Fold {
    pub fn is_test_class(&self, class: usize) -> bool {
        self.test_classes.contains(&class)
    }
}

/// Partitions the sorted class list into `n_folds` contiguous chunks whose
/// sizes differ by at most one; fold `i` tests on chunk `i` and trains on
/// every sample of the remaining classes.
pub fn build_folds(dataset: &Dataset, n_folds: usize) -> Result<Vec<Fold>> {
    let classes = dataset.classes();
    if n_folds < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {n_folds}")));
    }
    if classes.len() < n_folds {
        return Err(Error::Validation(format!(
            "{} classes cannot fill {n_folds} folds",
            classes.len()
        )));
    }
    let (base, extra) = (classes.len() / n_folds, classes.len() % n_folds);
    let mut start = 0;
    let mut folds = Vec::with_capacity(n_folds);
    for index in 0..n_folds {
        let len = base + usize::from(index < extra);
        let test_classes = classes[start..start + len].to_vec();
        start += len;
        let train_classes: Vec<usize> = classes
            .iter()
            .copied()
            .filter(|c| !test_classes.contains(c))
            .collect();
        let (mut train_samples, mut test_samples) = (Vec::new(), Vec::new());
        for (i, s) in dataset.samples.iter().enumerate() {
            if test_classes.contains(&s.class_id) {
                test_samples.push(i);
            } else {
                train_samples.push(i);
            }
        }
        folds.push(Fold {
            index,
            train_classes,
            test_classes,
            train_samples,
            test_samples,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_synthetic_dataset, GenConfig};

    fn data(n_classes: usize) -> Dataset {
        generate_synthetic_dataset(&GenConfig {
            n_classes,
            samples_per_class: 5,
            height: 16,
            width: 16,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn twenty_classes_five_folds() {
        let ds = data(20);
        let folds = build_folds(&ds, 5).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test_classes.clone()).collect();
        assert!(folds.iter().all(|f| f.test_classes.len() == 4));
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for f in &folds {
            for &i in &f.train_samples {
                assert!(!f.is_test_class(ds.samples[i].class_id));
            }
            assert_eq!(f.train_samples.len() + f.test_samples.len(), ds.samples.len());
        }
    }

    #[test]
    fn uneven_split_sizes_differ_by_one() {
        let folds = build_folds(&data(8), 5).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_classes.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1, 1]);
    }

    #[test]
    fn too_few_classes() {
        assert!(matches!(build_folds(&data(4), 5), Err(Error::Validation(_))));
    }
}
