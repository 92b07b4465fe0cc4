//! 1-way 1-shot episodes drawn from a fold's train or test pool.

use rand::Rng;

use super::dataset::Dataset;
use super::folds::Fold;
use crate::error::{Error, Result};
use crate::model::EpisodeInput;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub support_id: usize,
    pub query_id: usize,
    /// `[1×H×W]`
    pub support_image: Tensor<f32>,
    pub support_mask: Tensor<f32>,
    pub query_image: Tensor<f32>,
    pub query_truth: Tensor<f32>,
}

impl Episode {
    /// Builds the episode for a support/query pair of sample indices.
    pub fn from_pair(dataset: &Dataset, support: usize, query: usize) -> Result<Self> {
        let (s, q) = (&dataset.samples[support], &dataset.samples[query]);
        if support == query {
            return Err(Error::Validation(format!("sample {} used as both support and query", s.id)));
        }
        if s.class_id != q.class_id {
            return Err(Error::Validation(format!(
                "support class {} differs from query class {}",
                s.class_id, q.class_id
            )));
        }
        Ok(Episode {
            class_id: s.class_id,
            support_id: s.id,
            query_id: q.id,
            support_image: s.image.clone(),
            support_mask: s.mask.clone(),
            query_image: q.image.clone(),
            query_truth: q.mask.clone(),
        })
    }

    pub fn input(&self) -> EpisodeInput<'_, f32> {
        EpisodeInput {
            support_image: &self.support_image,
            support_mask: &self.support_mask,
            query_image: &self.query_image,
        }
    }
}

/// Uniform class, then uniform support, then uniform query among the rest.
#[derive(Clone, Debug)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    pools: Vec<(usize, Vec<usize>)>,
    skipped: Vec<usize>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, fold: &Fold, split: Split) -> Result<Self> {
        let classes = match split {
            Split::Train => &fold.train_classes,
            Split::Test => &fold.test_classes,
        };
        let mut pools = Vec::new();
        let mut skipped = Vec::new();
        for &c in classes {
            let idx = dataset.indices_of(c);
            if idx.len() < 2 {
                skipped.push(c);
            } else {
                pools.push((c, idx));
            }
        }
        if pools.is_empty() {
            return Err(Error::Validation(format!(
                "fold {} has no {split:?} class with at least 2 samples",
                fold.index
            )));
        }
        Ok(EpisodeSampler {
            dataset,
            pools,
            skipped,
        })
    }

    /// Classes left out for having fewer than two samples.
    pub fn skipped_classes(&self) -> &[usize] {
        &self.skipped
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.pools.iter().map(|(c, _)| *c)
    }

    /// Draws (support index, query index).
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let (_, idx) = &self.pools[rng.random_range(0..self.pools.len())];
        let s = rng.random_range(0..idx.len());
        let mut q = rng.random_range(0..idx.len() - 1);
        if q >= s {
            q += 1;
        }
        (idx[s], idx[q])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Episode> {
        let (s, q) = self.sample_pair(rng);
        Episode::from_pair(self.dataset, s, q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_synthetic_dataset, GenConfig};
    use crate::harness::folds::build_folds;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairs_are_distinct_same_class_and_in_split() {
        let ds = generate_synthetic_dataset(&GenConfig {
            n_classes: 10,
            samples_per_class: 5,
            height: 16,
            width: 16,
            seed: 2,
        })
        .unwrap();
        let fold = &build_folds(&ds, 5).unwrap()[1];
        let sampler = EpisodeSampler::new(&ds, fold, Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let (s, q) = sampler.sample_pair(&mut rng);
            assert_ne!(s, q);
            let c = ds.samples[s].class_id;
            assert_eq!(c, ds.samples[q].class_id);
            assert!(!fold.is_test_class(c));
        }
    }

    #[test]
    fn episode_rejects_self_pair() {
        let ds = generate_synthetic_dataset(&GenConfig {
            n_classes: 4,
            samples_per_class: 5,
            height: 16,
            width: 16,
            seed: 2,
        })
        .unwrap();
        assert!(Episode::from_pair(&ds, 3, 3).is_err());
        assert!(Episode::from_pair(&ds, 0, 7).is_err());
        let e = Episode::from_pair(&ds, 0, 1).unwrap();
        assert_eq!((e.support_id, e.query_id, e.class_id), (0, 1, 0));
    }
}
