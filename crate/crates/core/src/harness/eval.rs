//! Dice evaluation on a fold's novel classes.
//!
//! Setting I fixes the highest-id sample of each test class as the support
//! and queries every other sample. Setting II lets every sample serve as the
//! support in turn, i.e. all n(n−1) ordered pairs per class.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use super::dataset::Dataset;
use super::episode::Episode;
use super::folds::Fold;
use crate::error::{Error, Result};
use crate::model::CatNet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Setting {
    I,
    II,
}

impl Setting {
    pub fn number(self) -> u8 {
        match self {
            Setting::I => 1,
            Setting::II => 2,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "I" => Ok(Setting::I),
            "2" | "II" => Ok(Setting::II),
            other => Err(Error::Config(format!("unknown setting {other:?}"))),
        }
    }
}

/// `2|P∩G| / (|P|+|G|)`, with two empty masks scoring 1.
pub fn dice_score(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::dim(
            "dice_score",
            format!("prediction {} vs truth {}", pred.shape(), truth.shape()),
        ));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::Validation("Dice inputs must be binary".into()));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a == 1.0, b == 1.0);
        both += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Binary masks produced for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: Tensor<f32>,
    /// Mask after each refinement iteration; may be empty.
    pub iteration_masks: Vec<Tensor<f32>>,
}

pub trait Segmenter: Sync {
    fn segment(&self, episode: &Episode) -> Result<Segmentation>;
}

impl Segmenter for CatNet<f32> {
    fn segment(&self, episode: &Episode) -> Result<Segmentation> {
        let p = self.predict(episode.input())?;
        Ok(Segmentation {
            mask: p.mask,
            iteration_masks: p.iteration_masks,
        })
    }
}

/// Stub that returns the query's ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoTruth;

impl Segmenter for EchoTruth {
    fn segment(&self, episode: &Episode) -> Result<Segmentation> {
        Ok(Segmentation {
            mask: episode.query_truth.clone(),
            iteration_masks: Vec::new(),
        })
    }
}

/// Ordered (support, query) sample-index pairs for a setting.
pub fn enumerate_pairs(dataset: &Dataset, fold: &Fold, setting: Setting) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for &c in &fold.test_classes {
        let idx = dataset.indices_of(c);
        if idx.len() < 2 {
            continue;
        }
        match setting {
            Setting::I => {
                let support = *idx.iter().max_by_key(|&&i| dataset.samples[i].id).expect("non-empty");
                pairs.extend(idx.iter().filter(|&&q| q != support).map(|&q| (support, q)));
            }
            Setting::II => {
                for &s in &idx {
                    pairs.extend(idx.iter().filter(|&&q| q != s).map(|&q| (s, q)));
                }
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub class_id: usize,
    pub support_id: usize,
    pub query_id: usize,
    pub dice: f64,
    /// Dice after each refinement iteration.
    pub iteration_dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDice {
    pub class_id: usize,
    pub dice_mean: f64,
    pub n_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub fold: usize,
    pub setting: Setting,
    pub classes: Vec<ClassDice>,
    /// Mean of the per-class means.
    pub overall: f64,
    pub records: Vec<EpisodeRecord>,
}

impl DiceReport {
    pub fn from_records(fold: usize, setting: Setting, mut records: Vec<EpisodeRecord>) -> Self {
        records.sort_by_key(|r| (r.class_id, r.support_id, r.query_id));
        let mut by_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &records {
            let e = by_class.entry(r.class_id).or_insert((0.0, 0));
            e.0 += r.dice;
            e.1 += 1;
        }
        let classes: Vec<ClassDice> = by_class
            .into_iter()
            .map(|(class_id, (sum, n))| ClassDice {
                class_id,
                dice_mean: sum / n as f64,
                n_episodes: n,
            })
            .collect();
        let overall = if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(|c| c.dice_mean).sum::<f64>() / classes.len() as f64
        };
        DiceReport {
            fold,
            setting,
            classes,
            overall,
            records,
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.records.len()
    }

    /// Mean of per-class means of the Dice after each iteration.
    pub fn iteration_means(&self) -> Vec<f64> {
        let depth = self.records.iter().map(|r| r.iteration_dice.len()).min().unwrap_or(0);
        (0..depth)
            .map(|i| {
                let per_episode = self
                    .records
                    .iter()
                    .map(|r| EpisodeRecord {
                        dice: r.iteration_dice[i],
                        iteration_dice: Vec::new(),
                        ..r.clone()
                    })
                    .collect();
                DiceReport::from_records(self.fold, self.setting, per_episode).overall
            })
            .collect()
    }

    /// `key=value` records, one per class plus `class=all`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            let _ = writeln!(
                out,
                "fold={} setting={} class={} dice_mean={:.6} n_episodes={}",
                self.fold, self.setting, c.class_id, c.dice_mean, c.n_episodes
            );
        }
        let _ = writeln!(
            out,
            "fold={} setting={} class=all dice_mean={:.6} n_episodes={}",
            self.fold,
            self.setting,
            self.overall,
            self.n_episodes()
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("fold {} / setting {}\n", self.fold, self.setting);
        let _ = writeln!(out, "{:>8}  {:>9}  {:>8}", "class", "dice", "episodes");
        for c in &self.classes {
            let _ = writeln!(out, "{:>8}  {:>9.4}  {:>8}", c.class_id, c.dice_mean, c.n_episodes);
        }
        let _ = writeln!(out, "{:>8}  {:>9.4}  {:>8}", "mean", self.overall, self.n_episodes());
        out
    }
}

/// Scores every episode of `setting` on `threads` workers (all cores when
/// `None`). The report does not depend on the worker count.
pub fn evaluate<S: Segmenter + ?Sized>(
    dataset: &Dataset,
    fold: &Fold,
    setting: Setting,
    segmenter: &S,
    threads: Option<usize>,
) -> Result<DiceReport> {
    let pairs = enumerate_pairs(dataset, fold, setting);
    let score = |&(s, q): &(usize, usize)| -> Result<EpisodeRecord> {
        let episode = Episode::from_pair(dataset, s, q)?;
        let seg = segmenter.segment(&episode)?;
        let dice = dice_score(&seg.mask, &episode.query_truth)?;
        let iteration_dice = seg
            .iteration_masks
            .iter()
            .map(|m| dice_score(m, &episode.query_truth))
            .collect::<Result<_>>()?;
        Ok(EpisodeRecord {
            class_id: episode.class_id,
            support_id: episode.support_id,
            query_id: episode.query_id,
            dice,
            iteration_dice,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start evaluation workers: {e}")))?;
    let records = pool.install(|| pairs.par_iter().map(score).collect::<Result<Vec<_>>>())?;
    Ok(DiceReport::from_records(fold.index, setting, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_synthetic_dataset, GenConfig};
    use crate::harness::folds::build_folds;

    fn mask(bits: &[u8]) -> Tensor<f32> {
        Tensor::new(&[2, bits.len() / 2], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &mask(&[0, 0, 0, 0, 1, 1])).unwrap(), 0.0);
        let p = mask(&[1, 1, 0, 1, 1, 0, 0, 0]);
        let g = mask(&[0, 1, 1, 0, 1, 1, 0, 0]);
        assert_eq!(dice_score(&p, &g).unwrap(), 0.5);
        assert_eq!(dice_score(&p, &g).unwrap(), dice_score(&g, &p).unwrap());
        let z = mask(&[0, 0]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        assert!(dice_score(&a, &z).is_err());
    }

    fn data() -> (Dataset, Fold) {
        let ds = generate_synthetic_dataset(&GenConfig {
            n_classes: 5,
            samples_per_class: 5,
            height: 16,
            width: 16,
            seed: 1,
        })
        .unwrap();
        let fold = build_folds(&ds, 5).unwrap().remove(2);
        (ds, fold)
    }

    #[test]
    fn pair_counts() {
        let (ds, fold) = data();
        assert_eq!(enumerate_pairs(&ds, &fold, Setting::I).len(), 4);
        let two = enumerate_pairs(&ds, &fold, Setting::II);
        assert_eq!(two.len(), 20);
        assert!(enumerate_pairs(&ds, &fold, Setting::I).iter().all(|&(s, _)| s == 14));
    }

    #[test]
    fn echo_truth_scores_one_regardless_of_threads() {
        let (ds, fold) = data();
        let one = evaluate(&ds, &fold, Setting::II, &EchoTruth, Some(1)).unwrap();
        let many = evaluate(&ds, &fold, Setting::II, &EchoTruth, Some(3)).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.overall, 1.0);
        assert_eq!(one.to_key_values(), many.to_key_values());
        assert!(one.to_key_values().contains("fold=2 setting=2 class=2 dice_mean=1.000000 n_episodes=20"));
    }

    #[test]
    fn overall_is_mean_of_class_means() {
        let rec = |c, d| EpisodeRecord {
            class_id: c,
            support_id: 0,
            query_id: 1,
            dice: d,
            iteration_dice: vec![d / 2.0, d],
        };
        let r = DiceReport::from_records(0, Setting::I, vec![rec(0, 1.0), rec(0, 0.0), rec(1, 1.0)]);
        assert_eq!(r.overall, 0.75);
        assert_eq!(r.iteration_means(), vec![0.375, 0.75]);
    }
}
