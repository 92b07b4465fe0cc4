//! Synthetic data, folds, episodes, training and evaluation.

pub mod dataset;
pub mod episode;
pub mod eval;
pub mod folds;
pub mod train;

pub use dataset::{generate_synthetic_dataset, Dataset, GenConfig, Sample, ShapeFamily};
pub use episode::{Episode, EpisodeSampler, Split};
pub use eval::{dice_score, evaluate, DiceReport, EchoTruth, EpisodeRecord, Segmenter, Setting};
pub use folds::{build_folds, Fold};
pub use train::{loss_curve, train, train_step, LossPoint, TrainConfig, TrainState};
