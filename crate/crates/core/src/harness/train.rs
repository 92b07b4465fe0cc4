//! Episodic training with plain SGD at batch size one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use super::episode::{Episode, EpisodeSampler, Split};
use super::folds::Fold;
use crate::error::{Error, Result};
use crate::model::CatNet;
use crate::tensor::{sgd_step, Tape};

/// Stream of the episode-sampling generator; stream 0 seeds initialisation.
pub const EPISODE_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr: 0.001,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log interval must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: CatNet<f32>,
    pub rng: ChaCha8Rng,
    /// Episodes completed so far.
    pub iteration: usize,
    /// Loss of every completed episode.
    pub losses: Vec<f32>,
}

impl TrainState {
    pub fn new(model: CatNet<f32>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EPISODE_STREAM);
        TrainState {
            model,
            rng,
            iteration: 0,
            losses: Vec::new(),
        }
    }
}

/// Mean loss over one logging window, labelled by the window's last episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
}

/// One row per complete window of `interval` episodes.
pub fn loss_curve(losses: &[f32], interval: usize) -> Vec<LossPoint> {
    losses
        .chunks_exact(interval)
        .enumerate()
        .map(|(i, w)| LossPoint {
            iteration: (i + 1) * interval,
            loss: w.iter().map(|&v| v as f64).sum::<f64>() / interval as f64,
        })
        .collect()
}

/// Forward, loss, backward and one SGD update. Returns the episode loss.
pub fn train_step(model: &mut CatNet<f32>, episode: &Episode, lr: f64) -> Result<f32> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, episode.input())?;
    let loss = model.loss(&mut tape, &pass, &episode.query_truth)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    model.params.accumulate_grads(&pass.bindings, &grads)?;
    sgd_step(model.params.tensors_mut(), lr as f32)?;
    if !model.params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(value)
}

/// A stopped training run, with the episode that caused it when the failure
/// happened inside a step.
#[derive(Debug)]
pub struct Divergence {
    pub error: Error,
    pub iteration: usize,
    pub episode: Option<Episode>,
}

/// Runs episodes until `state.iteration == cfg.iterations`, calling `on_log`
/// after every completed window.
pub fn train(
    state: &mut TrainState,
    dataset: &Dataset,
    fold: &Fold,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(LossPoint),
) -> Result<(), Box<Divergence>> {
    let wrap = |error: Error, iteration: usize, episode: Option<Episode>| {
        Box::new(Divergence {
            error,
            iteration,
            episode,
        })
    };
    cfg.validate().map_err(|e| wrap(e, state.iteration, None))?;
    let sampler = EpisodeSampler::new(dataset, fold, Split::Train).map_err(|e| wrap(e, state.iteration, None))?;
    while state.iteration < cfg.iterations {
        let episode = sampler.sample(&mut state.rng).map_err(|e| wrap(e, state.iteration, None))?;
        let loss = match train_step(&mut state.model, &episode, cfg.lr) {
            Ok(l) => l,
            Err(e) => return Err(wrap(e, state.iteration, Some(episode))),
        };
        state.losses.push(loss);
        state.iteration += 1;
        if state.iteration % cfg.log_interval == 0 {
            let window = &state.losses[state.iteration - cfg.log_interval..];
            on_log(LossPoint {
                iteration: state.iteration,
                loss: window.iter().map(|&v| v as f64).sum::<f64>() / cfg.log_interval as f64,
            });
        }
    }
    Ok(())
}
