//! Trains on one fold of a fresh synthetic dataset and scores the novel
//! classes under both evaluation settings.
//!
//! cargo run --release --example train_fold -- [iterations] [lr] [seed]

use std::time::Instant;

use catnet::harness::{build_folds, evaluate, generate_synthetic_dataset, train, GenConfig, Setting, TrainConfig, TrainState};
use catnet::model::{CatNet, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> catnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let deep = args.get(4).is_some_and(|s| s == "deep");

    let data = generate_synthetic_dataset(&GenConfig { seed, ..GenConfig::default() })?;
    let fold = build_folds(&data, 5)?.remove(0);
    let mut config = ModelConfig::default();
    config.refine.deep_supervision = deep;
    let model = CatNet::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    println!("{} parameters, test classes {:?}", model.params.num_scalars(), fold.test_classes);

    let mut state = TrainState::new(model, seed);
    let cfg = TrainConfig { iterations, lr, log_interval: 100 };
    let start = Instant::now();
    train(&mut state, &data, &fold, &cfg, |p| {
        println!("iter {:>6}  loss {:.4}  ({:.1}s)", p.iteration, p.loss, start.elapsed().as_secs_f64())
    })
    .map_err(|d| d.error)?;

    for setting in [Setting::I, Setting::II] {
        let report = evaluate(&data, &fold, setting, &state.model, None)?;
        print!("{}", report.to_table());
        println!("per-iteration dice {:?}", report.iteration_means());
    }
    Ok(())
}
