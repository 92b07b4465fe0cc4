//! Class-level folds and the two evaluation settings, scored with a stub
//! that returns the ground truth and with an untrained model.
//!
//! cargo run --release --example evaluation_protocol

use catnet::harness::eval::enumerate_pairs;
use catnet::harness::{build_folds, evaluate, generate_synthetic_dataset, EchoTruth, GenConfig, Setting};
use catnet::model::{CatNet, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> catnet::Result<()> {
    let data = generate_synthetic_dataset(&GenConfig { samples_per_class: 5, ..GenConfig::default() })?;
    let folds = build_folds(&data, 5)?;
    for f in &folds {
        println!(
            "fold {}: test {:?}, {} train samples, setting I {} / setting II {} episodes",
            f.index,
            f.test_classes,
            f.train_samples.len(),
            enumerate_pairs(&data, f, Setting::I).len(),
            enumerate_pairs(&data, f, Setting::II).len()
        );
    }

    let fold = &folds[0];
    let echo = evaluate(&data, fold, Setting::II, &EchoTruth, None)?;
    print!("ground-truth stub\n{}", echo.to_key_values());

    let model = CatNet::<f32>::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let untrained = evaluate(&data, fold, Setting::II, &model, None)?;
    print!("untrained model\n{}", untrained.to_table());
    Ok(())
}
