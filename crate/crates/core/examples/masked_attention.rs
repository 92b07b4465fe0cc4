//! Cross masked attention on random tokens: masked source positions get
//! exactly zero weight, rows stay stochastic, and dropping the masked
//! tokens altogether gives the same weights.
//!
//! cargo run --example masked_attention

use catnet::attention::attention_weights;
use catnet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> catnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (tq, tk, d) = (4, 6, 8);
    let q = Tensor::from_fn(&[tq, d], |_| rng.random_range(-1.0..1.0))?;
    let k = Tensor::from_fn(&[tk, d], |_| rng.random_range(-1.0..1.0))?;
    let mask = Tensor::new(&[tk], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0])?;

    let mut tape = Tape::<f64>::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let w = attention_weights(&mut tape, qv, kv, d, Some(&mask))?;
    let w = tape.value(w).clone();
    println!("weights with keys 1 and 4 masked:");
    for r in 0..tq {
        let row: Vec<String> = (0..tk).map(|c| format!("{:.4}", w.at(&[r, c]))).collect();
        let sum: f64 = (0..tk).map(|c| w.at(&[r, c])).sum();
        println!("  [{}]  sum {sum:.12}", row.join(" "));
    }

    let kept: Vec<usize> = (0..tk).filter(|&i| mask.data()[i] == 1.0).collect();
    let k_small = Tensor::from_fn(&[kept.len(), d], |i| k.at(&[kept[i / d], i % d]))?;
    let (qv, kv) = (tape.constant(q), tape.constant(k_small));
    let small = attention_weights(&mut tape, qv, kv, d, None)?;
    let small = tape.value(small);
    let mut worst = 0.0f64;
    for r in 0..tq {
        for (j, &c) in kept.iter().enumerate() {
            worst = worst.max((w.at(&[r, c]) - small.at(&[r, j])).abs());
        }
    }
    println!("max difference against attention over the kept keys only: {worst:.2e}");
    Ok(())
}
