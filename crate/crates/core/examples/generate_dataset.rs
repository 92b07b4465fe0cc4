//! Generates the synthetic shape-family dataset, prints per-class
//! foreground statistics and draws one sample of each class in ASCII.
//!
//! cargo run --example generate_dataset -- [seed] [out_dir]

use std::path::PathBuf;

use catnet::harness::dataset::write_dataset_atomically;
use catnet::harness::{generate_synthetic_dataset, Dataset, GenConfig, ShapeFamily};

fn main() -> catnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = GenConfig { seed, ..GenConfig::default() };
    let data = generate_synthetic_dataset(&cfg)?;
    println!("{} samples, {} classes, {}×{}", data.samples.len(), data.classes().len(), data.height, data.width);

    for class in data.classes() {
        let idx = data.indices_of(class);
        let fracs: Vec<f64> = idx
            .iter()
            .map(|&i| data.samples[i].mask.sum() as f64 / (data.height * data.width) as f64)
            .collect();
        let lo = fracs.iter().copied().fold(1.0, f64::min);
        let hi = fracs.iter().copied().fold(0.0, f64::max);
        println!(
            "class {class:>2} {:<12} foreground {:.1}%..{:.1}%",
            ShapeFamily::ALL[class].name(),
            100.0 * lo,
            100.0 * hi
        );
    }
    draw(&data, data.indices_of(0)[0]);

    if let Some(dir) = args.get(2) {
        write_dataset_atomically(&data, &PathBuf::from(dir))?;
        println!("written to {dir} and reloaded: {}", Dataset::load(&PathBuf::from(dir))? == data);
    }
    Ok(())
}

fn draw(data: &Dataset, index: usize) {
    let s = &data.samples[index];
    println!("sample {} (class {})", s.id, s.class_id);
    for y in 0..data.height {
        let row: String = (0..data.width)
            .map(|x| if s.mask.at(&[y, x]) == 1.0 { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
}
