//! Mode × depth ablation through the same code path as `catnet ablate`,
//! at a size that finishes in a few minutes.
//!
//! cargo run --release --example ablation -- [iterations] [out_dir]

use std::path::PathBuf;

use catnet::cli::{cmd_ablate, cmd_gen, RunConfig};

fn main() -> catnet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let root = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("catnet-ablation"));
    let data = root.join("data");
    let base = RunConfig {
        data: data.clone(),
        out: root.join("ablation"),
        iters,
        setting: catnet::cli::SettingChoice::Two,
        ablate_depths: vec![1, 2, 4],
        ..RunConfig::default()
    };
    if !data.join("manifest.txt").exists() {
        cmd_gen(&RunConfig { out: data, ..base.clone() }, &mut std::io::stdout())?;
    }
    let table = cmd_ablate(&base, None, &mut std::io::sink())?;
    print!("{}", table.to_table());
    println!("outputs under {}", base.out.display());
    Ok(())
}
