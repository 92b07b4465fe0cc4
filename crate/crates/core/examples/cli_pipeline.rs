//! gen → train → eval through the command layer, then a resume that picks
//! up a shorter run and lands on the same parameters.
//!
//! cargo run --release --example cli_pipeline

use catnet::cli::{cmd_eval, cmd_gen, cmd_train, Checkpoint, EvalModel, RunConfig, SettingChoice};

fn main() -> catnet::Result<()> {
    let root = std::env::temp_dir().join(format!("catnet-pipeline-{}", std::process::id()));
    let cfg = RunConfig {
        data: root.join("data"),
        out: root.join("run"),
        iters: 200,
        log_interval: 50,
        setting: SettingChoice::Both,
        ..RunConfig::default()
    };
    print!("{}", cfg.to_text());
    cmd_gen(&RunConfig { out: cfg.data.clone(), ..cfg.clone() }, &mut std::io::stdout())?;
    let full = cmd_train(&cfg, None, &mut std::io::stdout())?;
    cmd_eval(&cfg, &EvalModel::Checkpoint(full.checkpoint.clone()), None, &mut std::io::stdout())?;

    let half = RunConfig { iters: 100, out: root.join("half"), ..cfg.clone() };
    let first = cmd_train(&half, None, &mut std::io::sink())?;
    let rest = RunConfig { out: root.join("resumed"), ..cfg.clone() };
    let resumed = cmd_train(&rest, Some(&first.checkpoint), &mut std::io::sink())?;
    println!("resumed parameters identical: {}", resumed.state.model.params == full.state.model.params);

    let bytes = std::fs::read(&full.checkpoint).unwrap_or_default();
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes();
    println!("checkpoint save → load → save identical: {}", again == bytes);
    println!("artifacts in {}", root.display());
    Ok(())
}
