//! The `catnet` binary end to end on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use catnet::cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_train, Checkpoint, EvalModel, RunConfig, SettingChoice};
use catnet::harness::{generate_synthetic_dataset, Dataset, GenConfig};
use catnet::refine::CrossMode;

const SMALL: [&str; 12] = [
    "--n-classes",
    "5",
    "--samples-per-class",
    "5",
    "--image-size",
    "16",
    "--embed-dim",
    "8",
    "--heads",
    "2",
    "--depth",
    "2",
];

fn catnet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catnet"))
        .current_dir(cwd)
        .args(args)
        .args(SMALL)
        .env_remove("CATNET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_reproducible_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    ok(catnet(dir.path(), &["gen", "--seed", "7", "--out", "a"]));
    ok(catnet(dir.path(), &["gen", "--seed", "7", "--out", "b"]));
    let (a, b) = (snapshot(&dir.path().join("a")), snapshot(&dir.path().join("b")));
    assert_eq!(a, b);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    let images = fs::read_dir(dir.path().join("a/images")).unwrap().count();
    let masks = fs::read_dir(dir.path().join("a/masks")).unwrap().count();
    assert_eq!(manifest.lines().count(), 25);
    assert_eq!((images, masks), (25, 25));
}

#[test]
fn gen_into_unusable_directory_fails_without_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), b"x").unwrap();
    let out = catnet(dir.path(), &["gen", "--out", "blocker/data"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read(dir.path().join("blocker")).unwrap(), b"x");

    fs::create_dir(dir.path().join("busy")).unwrap();
    fs::write(dir.path().join("busy/keep.txt"), b"mine").unwrap();
    let out = catnet(dir.path(), &["gen", "--out", "busy"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(snapshot(&dir.path().join("busy")), vec![(PathBuf::from("keep.txt"), b"mine".to_vec())]);
}

#[test]
fn invalid_configs_exit_one_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen", "--out", "x", "--tau", "0.3"],
        vec!["gen", "--out", "x", "--mode", "sideways"],
        vec!["gen", "--out", "x", "--image-size", "18"],
        vec!["gen", "--out", "x", "--depth", "6"],
        vec!["frobnicate"],
    ] {
        let out = catnet(dir.path(), &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn train_missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = catnet(dir.path(), &["train", "--data", "no-such-data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-data"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_outputs_resume_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(catnet(d, &["gen", "--out", "data"]));
    let common = ["--data", "data", "--log-interval", "2", "--lr", "0.01"];
    let mut full = vec!["train", "--out", "full", "--iters", "6"];
    full.extend(common);
    ok(catnet(d, &full));
    let csv = fs::read_to_string(d.join("full/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 / 2);
    assert!(fs::read(d.join("full/loss.pgm")).unwrap().starts_with(b"P5"));

    let mut part = vec!["train", "--out", "part", "--iters", "3"];
    part.extend(common);
    ok(catnet(d, &part));
    ok(catnet(d, &["train", "--resume", "part/checkpoint.ckpt", "--out", "resumed", "--iters", "6"]));
    let a = Checkpoint::load(&d.join("full/checkpoint.ckpt")).unwrap();
    let b = Checkpoint::load(&d.join("resumed/checkpoint.ckpt")).unwrap();
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.state.losses, b.state.losses);
    assert_eq!(fs::read(d.join("full/loss.csv")).unwrap(), fs::read(d.join("resumed/loss.csv")).unwrap());

    let echoed = fs::read_to_string(d.join("full/config.txt")).unwrap();
    ok(catnet(d, &["train", "--config", "full/config.txt", "--out", "again"]));
    let again = fs::read_to_string(d.join("again/config.txt")).unwrap();
    assert_eq!(echoed.replace("out = full", "out = again"), again);
    assert_eq!(fs::read(d.join("full/loss.csv")).unwrap(), fs::read(d.join("again/loss.csv")).unwrap());
}

#[test]
fn eval_echo_truth_counts_and_rerun_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let full = generate_synthetic_dataset(&GenConfig {
        seed: 1,
        n_classes: 5,
        samples_per_class: 5,
        height: 16,
        width: 16,
    })
    .unwrap();
    let mut kept = Vec::new();
    for c in full.classes() {
        kept.extend(full.indices_of(c).into_iter().take(3).map(|i| full.samples[i].clone()));
    }
    Dataset { samples: kept, ..full }.save(&d.join("three")).unwrap();

    let run = |out: &str| {
        let o = ok(catnet(d, &["eval", "--echo-truth", "--data", "three", "--out", out, "--setting", "both"]));
        String::from_utf8(o.stdout).unwrap()
    };
    let stdout = run("ev1");
    run("ev2");
    for line in stdout.lines() {
        assert!(line.contains("dice_mean=1.000000"), "{line}");
    }
    let kv = fs::read_to_string(d.join("ev1/report_setting2.kv")).unwrap();
    assert!(kv.contains("fold=0 setting=2 class=0 dice_mean=1.000000 n_episodes=6"), "{kv}");
    let kv1 = fs::read_to_string(d.join("ev1/report_setting1.kv")).unwrap();
    assert!(kv1.contains("class=0 dice_mean=1.000000 n_episodes=2"), "{kv1}");
    assert_eq!(snapshot(&d.join("ev1")), snapshot(&d.join("ev2")));
}

#[test]
fn eval_report_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(catnet(d, &["gen", "--out", "data"]));
    ok(catnet(d, &["train", "--data", "data", "--out", "run", "--iters", "2", "--log-interval", "1"]));
    for threads in ["1", "3"] {
        let o = Command::new(env!("CARGO_BIN_EXE_catnet"))
            .current_dir(d)
            .args(["eval", "--checkpoint", "run/checkpoint.ckpt", "--data", "data", "--out"])
            .arg(format!("ev{threads}"))
            .args(SMALL)
            .env("CATNET_THREADS", threads)
            .output()
            .unwrap();
        ok(o);
    }
    assert_eq!(snapshot(&d.join("ev1")), snapshot(&d.join("ev3")));
    let bad = Command::new(env!("CARGO_BIN_EXE_catnet"))
        .current_dir(d)
        .args(["eval", "--echo-truth", "--data", "data", "--out", "evx"])
        .args(SMALL)
        .env("CATNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = catnet(dir.path(), &["gradcheck", "--filter", "softmax", "--out", "gc"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS op     softmax"));
    let out = catnet(dir.path(), &["gradcheck", "--filter", "softmax", "--fault", "softmax", "--out", "gc2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL op     softmax"));
    assert!(fs::read_to_string(dir.path().join("gc2/gradcheck.txt")).unwrap().contains("FAIL"));
}

#[test]
fn ablation_cell_equals_standalone_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        data: dir.path().join("data"),
        out: dir.path().join("ablate"),
        n_classes: 5,
        samples_per_class: 5,
        image_size: 16,
        embed_dim: 8,
        heads: 2,
        iters: 6,
        log_interval: 3,
        lr: 0.01,
        setting: SettingChoice::Two,
        ablate_modes: vec![CrossMode::SupportToQuery, CrossMode::Bidirectional],
        ablate_depths: vec![1, 2],
        ..RunConfig::default()
    };
    let sink = &mut std::io::sink();
    cmd_gen(&RunConfig { out: base.data.clone(), ..base.clone() }, sink).unwrap();
    let table = cmd_ablate(&base, Some(1), sink).unwrap();
    assert_eq!(table.cells.len(), 4);
    let text = fs::read_to_string(base.out.join("ablation.txt")).unwrap();
    assert!(text.contains("s2q") && text.contains("bidir") && text.contains("d=1(no-iter)"));

    let alone = RunConfig {
        mode: CrossMode::Bidirectional,
        depth: 2,
        out: dir.path().join("alone"),
        ..base.clone()
    };
    let trained = cmd_train(&alone, None, sink).unwrap();
    let reports = cmd_eval(&alone, &EvalModel::Checkpoint(trained.checkpoint), Some(1), sink).unwrap();
    let cell = table.cell(CrossMode::Bidirectional, 2).unwrap();
    let cell_reports = cell.outcome.as_ref().unwrap();
    assert_eq!(cell_reports, &reports);
    assert_eq!(
        fs::read(base.out.join("cells/bidir_d2/report_setting2.kv")).unwrap(),
        fs::read(alone.out.join("report_setting2.kv")).unwrap()
    );
}
