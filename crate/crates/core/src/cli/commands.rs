//! The five commands. Each reads its inputs, writes only under `cfg.out`
//! and reports progress to `log`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::plot;
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckOptions, CheckOutcome};
use crate::harness::dataset::write_dataset_atomically;
use crate::harness::{
    build_folds, evaluate, generate_synthetic_dataset, loss_curve, train, Dataset, DiceReport, EchoTruth, Episode,
    Fold, Segmenter, TrainState,
};
use crate::model::CatNet;
use crate::refine::CrossMode;
use crate::tensor::write_tensor;
use crate::tensor::OpKind;

pub const THREADS_ENV: &str = "CATNET_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_CSV: &str = "loss.csv";
pub const LOSS_PLOT: &str = "loss.pgm";
pub const CONFIG_FILE: &str = "config.txt";
pub const DIVERGENCE_DIR: &str = "divergence";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const ABLATION_KV: &str = "ablation.kv";

const PLOT_SIZE: (usize, usize) = (320, 200);

/// Worker cap from `CATNET_THREADS`; unset means all cores.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn report_file(setting: crate::harness::Setting, ext: &str) -> String {
    format!("report_setting{}.{ext}", setting.number())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("dataset directory {} not found", dir.display())));
    }
    Dataset::load(dir)
}

fn select_fold(dataset: &Dataset, cfg: &RunConfig) -> Result<Fold> {
    let mut folds = build_folds(dataset, cfg.folds)?;
    if cfg.fold >= folds.len() {
        return Err(Error::Config(format!("fold {} out of range for {} folds", cfg.fold, folds.len())));
    }
    Ok(folds.swap_remove(cfg.fold))
}

/// Generates the synthetic dataset into `cfg.out`.
pub fn cmd_gen(cfg: &RunConfig, log: &mut dyn Write) -> Result<Dataset> {
    cfg.gen_config().validate()?;
    let dataset = generate_synthetic_dataset(&cfg.gen_config())?;
    write_dataset_atomically(&dataset, &cfg.out)?;
    let _ = writeln!(
        log,
        "wrote {} samples of {} classes to {}",
        dataset.samples.len(),
        dataset.classes().len(),
        cfg.out.display()
    );
    Ok(dataset)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub state: TrainState,
    /// Mean loss of the first and last logging windows, when complete.
    pub first_window: Option<f64>,
    pub last_window: Option<f64>,
}

fn check_resumable(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    if ck.config.model_config() != cfg.model_config() {
        return Err(Error::Config("resumed run must keep the checkpoint's model settings".into()));
    }
    if (ck.config.fold, ck.config.folds) != (cfg.fold, cfg.folds) {
        return Err(Error::Config("resumed run must keep the checkpoint's fold".into()));
    }
    if cfg.iters < ck.state.iteration {
        return Err(Error::Config(format!(
            "checkpoint has {} iterations, more than the requested {}",
            ck.state.iteration, cfg.iters
        )));
    }
    Ok(())
}

fn dump_divergence(dir: &Path, episode: &Episode, iteration: usize, error: &Error) -> Result<()> {
    create_dir(dir)?;
    write_tensor(&dir.join("support_image.ctnt"), &episode.support_image)?;
    write_tensor(&dir.join("support_mask.ctnt"), &episode.support_mask)?;
    write_tensor(&dir.join("query_image.ctnt"), &episode.query_image)?;
    write_tensor(&dir.join("query_truth.ctnt"), &episode.query_truth)?;
    write_file(
        &dir.join("episode.txt"),
        format!(
            "iteration={iteration}\nclass={}\nsupport={}\nquery={}\nerror={error}\n",
            episode.class_id, episode.support_id, episode.query_id
        ),
    )
}

/// Trains on `cfg.fold` of the dataset at `cfg.data`, optionally continuing
/// from a checkpoint. Writes the checkpoint, the loss CSV and plot, and the
/// resolved config into `cfg.out`. A non-finite loss dumps the offending
/// episode under `divergence/` and fails with a numeric error.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.data)?;
    let fold = select_fold(&dataset, cfg)?;
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(cfg, &ck)?;
            let _ = writeln!(log, "resuming from {} at iteration {}", path.display(), ck.state.iteration);
            ck.state
        }
        None => {
            let model = CatNet::init(cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            TrainState::new(model, cfg.seed)
        }
    };
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    let _ = writeln!(
        log,
        "fold {} test classes {:?}, {} parameters",
        fold.index,
        fold.test_classes,
        state.model.params.num_scalars()
    );
    let result = train(&mut state, &dataset, &fold, &cfg.train_config(), |p| {
        let _ = writeln!(log, "iter {:>6}  loss {:.6}", p.iteration, p.loss);
    });
    if let Err(div) = result {
        if let Some(ep) = &div.episode {
            let dir = cfg.out.join(DIVERGENCE_DIR);
            dump_divergence(&dir, ep, div.iteration, &div.error)?;
            let _ = writeln!(log, "diverged at iteration {}; episode written to {}", div.iteration, dir.display());
        }
        return Err(div.error);
    }

    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    Checkpoint {
        config: cfg.clone(),
        state: state.clone(),
    }
    .save(&checkpoint)?;
    let curve = loss_curve(&state.losses, cfg.log_interval);
    let mut csv = String::from("iteration,loss\n");
    for p in &curve {
        let _ = writeln!(csv, "{},{:.6}", p.iteration, p.loss);
    }
    write_file(&cfg.out.join(LOSS_CSV), csv)?;
    let values: Vec<f64> = curve.iter().map(|p| p.loss).collect();
    plot::line_chart(&values, PLOT_SIZE.0, PLOT_SIZE.1).save(&cfg.out.join(LOSS_PLOT))?;
    Ok(TrainSummary {
        checkpoint,
        first_window: values.first().copied(),
        last_window: values.last().copied(),
        state,
    })
}

/// What to evaluate: a trained checkpoint or the ground-truth stub.
#[derive(Clone, Debug)]
pub enum EvalModel {
    Checkpoint(PathBuf),
    EchoTruth,
}

fn write_report(out: &Path, report: &DiceReport) -> Result<()> {
    write_file(&out.join(report_file(report.setting, "kv")), report.to_key_values())?;
    let mut table = report.to_table();
    let iters = report.iteration_means();
    if !iters.is_empty() {
        let cells: Vec<String> = iters.iter().map(|d| format!("{d:.4}")).collect();
        let _ = writeln!(table, "per-iteration dice: {}", cells.join(" "));
    }
    write_file(&out.join(report_file(report.setting, "txt")), table)?;
    let mut csv = String::from("class,support,query,dice,iteration_dice\n");
    for r in &report.records {
        let its: Vec<String> = r.iteration_dice.iter().map(|d| format!("{d:.6}")).collect();
        let _ = writeln!(csv, "{},{},{},{:.6},{}", r.class_id, r.support_id, r.query_id, r.dice, its.join(";"));
    }
    write_file(&out.join(report_file(report.setting, "csv")), csv)?;
    let mut groups: Vec<Vec<f64>> = report.classes.iter().map(|c| vec![c.dice_mean]).collect();
    if !iters.is_empty() {
        groups.push(iters);
    }
    plot::bar_chart(&groups, PLOT_SIZE.0, PLOT_SIZE.1).save(&out.join(report_file(report.setting, "pgm")))
}

/// Scores the novel classes of a fold under each requested setting and
/// writes `report_setting{1,2}.{kv,txt,csv,pgm}` into `cfg.out`. With a
/// checkpoint, the fold split comes from the checkpoint's own config.
pub fn cmd_eval(cfg: &RunConfig, model: &EvalModel, threads: Option<usize>, log: &mut dyn Write) -> Result<Vec<DiceReport>> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.data)?;
    let (segmenter, split): (Box<dyn Segmenter>, RunConfig) = match model {
        EvalModel::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            let split = RunConfig {
                fold: ck.config.fold,
                folds: ck.config.folds,
                ..cfg.clone()
            };
            (Box::new(ck.state.model), split)
        }
        EvalModel::EchoTruth => (Box::new(EchoTruth), cfg.clone()),
    };
    let fold = select_fold(&dataset, &split)?;
    create_dir(&cfg.out)?;
    let mut reports = Vec::new();
    for setting in cfg.setting.settings() {
        let report = evaluate(&dataset, &fold, setting, segmenter.as_ref(), threads)?;
        write_report(&cfg.out, &report)?;
        let _ = write!(log, "{}", report.to_table());
        reports.push(report);
    }
    Ok(reports)
}

/// One (mode, depth) cell of the ablation.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub mode: CrossMode,
    pub depth: usize,
    pub outcome: std::result::Result<Vec<DiceReport>, String>,
}

impl AblationCell {
    pub fn dir_name(&self) -> String {
        format!("{}_d{}", self.mode, self.depth)
    }

    /// Overall Dice of the last setting evaluated.
    pub fn dice(&self) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(|r| r.last()).map(|r| r.overall)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub modes: Vec<CrossMode>,
    pub depths: Vec<usize>,
    /// Mode-major.
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, mode: CrossMode, depth: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.mode == mode && c.depth == depth)
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            match &c.outcome {
                Ok(reports) => {
                    for r in reports {
                        let its: Vec<String> = r.iteration_means().iter().map(|d| format!("{d:.6}")).collect();
                        let _ = writeln!(
                            out,
                            "mode={} depth={} setting={} status=ok dice_mean={:.6} iteration_dice={}",
                            c.mode,
                            c.depth,
                            r.setting,
                            r.overall,
                            its.join(",")
                        );
                    }
                }
                Err(_) => {
                    let _ = writeln!(out, "mode={} depth={} status=failed", c.mode, c.depth);
                }
            }
        }
        out
    }

    /// Modes down, depths across; depth 1 is the single-pass (no iteration)
    /// column. Followed by the per-iteration Dice of every cell.
    pub fn to_table(&self) -> String {
        let mut out = String::from("mode   ");
        for &d in &self.depths {
            let head = if d == 1 { "d=1(no-iter)".to_string() } else { format!("d={d}") };
            let _ = write!(out, "  {head:>12}");
        }
        out.push('\n');
        for &m in &self.modes {
            let _ = write!(out, "{:<7}", m.as_str());
            for &d in &self.depths {
                let cell = match self.cell(m, d).map(|c| (c.dice(), &c.outcome)) {
                    Some((Some(v), _)) => format!("{v:.4}"),
                    _ => "failed".to_string(),
                };
                let _ = write!(out, "  {cell:>12}");
            }
            out.push('\n');
        }
        out.push_str("\nper-iteration dice\n");
        for c in &self.cells {
            match &c.outcome {
                Ok(reports) => {
                    for r in reports {
                        let its: Vec<String> = r.iteration_means().iter().map(|d| format!("{d:.4}")).collect();
                        let _ = writeln!(out, "{:<6} d={} setting {}: {}", c.mode, c.depth, r.setting, its.join(" "));
                    }
                }
                Err(e) => {
                    let _ = writeln!(out, "{:<6} d={} failed: {e}", c.mode, c.depth);
                }
            }
        }
        out
    }
}

/// Trains and evaluates one model per (mode, depth) cell, each in its own
/// subdirectory of `cfg.out/cells`, then writes the table. A failing cell is
/// recorded and the rest still run.
pub fn cmd_ablate(cfg: &RunConfig, threads: Option<usize>, log: &mut dyn Write) -> Result<AblationTable> {
    cfg.validate()?;
    load_dataset(&cfg.data)?;
    create_dir(&cfg.out)?;
    let mut cells = Vec::new();
    for &mode in &cfg.ablate_modes {
        for &depth in &cfg.ablate_depths {
            let mut cell = AblationCell {
                mode,
                depth,
                outcome: Err(String::new()),
            };
            let cell_cfg = RunConfig {
                mode,
                depth,
                out: cfg.out.join("cells").join(cell.dir_name()),
                ..cfg.clone()
            };
            let _ = writeln!(log, "== cell {}", cell.dir_name());
            cell.outcome = cmd_train(&cell_cfg, None, log)
                .and_then(|t| cmd_eval(&cell_cfg, &EvalModel::Checkpoint(t.checkpoint), threads, log))
                .map_err(|e| e.to_string());
            if let Err(e) = &cell.outcome {
                let _ = writeln!(log, "cell {} failed: {e}", cell.dir_name());
            }
            cells.push(cell);
        }
    }
    let table = AblationTable {
        modes: cfg.ablate_modes.clone(),
        depths: cfg.ablate_depths.clone(),
        cells,
    };
    write_file(&cfg.out.join(ABLATION_TABLE), table.to_table())?;
    write_file(&cfg.out.join(ABLATION_KV), table.to_key_values())?;
    let groups: Vec<Vec<f64>> = table
        .modes
        .iter()
        .map(|&m| {
            table
                .depths
                .iter()
                .map(|&d| table.cell(m, d).and_then(AblationCell::dice).unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    plot::bar_chart(&groups, PLOT_SIZE.0, PLOT_SIZE.1).save(&cfg.out.join("ablation.pgm"))?;
    let _ = write!(log, "{}", table.to_table());
    Ok(table)
}

/// Looks up a differentiable op by its report name.
pub fn parse_op_kind(name: &str) -> Result<OpKind> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown op {name:?}")))
}

/// Runs the finite-difference suite and writes `gradcheck.txt` into
/// `cfg.out`. `fault` corrupts one backward rule to prove failures surface.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    fault: Option<OpKind>,
    filter: Option<&str>,
    log: &mut dyn Write,
) -> Result<Vec<CheckOutcome>> {
    let opts = CheckOptions {
        seed: cfg.seed,
        fault,
        ..CheckOptions::default()
    };
    let outcomes = gradcheck::run_all(&opts, filter)?;
    let mut text = String::new();
    for o in &outcomes {
        let _ = writeln!(text, "{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let _ = writeln!(text, "{} checks, {failed} failed", outcomes.len());
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("gradcheck.txt"), &text)?;
    let _ = write!(log, "{text}");
    Ok(outcomes)
}
