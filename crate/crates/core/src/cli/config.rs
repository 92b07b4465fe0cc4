//! Run configuration as `key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::{GenConfig, Setting, TrainConfig};
use crate::model::ModelConfig;
use crate::refine::CrossMode;

/// Which evaluation settings to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SettingChoice {
    One,
    Two,
    Both,
}

impl SettingChoice {
    pub fn settings(self) -> Vec<Setting> {
        match self {
            SettingChoice::One => vec![Setting::I],
            SettingChoice::Two => vec![Setting::II],
            SettingChoice::Both => vec![Setting::I, Setting::II],
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SettingChoice::One => "1",
            SettingChoice::Two => "2",
            SettingChoice::Both => "both",
        }
    }
}

impl FromStr for SettingChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(SettingChoice::One),
            "2" => Ok(SettingChoice::Two),
            "both" => Ok(SettingChoice::Both),
            other => Err(Error::Config(format!("setting must be 1, 2 or both, got {other:?}"))),
        }
    }
}

/// Every knob of every command, with defaults for the desk-scale setup.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: PathBuf,
    pub out: PathBuf,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub folds: usize,
    pub fold: usize,
    pub iters: usize,
    pub lr: f64,
    pub log_interval: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub tied: bool,
    pub mode: CrossMode,
    pub deep_supervision: bool,
    pub initial_loss_weight: f64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_hat: f64,
    pub setting: SettingChoice,
    pub ablate_modes: Vec<CrossMode>,
    pub ablate_depths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            n_classes: 10,
            samples_per_class: 12,
            image_size: 32,
            folds: 5,
            fold: 0,
            iters: 2000,
            lr: 0.001,
            log_interval: 100,
            embed_dim: model.encoder.embed_dim,
            heads: model.attention.num_heads,
            depth: model.refine.num_iterations,
            tied: model.refine.tied_weights,
            mode: model.refine.mode,
            deep_supervision: model.refine.deep_supervision,
            initial_loss_weight: model.initial_loss_weight,
            alpha: model.proto.alpha,
            tau: model.proto.tau,
            tau_hat: model.proto.tau_hat,
            setting: SettingChoice::Both,
            ablate_modes: CrossMode::ALL.to_vec(),
            ablate_depths: vec![1, 2, 3, 4, 5],
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse list item {p:?}")))
        })
        .collect()
}

fn parse_value<T: FromStr>(key: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "seed",
        "data",
        "out",
        "n_classes",
        "samples_per_class",
        "image_size",
        "folds",
        "fold",
        "iters",
        "lr",
        "log_interval",
        "embed_dim",
        "heads",
        "depth",
        "tied",
        "mode",
        "deep_supervision",
        "initial_loss_weight",
        "alpha",
        "tau",
        "tau_hat",
        "setting",
        "ablate_modes",
        "ablate_depths",
    ];

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data" => self.data.display().to_string(),
            "out" => self.out.display().to_string(),
            "n_classes" => self.n_classes.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "image_size" => self.image_size.to_string(),
            "folds" => self.folds.to_string(),
            "fold" => self.fold.to_string(),
            "iters" => self.iters.to_string(),
            "lr" => format!("{:?}", self.lr),
            "log_interval" => self.log_interval.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "heads" => self.heads.to_string(),
            "depth" => self.depth.to_string(),
            "tied" => self.tied.to_string(),
            "mode" => self.mode.to_string(),
            "deep_supervision" => self.deep_supervision.to_string(),
            "initial_loss_weight" => format!("{:?}", self.initial_loss_weight),
            "alpha" => format!("{:?}", self.alpha),
            "tau" => format!("{:?}", self.tau),
            "tau_hat" => format!("{:?}", self.tau_hat),
            "setting" => self.setting.as_str().to_string(),
            "ablate_modes" => join(&self.ablate_modes),
            "ablate_depths" => join(&self.ablate_depths),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "n_classes" => self.n_classes = parse_value(key, v)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "folds" => self.folds = parse_value(key, v)?,
            "fold" => self.fold = parse_value(key, v)?,
            "iters" => self.iters = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "log_interval" => self.log_interval = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "tied" => self.tied = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "deep_supervision" => self.deep_supervision = parse_value(key, v)?,
            "initial_loss_weight" => self.initial_loss_weight = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "tau_hat" => self.tau_hat = parse_value(key, v)?,
            "setting" => self.setting = v.parse()?,
            "ablate_modes" => self.ablate_modes = parse_list(key, v)?,
            "ablate_depths" => self.ablate_depths = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text: every key once, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            height: self.image_size,
            width: self.image_size,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            lr: self.lr,
            log_interval: self.log_interval,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::with_embed_dim(self.embed_dim);
        m.attention.num_heads = self.heads;
        m.refine.num_iterations = self.depth;
        m.refine.tied_weights = self.tied;
        m.refine.mode = self.mode;
        m.refine.deep_supervision = self.deep_supervision;
        m.initial_loss_weight = self.initial_loss_weight;
        m.proto.alpha = self.alpha;
        m.proto.tau = self.tau;
        m.proto.tau_hat = self.tau_hat;
        m
    }

    /// Checks every combination before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.train_config().validate()?;
        let model = self.model_config();
        model.validate()?;
        if self.image_size % model.encoder.total_stride() != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of the encoder stride {}",
                self.image_size,
                model.encoder.total_stride()
            )));
        }
        if self.folds < 2 || self.folds > self.n_classes {
            return Err(Error::Config(format!(
                "folds {} must lie in 2..={} (the class count)",
                self.folds, self.n_classes
            )));
        }
        if self.fold >= self.folds {
            return Err(Error::Config(format!("fold {} out of range for {} folds", self.fold, self.folds)));
        }
        if self.ablate_modes.is_empty() || self.ablate_depths.is_empty() {
            return Err(Error::Config("ablation needs at least one mode and one depth".into()));
        }
        for &d in &self.ablate_depths {
            let mut m = model.clone();
            m.refine.num_iterations = d;
            m.refine.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_echo() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(cfg.to_text().starts_with("seed = 0\ndata = data\n"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("mode = sideways").is_err());
        let bad = RunConfig::parse("tau = 0.3\ntau_hat = 0.4").unwrap();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let odd = RunConfig::parse("image_size = 30").unwrap();
        assert!(odd.validate().is_err());
        let deep = RunConfig::parse("ablate_depths = 1,6").unwrap();
        assert!(deep.validate().is_err());
    }

    #[test]
    fn comments_and_partial_text() {
        let cfg = RunConfig::parse("# run\n\nlr = 0.5\nsetting = 2\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.setting, SettingChoice::Two);
        assert_eq!(cfg.iters, RunConfig::default().iters);
    }

    proptest! {
        #[test]
        fn text_roundtrip(
            seed in any::<u64>(),
            lr in 0.0f64..10.0,
            depth in 1usize..=5,
            alpha in 0.01f64..100.0,
            modes in proptest::sample::subsequence(CrossMode::ALL.to_vec(), 1..=3),
            setting in prop_oneof![Just(SettingChoice::One), Just(SettingChoice::Two), Just(SettingChoice::Both)],
            tied in any::<bool>(),
        ) {
            let cfg = RunConfig { seed, lr, depth, alpha, ablate_modes: modes, setting, tied, ..RunConfig::default() };
            let text = cfg.to_text();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
