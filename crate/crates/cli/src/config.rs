//! Flat `key = value` run configuration.
//!
//! Resolution order: built-in defaults, then `--config FILE`, then `--seed`,
//! then each `--set key=value` in order. The resolved configuration is
//! written back out in the same format, so a run directory's `config.txt`
//! reproduces the run when passed to `--config`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lsepool_core::data::{SyntheticSpec, ZoomRange};
use lsepool_core::model::{ModelConfig, MODEL_KEYS};
use lsepool_core::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub precision: Precision,
    /// Root holding `train/`, `val/` and `test/` dataset directories; `None`
    /// generates the synthetic splits in memory.
    pub data: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub checkpoint: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub r0_list: Vec<f64>,
}

/// Every key accepted by [`RunConfig::set`], in output order.
pub const RUN_KEYS: &[&str] = &[
    "precision",
    "data",
    "n_train",
    "n_val",
    "n_test",
    "image_size",
    "label_prior",
    "focal_radius_range",
    "focal_amplitude_range",
    "instance_count_range",
    "diffuse_coverage_range",
    "diffuse_contrast",
    "diffuse_edge_softness",
    "background_range",
    "gradient_amplitude",
    "noise_std",
    "lr",
    "weight_decay",
    "batch_size",
    "max_epochs",
    "max_steps",
    "patience",
    "augment",
    "zoom_range",
    "record_wall_time",
    "checkpoint",
    "eval_split",
    "taus",
    "alphas",
    "r0_list",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                max_steps: Some(2000),
                ..TrainConfig::default()
            },
            synthetic: SyntheticSpec::default(),
            precision: Precision::F32,
            data: None,
            n_train: 500,
            n_val: 200,
            n_test: 200,
            checkpoint: None,
            eval_split: EvalSplit::Test,
            taus: (1..10).map(|i| i as f64 / 10.0).collect(),
            alphas: vec![0.5],
            r0_list: vec![0.0, 5.0, 10.0],
        }
    }
}

fn invalid(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key} = {value}`: {why}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| invalid(key, value, "cannot parse value"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<(T, T), CliError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(invalid(key, value, "expected `lo,hi`")),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn pair<T: std::fmt::Display>((a, b): (T, T)) -> String {
    format!("{a},{b}")
}

impl RunConfig {
    /// One seed drives model initialization, shuffling, augmentation and
    /// synthetic generation.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        if key == "seed" {
            let seed = parse(key, value)?;
            self.set_seed(seed);
            return Ok(());
        }
        if MODEL_KEYS.contains(&key) {
            self.model.set(key, value).map_err(|e| invalid(key, value, e))?;
            return Ok(());
        }
        let syn = &mut self.synthetic;
        match key {
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(invalid(key, value, "expected f32 or f64")),
                }
            }
            "data" => self.data = path_or_none(value),
            "n_train" => self.n_train = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "image_size" => syn.image_size = parse(key, value)?,
            "label_prior" => syn.label_prior = parse(key, value)?,
            "focal_radius_range" => syn.focal_radius_range = parse_pair(key, value)?,
            "focal_amplitude_range" => syn.focal_amplitude_range = parse_pair(key, value)?,
            "instance_count_range" => syn.instance_count_range = parse_pair(key, value)?,
            "diffuse_coverage_range" => syn.diffuse_coverage_range = parse_pair(key, value)?,
            "diffuse_contrast" => syn.diffuse_contrast = parse(key, value)?,
            "diffuse_edge_softness" => syn.diffuse_edge_softness = parse(key, value)?,
            "background_range" => syn.background_range = parse_pair(key, value)?,
            "gradient_amplitude" => syn.gradient_amplitude = parse(key, value)?,
            "noise_std" => syn.noise_std = parse(key, value)?,
            "lr" => self.train.adam.lr = parse(key, value)?,
            "weight_decay" => self.train.adam.weight_decay = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "max_steps" => {
                self.train.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "patience" => self.train.patience = parse(key, value)?,
            "augment" => self.train.augment = parse(key, value)?,
            "zoom_range" => self.train.zoom_range = ZoomRange::from_name(value).map_err(|e| invalid(key, value, e))?,
            "record_wall_time" => self.train.record_wall_time = parse(key, value)?,
            "checkpoint" => self.checkpoint = path_or_none(value),
            "eval_split" => {
                self.eval_split = match value {
                    "train" => EvalSplit::Train,
                    "val" => EvalSplit::Val,
                    "test" => EvalSplit::Test,
                    _ => return Err(invalid(key, value, "expected train, val or test")),
                }
            }
            "taus" => self.taus = parse_list(key, value)?,
            "alphas" => self.alphas = parse_list(key, value)?,
            "r0_list" => self.r0_list = parse_list(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    origin.display(),
                    i + 1
                ))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
        self.set(key.trim(), value)
    }

    /// Every setting, defaults included, in a form [`apply_text`] accepts.
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn to_text(&self) -> String {
        let syn = &self.synthetic;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut pairs: Vec<(String, String)> = self.model.to_pairs().into_iter().filter(|(k, _)| k != "seed").collect();
        let run: Vec<(&str, String)> = vec![
            ("seed", self.model.seed.to_string()),
            ("precision", self.precision.name().into()),
            ("data", path(&self.data)),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("image_size", syn.image_size.to_string()),
            ("label_prior", syn.label_prior.to_string()),
            ("focal_radius_range", pair(syn.focal_radius_range)),
            ("focal_amplitude_range", pair(syn.focal_amplitude_range)),
            ("instance_count_range", pair(syn.instance_count_range)),
            ("diffuse_coverage_range", pair(syn.diffuse_coverage_range)),
            ("diffuse_contrast", syn.diffuse_contrast.to_string()),
            ("diffuse_edge_softness", syn.diffuse_edge_softness.to_string()),
            ("background_range", pair(syn.background_range)),
            ("gradient_amplitude", syn.gradient_amplitude.to_string()),
            ("noise_std", syn.noise_std.to_string()),
            ("lr", t.adam.lr.to_string()),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            (
                "max_steps",
                t.max_steps.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            ),
            ("patience", t.patience.to_string()),
            ("augment", t.augment.to_string()),
            ("zoom_range", t.zoom_range.name().into()),
            ("record_wall_time", t.record_wall_time.to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("eval_split", self.eval_split.name().into()),
            ("taus", join(&self.taus)),
            ("alphas", join(&self.alphas)),
            ("r0_list", join(&self.r0_list)),
        ];
        pairs.extend(run.into_iter().map(|(k, v)| (k.to_string(), v)));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Checks value ranges that no single key can check on its own.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synthetic.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.is_none() && self.synthetic.image_size != self.model.input_size {
            return Err(CliError::Config(format!(
                "synthetic image_size {} differs from model input_size {}",
                self.synthetic.image_size, self.model.input_size
            )));
        }
        if self.data.is_none() && self.synthetic.classes.len() != self.model.num_classes {
            return Err(CliError::Config(format!(
                "the synthetic generator has {} classes, num_classes is {}",
                self.synthetic.classes.len(),
                self.model.num_classes
            )));
        }
        let adam = &self.train.adam;
        if !(adam.lr.is_finite() && adam.lr >= 0.0 && adam.weight_decay.is_finite() && adam.weight_decay >= 0.0) {
            return Err(CliError::Config("lr and weight_decay must be finite and >= 0".into()));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 {
            return Err(CliError::Config("batch_size and max_epochs must be >= 1".into()));
        }
        for (name, list) in [("taus", &self.taus), ("alphas", &self.alphas)] {
            if list.is_empty() || list.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(CliError::Config(format!(
                    "{name} must be a non-empty list of values in (0, 1)"
                )));
            }
        }
        if self.r0_list.is_empty() || self.r0_list.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(CliError::Config(
                "r0_list must be a non-empty list of values >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("r0", "7.5").unwrap();
        cfg.set("seed", "11").unwrap();
        cfg.set("taus", "0.1, 0.4,0.8").unwrap();
        cfg.set("max_steps", "none").unwrap();
        cfg.set("data", "/tmp/some data").unwrap();
        let text = cfg.to_text();
        let mut back = RunConfig::default();
        back.apply_text(&text, Path::new("config.txt")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 11);
        assert_eq!(back.synthetic.seed, 11);
    }

    #[test]
    fn every_documented_key_is_echoed() {
        let text = RunConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        for k in RUN_KEYS.iter().chain(MODEL_KEYS) {
            assert!(keys.contains(k), "missing {k}");
        }
        assert_eq!(keys.len(), RUN_KEYS.len() + MODEL_KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_entries_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("learning_rate", "1"), Err(CliError::Config(m)) if m.contains("unknown key")));
        assert!(cfg.set("lr", "fast").is_err());
        assert!(cfg.set("precision", "f16").is_err());
        assert!(cfg.apply_override("lr").is_err());
        let err = cfg
            .apply_text("# comment\n\nlr = 0.1\nbogus = 1\n", Path::new("x.cfg"))
            .unwrap_err();
        assert!(err.to_string().contains("x.cfg:4"), "{err}");
        assert_eq!(cfg.train.adam.lr, 0.1);
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.set("taus", "0.1,1.0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("image_size", "32").unwrap();
        assert!(cfg.validate().is_err());
    }
}
