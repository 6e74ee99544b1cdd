use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pooling::PoolingSpec;
use crate::scalar::Scalar;

/// How bag probabilities are formed from the saliency map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingKind {
    Max,
    Average,
    GeneralizedMean {
        r: f64,
    },
    NoisyOr,
    LogSumExp {
        r: f64,
    },
    /// `r = r0 + exp(β)` with a learned `β`.
    LseLba {
        r0: f64,
    },
}

impl PoolingKind {
    pub fn name(&self) -> &'static str {
        match self {
            PoolingKind::Max => "max",
            PoolingKind::Average => "avg",
            PoolingKind::GeneralizedMean { .. } => "gm",
            PoolingKind::NoisyOr => "nor",
            PoolingKind::LogSumExp { .. } => "lse",
            PoolingKind::LseLba { .. } => "lse_lba",
        }
    }

    /// Builds a kind from its name plus the `r` / `r0` values in effect.
    pub fn from_name(name: &str, r: f64, r0: f64) -> Result<Self> {
        Ok(match name {
            "max" => PoolingKind::Max,
            "avg" | "average" => PoolingKind::Average,
            "gm" => PoolingKind::GeneralizedMean { r },
            "nor" | "noisy_or" => PoolingKind::NoisyOr,
            "lse" => PoolingKind::LogSumExp { r },
            "lse_lba" => PoolingKind::LseLba { r0 },
            other => return Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        })
    }

    /// Concrete spec for a given `β` (ignored by the fixed kinds).
    pub fn spec<T: Scalar>(&self, beta: T) -> PoolingSpec<T> {
        match *self {
            PoolingKind::Max => PoolingSpec::Max,
            PoolingKind::Average => PoolingSpec::Average,
            PoolingKind::GeneralizedMean { r } => PoolingSpec::GeneralizedMean { r: T::of(r) },
            PoolingKind::NoisyOr => PoolingSpec::NoisyOr,
            PoolingKind::LogSumExp { r } => PoolingSpec::LogSumExp { r: T::of(r) },
            PoolingKind::LseLba { r0 } => PoolingSpec::LseLba { r0: T::of(r0), beta },
        }
    }
}

/// Resolution-preserving refinement used at every level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Refinement {
    /// Each step convolves the concatenation of all previous maps.
    Dense,
    /// Identity-skip residual steps `relu(conv(F) + F)`, kept for comparison.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side of the square single-channel input.
    pub input_size: usize,
    /// Number of resolution-halving levels.
    pub levels: usize,
    pub base_channels: usize,
    /// Output channels of the reduce block (and of the fusion) at each level.
    pub channels_per_level: Vec<usize>,
    pub dense_depth: usize,
    pub growth_rate: usize,
    pub num_classes: usize,
    /// Side of the saliency grid; must equal one level's resolution.
    pub saliency_resolution: usize,
    pub refinement: Refinement,
    /// Pooling family name: `max`, `avg`, `gm`, `nor`, `lse` or `lse_lba`.
    pub pooling: String,
    /// Fixed sharpness for `gm` and `lse`.
    pub r: f64,
    /// Sharpness lower bound for `lse_lba`.
    pub r0: f64,
    pub beta_init: f64,
    pub per_class_beta: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            levels: 3,
            base_channels: 8,
            channels_per_level: vec![16, 16, 24],
            dense_depth: 2,
            growth_rate: 8,
            num_classes: 2,
            saliency_resolution: 16,
            refinement: Refinement::Dense,
            pooling: "lse_lba".into(),
            r: 10.0,
            r0: 5.0,
            beta_init: 0.0,
            per_class_beta: false,
            seed: 0,
        }
    }
}

/// Keys understood by [`ModelConfig::set`], in echo order.
pub const MODEL_KEYS: &[&str] = &[
    "input_size",
    "levels",
    "base_channels",
    "channels_per_level",
    "dense_depth",
    "growth_rate",
    "num_classes",
    "saliency_resolution",
    "refinement",
    "pooling",
    "r",
    "r0",
    "beta_init",
    "per_class_beta",
    "seed",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl ModelConfig {
    /// Resolution of level `l` (level 0 is the input).
    pub fn level_resolution(&self, l: usize) -> usize {
        self.input_size >> l
    }

    /// Level whose resolution equals the saliency grid side.
    pub fn output_level(&self) -> Option<usize> {
        (1..=self.levels).find(|&l| self.level_resolution(l) == self.saliency_resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.channels_per_level.len() != self.levels {
            return Err(Error::Config(format!(
                "channels_per_level has {} entries for {} levels",
                self.channels_per_level.len(),
                self.levels
            )));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        for l in 1..=self.levels {
            let above = self.input_size >> (l - 1);
            if !above.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "level {l}: cannot halve resolution {above} (input_size {} is not divisible by 2^{})",
                    self.input_size, self.levels
                )));
            }
        }
        if self.output_level().is_none() {
            let sizes: Vec<String> = (1..=self.levels)
                .map(|l| format!("level {l} = {}", self.level_resolution(l)))
                .collect();
            return Err(Error::Config(format!(
                "saliency_resolution {} matches no level ({})",
                self.saliency_resolution,
                sizes.join(", ")
            )));
        }
        let positive = [
            ("base_channels", self.base_channels),
            ("dense_depth", self.dense_depth),
            ("growth_rate", self.growth_rate),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if let Some((l, _)) = self.channels_per_level.iter().enumerate().find(|(_, &c)| c == 0) {
            return Err(Error::Config(format!("level {}: zero channels", l + 1)));
        }
        match self.pooling()? {
            PoolingKind::LseLba { r0 } if !(r0 >= 0.0 && r0.is_finite()) => {
                return Err(Error::Config(format!("r0 must be >= 0, got {r0}")))
            }
            PoolingKind::GeneralizedMean { r } | PoolingKind::LogSumExp { r } if !(r > 0.0 && r.is_finite()) => {
                return Err(Error::Config(format!("r must be > 0, got {r}")))
            }
            _ => {}
        }
        if !self.beta_init.is_finite() {
            return Err(Error::Config("beta_init must be finite".into()));
        }
        Ok(())
    }

    pub fn pooling(&self) -> Result<PoolingKind> {
        PoolingKind::from_name(&self.pooling, self.r, self.r0)
    }

    /// Sets one key. Returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "input_size" => self.input_size = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "channels_per_level" => {
                self.channels_per_level = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "dense_depth" => self.dense_depth = parse(key, value)?,
            "growth_rate" => self.growth_rate = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "saliency_resolution" => self.saliency_resolution = parse(key, value)?,
            "refinement" => {
                self.refinement = match value.trim() {
                    "dense" => Refinement::Dense,
                    "residual" => Refinement::Residual,
                    other => return Err(Error::Config(format!("unknown refinement `{other}`"))),
                }
            }
            "pooling" => {
                let name = value.trim();
                PoolingKind::from_name(name, self.r, self.r0)?;
                self.pooling = name.to_string();
            }
            "r" => self.r = parse(key, value)?,
            "r0" => self.r0 = parse(key, value)?,
            "beta_init" => self.beta_init = parse(key, value)?,
            "per_class_beta" => self.per_class_beta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Key/value pairs covering every field, in [`MODEL_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let channels = self
            .channels_per_level
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let refinement = match self.refinement {
            Refinement::Dense => "dense",
            Refinement::Residual => "residual",
        };
        let values = [
            self.input_size.to_string(),
            self.levels.to_string(),
            self.base_channels.to_string(),
            channels,
            self.dense_depth.to_string(),
            self.growth_rate.to_string(),
            self.num_classes.to_string(),
            self.saliency_resolution.to_string(),
            refinement.to_string(),
            self.pooling.clone(),
            format!("{:?}", self.r),
            format!("{:?}", self.r0),
            format!("{:?}", self.beta_init),
            self.per_class_beta.to_string(),
            self.seed.to_string(),
        ];
        MODEL_KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        Ok(cfg)
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
