use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::ConsistencyDistance;
use crate::error::{Error, Result};

/// Second-view transform for the consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    #[default]
    Flip,
    Scaling,
    Intensity,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip" => Ok(Self::Flip),
            "scaling" => Ok(Self::Scaling),
            "intensity" => Ok(Self::Intensity),
            other => Err(Error::config(format!("unknown transform `{other}`"))),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Flip => "flip",
            Self::Scaling => "scaling",
            Self::Intensity => "intensity",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Consistency weight.
    pub lambda: f64,
    /// Smoothing strength of the re-balanced labels.
    pub alpha: f64,
    /// Effective-number hyperparameter.
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay_per_epoch: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_rac: bool,
    pub enable_rsl: bool,
    pub transform: TransformKind,
    pub consistency_distance: ConsistencyDistance,
    /// Scale factor range for the scaling transform.
    pub scale_range: [f64; 2],
    /// Gain range for the intensity transform.
    pub gain_range: [f64; 2],
    /// Backbone channel plan.
    pub channels: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            alpha: 0.1,
            beta: 0.9999,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_decay_per_epoch: 0.9,
            max_epochs: 30,
            batch_size: 64,
            seed: 0,
            enable_rac: true,
            enable_rsl: true,
            transform: TransformKind::Flip,
            consistency_distance: ConsistencyDistance::Squared,
            scale_range: [0.75, 1.25],
            gain_range: [0.7, 1.3],
            channels: vec![16, 32, 64],
        }
    }
}

impl TrainConfig {
    /// Settings for training from scratch on the synthetic dataset on a
    /// single CPU core: a narrower backbone and a larger step size than the
    /// fine-tuning defaults, everything else unchanged.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 1e-2,
            channels: vec![8, 16, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, reason| Err(Error::InvalidHyperparameter { name, value, reason });
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda, "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha, "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta", self.beta, "must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", self.learning_rate, "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay, "must be non-negative");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad("lr_decay_per_epoch", self.lr_decay_per_epoch, "must lie in (0, 1]");
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::config("scale_range must be positive and ordered"));
        }
        let [g0, g1] = self.gain_range;
        if !(g0 > 0.0 && g0 <= g1) {
            return Err(Error::config("gain_range must be positive and ordered"));
        }
        Ok(())
    }

    /// Consistency weight actually applied: zero when RAC is disabled.
    pub fn effective_lambda(&self) -> f64 {
        if self.enable_rac {
            self.lambda
        } else {
            0.0
        }
    }

    /// Smoothing actually applied: zero when RSL is disabled.
    pub fn effective_alpha(&self) -> f64 {
        if self.enable_rsl {
            self.alpha
        } else {
            0.0
        }
    }

    /// Reads a TOML key-value file; missing keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a single `key=value` override using TOML value syntax
    /// (bare words are treated as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        set_field(self, assignment)?;
        self.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Overrides one top-level field of any TOML-representable value from a
/// `key=value` string.
pub fn set_field<T: Serialize + DeserializeOwned>(target: &mut T, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let (key, value) = (key.trim(), value.trim());
    let mut table = toml::Table::try_from(&*target).map_err(|e| Error::config(e.to_string()))?;
    if !table.contains_key(key) {
        return Err(Error::config(format!("unknown config key `{key}`")));
    }
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    table.insert(key.to_string(), parsed);
    *target = table
        .try_into()
        .map_err(|e| Error::config(format!("override `{assignment}`: {e}")))?;
    Ok(())
}
