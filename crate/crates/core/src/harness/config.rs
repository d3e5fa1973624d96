use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Dims;
use crate::error::{Error, Result};
use crate::fusion::ModelConfig;

/// Batch size / learning-rate presets for the two reference settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Mimic,
    Mybank,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mimic" => Ok(Profile::Mimic),
            "mybank" => Ok(Profile::Mybank),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected mimic or mybank)"))),
        }
    }
}

/// Every knob of a training run. Dimensions left unset are taken from the
/// training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub n_d: Option<usize>,
    #[serde(default)]
    pub n_b: Option<usize>,
    #[serde(default)]
    pub t: Option<usize>,
    pub d1: usize,
    pub d2: usize,
    pub d_b: usize,
    pub d_g: usize,
    pub n_heads: usize,
    /// Output channels of the graph-embedding conv layers, first to last.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub lstm_layers: usize,
    pub c: f64,
    pub lambda_d: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub disable_gge: bool,
    pub disable_beta_attn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile(Profile::Mimic)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let batch_size = match profile {
            Profile::Mimic => 256,
            Profile::Mybank => 128,
        };
        TrainConfig {
            n_d: None,
            n_b: None,
            t: None,
            d1: 64,
            d2: 32,
            d_b: 64,
            d_g: 64,
            n_heads: 4,
            conv_channels: vec![64, 128],
            kernel: 3,
            stride: 1,
            lstm_layers: 1,
            c: 1.0,
            lambda_d: 1.0,
            dropout: 0.5,
            batch_size,
            lr: 0.001,
            epochs: 30,
            seed: 0,
            disable_gge: false,
            disable_beta_attn: false,
        }
    }

    /// The small gradient-check configuration.
    pub fn tiny() -> Self {
        TrainConfig {
            n_d: Some(3),
            n_b: Some(2),
            t: Some(8),
            d1: 8,
            d2: 4,
            d_b: 8,
            d_g: 8,
            n_heads: 2,
            conv_channels: vec![4, 8],
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    /// Parse a flat JSON object on top of the profile defaults. Unknown keys
    /// are rejected.
    pub fn from_json_str(text: &str, profile: Profile) -> Result<Self> {
        TrainConfig::overlay_json(text, &TrainConfig::profile(profile))
    }

    /// Parse a flat JSON object on top of `base`.
    pub fn overlay_json(text: &str, base: &TrainConfig) -> Result<Self> {
        let overlay: Value =
            serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
        let Value::Object(overlay) = overlay else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        let target = merged.as_object_mut().expect("config is an object");
        for (k, v) in overlay {
            target.insert(k, v);
        }
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>, profile: Profile) -> Result<Self> {
        TrainConfig::from_json_str(&std::fs::read_to_string(path)?, profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lstm_layers != 1 {
            return Err(Error::Config(format!(
                "only single-layer channel LSTMs are supported, got {}",
                self.lstm_layers
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lambda_d >= 0.0) {
            return Err(Error::Config(format!("lambda_d must be >= 0, got {}", self.lambda_d)));
        }
        if [self.n_d, self.n_b, self.t].contains(&Some(0)) {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Fill unset dimensions from `dims`; set ones must agree with it.
    pub fn with_dims(&self, dims: Dims) -> Result<TrainConfig> {
        let pick = |name: &str, set: Option<usize>, data: usize| match set {
            Some(v) if v != data => Err(Error::Schema(format!("config {name}={v} but data has {name}={data}"))),
            _ => Ok(Some(data)),
        };
        Ok(TrainConfig {
            n_d: pick("n_d", self.n_d, dims.n_d)?,
            n_b: pick("n_b", self.n_b, dims.n_b)?,
            t: pick("t", self.t, dims.t)?,
            ..self.clone()
        })
    }

    pub fn dims(&self) -> Result<Dims> {
        match (self.n_d, self.n_b, self.t) {
            (Some(n_d), Some(n_b), Some(t)) => Ok(Dims { n_d, n_b, t }),
            _ => Err(Error::Config("n_d, n_b and t must be set (or inferred from data)".into())),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.validate()?;
        let dims = self.dims()?;
        let cfg = ModelConfig {
            n_d: dims.n_d,
            n_b: dims.n_b,
            t: dims.t,
            d1: self.d1,
            d2: self.d2,
            d_b: self.d_b,
            d_g: self.d_g,
            n_heads: self.n_heads,
            conv_channels: self.conv_channels.clone(),
            kernel: self.kernel,
            stride: self.stride,
            c: self.c,
            dropout: self.dropout,
            use_gge: !self.disable_gge,
            harmonic_attention: !self.disable_beta_attn,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
