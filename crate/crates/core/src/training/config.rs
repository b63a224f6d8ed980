//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{fmt_angle, Pose};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::DEFAULT_LR;
use crate::tensor::scalar::DType;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Loss-log line every this many steps; 0 disables the log file.
    pub log_interval: u64,
    /// Floating-point width of a whole run.
    pub precision: DType,
    pub feature_net_seed: u64,
    /// Tensor file with `feature.{i}.weight` / `feature.{i}.bias` replacing
    /// the seeded feature network.
    pub feature_net_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            weights: LossWeights::default(),
            lr: DEFAULT_LR,
            batch_size: 4,
            stage1_steps: 2000,
            stage2_steps: 500,
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_interval: 10,
            precision: DType::F32,
            feature_net_seed: 0,
            feature_net_weights: None,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order; [`TrainConfig::parse`]
    /// reads it back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("image_size", m.image_size.to_string());
        put("encoder_channels", list(&m.encoder_channels));
        put("token_conv_layers", m.token_conv_layers.to_string());
        put("volume_size", m.volume_size.to_string());
        put("volume_channels", m.volume_channels.to_string());
        put(
            "reference_pose",
            format!("{},{}", fmt_angle(m.reference_pose.azimuth()), fmt_angle(m.reference_pose.elevation())),
        );
        put("discriminator_channels", list(&m.discriminator_channels));
        put("lift_channels", list(&m.lift_channels));
        put("decoder_channels", list(&m.decoder_channels));
        put("alpha", format!("{}", w.alpha));
        put("beta", format!("{}", w.beta));
        put("gamma", format!("{}", w.gamma));
        put("lambda", format!("{}", w.lambda));
        put("lr", format!("{}", self.lr));
        put("batch_size", self.batch_size.to_string());
        put("stage1_steps", self.stage1_steps.to_string());
        put("stage2_steps", self.stage2_steps.to_string());
        put("seed", self.seed.to_string());
        put("dataset", self.dataset.display().to_string());
        put("checkpoint_dir", self.checkpoint_dir.display().to_string());
        put("log_interval", self.log_interval.to_string());
        put(
            "precision",
            match self.precision {
                DType::F32 => "32",
                DType::F64 => "64",
            }
            .to_string(),
        );
        put("feature_net_seed", self.feature_net_seed.to_string());
        if let Some(p) = &self.feature_net_weights {
            put("feature_net_weights", p.display().to_string());
        }
        s
    }

    /// Apply `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            if seen.iter().any(|k| k == key) {
                return Err(err(format!("`{key}` is set twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|m| err(m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<X: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<X, String>
        where
            X::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| format!("`{key}`: cannot parse `{v}`: {e}"))
        }
        fn nums(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
            let v = v.trim_start_matches('[').trim_end_matches(']');
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
        }
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = num(key, value)?,
            "encoder_channels" => m.encoder_channels = nums(key, value)?,
            "token_conv_layers" => m.token_conv_layers = num(key, value)?,
            "volume_size" => m.volume_size = num(key, value)?,
            "volume_channels" => m.volume_channels = num(key, value)?,
            "reference_pose" => {
                let (a, e) = value
                    .split_once(',')
                    .ok_or_else(|| format!("`{key}` expects `azimuth,elevation`, got `{value}`"))?;
                m.reference_pose = Pose::new(num(key, a.trim())?, num(key, e.trim())?).map_err(|e| e.to_string())?;
            }
            "discriminator_channels" => m.discriminator_channels = nums(key, value)?,
            "lift_channels" => m.lift_channels = nums(key, value)?,
            "decoder_channels" => m.decoder_channels = nums(key, value)?,
            "alpha" => self.weights.alpha = num(key, value)?,
            "beta" => self.weights.beta = num(key, value)?,
            "gamma" => self.weights.gamma = num(key, value)?,
            "lambda" => self.weights.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "stage1_steps" => self.stage1_steps = num(key, value)?,
            "stage2_steps" => self.stage2_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "log_interval" => self.log_interval = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "32" | "f32" => DType::F32,
                    "64" | "f64" => DType::F64,
                    _ => return Err(format!("`precision` must be 32 or 64, got `{value}`")),
                }
            }
            "feature_net_seed" => self.feature_net_seed = num(key, value)?,
            "feature_net_weights" => self.feature_net_weights = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}
