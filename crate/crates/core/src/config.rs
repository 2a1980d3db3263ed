//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::batch::DropExpand;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("optimizer must be adam|sgd, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub drop_expand: DropExpand,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            drop_expand: DropExpand::DropAndExpand,
            seed: 0,
            model: ModelConfig::default(),
            data: SynthSpec::default(),
            test_fraction: 0.2,
        }
    }
}

/// Accepted keys, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "optimizer",
    "weight_decay",
    "clip_norm",
    "beta",
    "gamma",
    "tau",
    "drop_expand",
    "seed",
    "plain",
    "height",
    "width",
    "channels",
    "classes",
    "patch",
    "dim",
    "heads",
    "layers",
    "mlp_ratio",
    "token_hidden",
    "per_class",
    "noise",
    "data_seed",
    "test_fraction",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Set one key; used by the file parser and by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "beta" => self.weights.ce = num(key, v)?,
            "gamma" => self.weights.uniform = num(key, v)?,
            "tau" => self.weights.inverse = num(key, v)?,
            "loss_weights" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("loss_weights needs beta,gamma,tau, got {v:?}")));
                }
                self.weights = LossWeights::new(num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?)?;
            }
            "drop_expand" => self.drop_expand = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "plain" => self.model.keyed = !boolean(key, v)?,
            "height" => {
                self.model.height = num(key, v)?;
                self.data.height = self.model.height;
            }
            "width" => {
                self.model.width = num(key, v)?;
                self.data.width = self.model.width;
            }
            "channels" => {
                self.model.channels = num(key, v)?;
                self.data.channels = self.model.channels;
            }
            "classes" => {
                self.model.classes = num(key, v)?;
                self.data.classes = self.model.classes;
            }
            "patch" => self.model.patch = num(key, v)?,
            "dim" => self.model.dim = num(key, v)?,
            "heads" => self.model.heads = num(key, v)?,
            "layers" => self.model.layers = num(key, v)?,
            "mlp_ratio" => self.model.mlp_ratio = num(key, v)?,
            "token_hidden" => self.model.token_hidden = num(key, v)?,
            "per_class" => self.data.per_class = num(key, v)?,
            "noise" => self.data.noise = num(key, v)?,
            "data_seed" => self.data.seed = num(key, v)?,
            "test_fraction" => self.test_fraction = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let wrap = |e: Error| Error::ConfigLine {
                line: i + 1,
                msg: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(wrap(Error::Config(format!("expected key = value, got {line:?}"))));
            };
            self.set(k.trim(), v).map_err(wrap)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("weight_decay and clip_norm must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Canonical text: every key, one per line, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let values: Vec<String> = vec![
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            self.optimizer.to_string(),
            format!("{:?}", self.weight_decay),
            format!("{:?}", self.clip_norm),
            format!("{:?}", self.weights.ce),
            format!("{:?}", self.weights.uniform),
            format!("{:?}", self.weights.inverse),
            self.drop_expand.to_string(),
            self.seed.to_string(),
            (!m.keyed).to_string(),
            m.height.to_string(),
            m.width.to_string(),
            m.channels.to_string(),
            m.classes.to_string(),
            m.patch.to_string(),
            m.dim.to_string(),
            m.heads.to_string(),
            m.layers.to_string(),
            m.mlp_ratio.to_string(),
            m.token_hidden.to_string(),
            self.data.per_class.to_string(),
            format!("{:?}", self.data.noise),
            self.data.seed.to_string(),
            format!("{:?}", self.test_fraction),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lr = 1.25e-3;
        c.weights = LossWeights::new(1.0, 0.0, 0.5).unwrap();
        c.model.keyed = false;
        c.drop_expand = DropExpand::DropOnly;
        c.data.noise = 0.05;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = TrainConfig::parse("epochs = 3\n\n# note\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 4, .. }), "{e}");
        let e = TrainConfig::parse("lr = fast").unwrap_err();
        assert!(matches!(e, Error::ConfigLine { line: 1, .. }));
        let e = TrainConfig::parse("epochs 3").unwrap_err();
        assert!(e.to_string().contains("key = value"));
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("lr = 0").is_err());
        assert!(TrainConfig::parse("gamma = -1").is_err());
    }

    #[test]
    fn loss_weight_triplet_and_comments() {
        let c = TrainConfig::parse("loss_weights = 1,0,0  # never forgets\nclasses=6").unwrap();
        assert_eq!(c.weights, LossWeights::new(1.0, 0.0, 0.0).unwrap());
        assert_eq!((c.model.classes, c.data.classes), (6, 6));
    }
}
