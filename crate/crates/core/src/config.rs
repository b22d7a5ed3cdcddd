//! Flat `key = value` configuration files and the training configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key maps one to
//! one onto a field of [`TrainConfig`] and onto a `--kebab-case` CLI flag.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id_pool::DEFAULT_ALPHA;
use crate::losses::LossWeights;

/// Parses `key = value` lines.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("config", format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Images per identity.
    pub batch_k: usize,
    /// 0 means one pass over the training images per epoch.
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weights: LossWeights,
    /// ID-pool updating rate.
    pub alpha: f64,
    /// Number of leading (1-indexed) epochs without similarity enhancement.
    pub se_start_epoch: usize,
    pub seed: u64,
    /// `None` uses the manifest's central domain.
    pub central_domain: Option<u32>,
    /// Save a checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub encoder_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub domain_hidden: usize,
    pub use_bnneck: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_p: 16,
            batch_k: 4,
            steps_per_epoch: 0,
            base_lr: 0.1,
            lr_decay_factor: 0.1,
            lr_decay_every: 40,
            momentum: 0.9,
            weights: LossWeights::default(),
            alpha: DEFAULT_ALPHA,
            se_start_epoch: 4,
            seed: 0,
            central_domain: None,
            checkpoint_every: 0,
            encoder_widths: vec![16, 32],
            embedding_dim: 64,
            domain_hidden: 128,
            use_bnneck: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_p",
        "batch_k",
        "steps_per_epoch",
        "base_lr",
        "lr_decay_factor",
        "lr_decay_every",
        "momentum",
        "lambda1",
        "lambda2",
        "lambda3",
        "margin",
        "tau",
        "k_similar",
        "transfer_on_peripheral_only",
        "alpha",
        "se_start_epoch",
        "seed",
        "central_domain",
        "checkpoint_every",
        "encoder_widths",
        "embedding_dim",
        "domain_hidden",
        "use_bnneck",
    ];

    /// One-line description of a key, used for CLI help.
    pub fn describe(key: &str) -> Option<&'static str> {
        Some(match key {
            "epochs" => "training epochs (>= 1)",
            "batch_p" => "identities per mini-batch",
            "batch_k" => "images per identity in a mini-batch",
            "steps_per_epoch" => "steps per epoch; 0 = one pass over the images",
            "base_lr" => "initial learning rate",
            "lr_decay_factor" => "learning-rate multiplier applied every lr_decay_every epochs",
            "lr_decay_every" => "epochs between learning-rate decays",
            "momentum" => "SGD momentum",
            "lambda1" => "weight of the triplet loss",
            "lambda2" => "weight of the domain transfer loss",
            "lambda3" => "weight of the similarity-enhancement loss",
            "margin" => "triplet margin",
            "tau" => "softmax temperature of the similarity-enhancement loss",
            "k_similar" => "pooled identities retrieved per sample",
            "transfer_on_peripheral_only" => "apply the transfer loss to peripheral samples only",
            "alpha" => "ID-pool updating rate",
            "se_start_epoch" => "epochs without similarity enhancement",
            "seed" => "training seed",
            "central_domain" => "central domain id, or `auto`",
            "checkpoint_every" => "checkpoint cadence in epochs; 0 = final only",
            "encoder_widths" => "comma-separated encoder stage widths",
            "embedding_dim" => "embedding width (mapping-stage channels)",
            "domain_hidden" => "hidden width of the domain discriminator",
            "use_bnneck" => "normalization neck before the identity classifier",
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_p" => self.batch_p = parse(key, value)?,
            "batch_k" => self.batch_k = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "lambda1" => w.lambda1 = parse(key, value)?,
            "lambda2" => w.lambda2 = parse(key, value)?,
            "lambda3" => w.lambda3 = parse(key, value)?,
            "margin" => w.margin = parse(key, value)?,
            "tau" => w.tau = parse(key, value)?,
            "k_similar" => w.k_similar = parse(key, value)?,
            "transfer_on_peripheral_only" => w.transfer_on_peripheral_only = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "se_start_epoch" => self.se_start_epoch = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "central_domain" => {
                self.central_domain = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "encoder_widths" => {
                self.encoder_widths = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "domain_hidden" => self.domain_hidden = parse(key, value)?,
            "use_bnneck" => self.use_bnneck = parse(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.weights;
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_p" => self.batch_p.to_string(),
            "batch_k" => self.batch_k.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "base_lr" => format!("{:?}", self.base_lr),
            "lr_decay_factor" => format!("{:?}", self.lr_decay_factor),
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "momentum" => format!("{:?}", self.momentum),
            "lambda1" => format!("{:?}", w.lambda1),
            "lambda2" => format!("{:?}", w.lambda2),
            "lambda3" => format!("{:?}", w.lambda3),
            "margin" => format!("{:?}", w.margin),
            "tau" => format!("{:?}", w.tau),
            "k_similar" => w.k_similar.to_string(),
            "transfer_on_peripheral_only" => w.transfer_on_peripheral_only.to_string(),
            "alpha" => format!("{:?}", self.alpha),
            "se_start_epoch" => self.se_start_epoch.to_string(),
            "seed" => self.seed.to_string(),
            "central_domain" => self.central_domain.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "encoder_widths" => self
                .encoder_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "embedding_dim" => self.embedding_dim.to_string(),
            "domain_hidden" => self.domain_hidden.to_string(),
            "use_bnneck" => self.use_bnneck.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each, in [`Self::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Applies `key = value` text on top of `self`.
    pub fn overlay_kv(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.overlay_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_p < 1 || self.batch_k < 1 {
            return bad("batch_p and batch_k must be >= 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be > 0");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.weights.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if self.embedding_dim < 2 || self.encoder_widths.is_empty() {
            return bad("embedding_dim must be >= 2 and encoder_widths non-empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = TrainConfig::default();
        let text = cfg.to_kv();
        assert!(text.contains("lambda2 = 0.18\n"));
        assert!(text.contains("tau = 0.002\n"));
        assert_eq!(TrainConfig::from_kv(&text).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let mut cfg = TrainConfig::default();
        for key in TrainConfig::KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn every_key_is_described() {
        for key in TrainConfig::KEYS {
            assert!(TrainConfig::describe(key).is_some(), "{key}");
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::from_kv("learning_rate = 0.3").unwrap_err().to_string();
        assert!(err.contains("learning_rate"));
        assert!(err.contains("base_lr"));
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = TrainConfig::from_kv("# run\nepochs = 3\n\ncentral_domain = 2\nencoder_widths = 8, 16\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.central_domain, Some(2));
        assert_eq!(cfg.encoder_widths, vec![8, 16]);
        assert!(TrainConfig::from_kv("epochs = 0").is_err());
        assert!(TrainConfig::from_kv("epochs 3").is_err());
    }
}
