//! Human-readable `key = value` configuration blocks.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. The same format is embedded in checkpoint headers and accepted by
//! the command line `--config` option.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::StereoRig;
use crate::model::ModelConfig;
use crate::nn::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value for `{key}`: {value:?}")]
    Value { key: String, value: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values from `other` win.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let lead = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> KeyValues {
        KeyValues {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn parse_value<V: FromStr>(&self, key: &str) -> Result<Option<V>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| ConfigError::Value {
                key: key.to_string(),
                value: raw.to_string(),
            }),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }
}

macro_rules! assign {
    ($kv:expr, $target:expr, $($field:ident),+ $(,)?) => {
        $(
            if let Some(v) = $kv.parse_value(stringify!($field))? {
                $target.$field = v;
            }
        )+
    };
}

pub const MODEL_KEYS: &[&str] = &[
    "channel_multiplier",
    "use_mask_channel",
    "use_residual",
    "attach_bdm",
    "input_size",
    "zero_init_head",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "lr0",
    "lr_decay_factor",
    "lr_decay_every",
    "momentum",
    "weight_decay",
    "max_iters",
    "seed",
    "multi_scale",
    "checkpoint_every",
];

pub const RIG_KEYS: &[&str] = &["f", "b", "lambda", "w", "h"];

impl ModelConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("channel_multiplier", self.channel_multiplier);
        kv.set("use_mask_channel", self.use_mask_channel);
        kv.set("use_residual", self.use_residual);
        kv.set("attach_bdm", self.attach_bdm);
        kv.set("input_size", self.input_size);
        kv.set("zero_init_head", self.zero_init_head);
        kv
    }

    /// Overlays the keys present in `kv` onto `self`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.reject_unknown(MODEL_KEYS)?;
        assign!(
            kv,
            self,
            channel_multiplier,
            use_mask_channel,
            use_residual,
            attach_bdm,
            input_size,
            zero_init_head
        );
        self.channels().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("batch_size", self.batch_size);
        kv.set("lr0", self.lr0);
        kv.set("lr_decay_factor", self.lr_decay_factor);
        kv.set("lr_decay_every", self.lr_decay_every);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("max_iters", self.max_iters);
        kv.set("seed", self.seed);
        kv.set("multi_scale", self.multi_scale);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.reject_unknown(TRAIN_KEYS)?;
        assign!(
            kv,
            self,
            batch_size,
            lr0,
            lr_decay_factor,
            lr_decay_every,
            momentum,
            weight_decay,
            max_iters,
            seed,
            multi_scale,
            checkpoint_every
        );
        self.validate().map_err(ConfigError::Invalid)
    }
}

impl StereoRig {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("f", self.f);
        kv.set("b", self.b);
        kv.set("lambda", self.lambda);
        kv.set("w", self.w);
        kv.set("h", self.h);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.reject_unknown(RIG_KEYS)?;
        assign!(kv, self, f, b, lambda, w, h);
        self.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let kv = KeyValues::parse("# comment\n\nmodel.input_size = 48\n train.lr0=0.01 \n").unwrap();
        assert_eq!(kv.get("model.input_size"), Some("48"));
        assert_eq!(kv.section("train").get("lr0"), Some("0.01"));
        let again = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(again, kv);
        assert!(matches!(KeyValues::parse("oops"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(KeyValues::parse(" = 3").is_err());
    }

    #[test]
    fn overrides_apply_over_defaults() {
        let mut cfg = TrainConfig::desk();
        cfg.apply_kv(&KeyValues::parse("lr0 = 0.02\nmulti_scale = false").unwrap())
            .unwrap();
        assert_eq!(cfg.lr0, 0.02);
        assert!(!cfg.multi_scale);
        assert_eq!(cfg.batch_size, 32);
        assert!(cfg.apply_kv(&KeyValues::parse("momentum = 1.5").unwrap()).is_err());
        assert!(matches!(
            cfg.apply_kv(&KeyValues::parse("bogus = 1").unwrap()),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(cfg.apply_kv(&KeyValues::parse("lr0 = fast").unwrap()).is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.use_residual = false;
        let mut back = ModelConfig::default();
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(back
            .apply_kv(&KeyValues::parse("channel_multiplier = 0.3").unwrap())
            .is_err());
    }
}
