//! Flat `key = value` configuration files.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use apvit::data::SyntheticSpec;
use apvit::train::TrainConfig;
use apvit::{ApvitConfig, ApvitError, Result};

/// Every key understood by [`CliConfig::set`].
pub const KEYS: &[&str] = &[
    "stem_channels",
    "input_side",
    "input_channels",
    "linear_tap",
    "embed_dim",
    "blocks",
    "heads",
    "k",
    "r",
    "criterion",
    "atp_variant",
    "pooling",
    "head",
    "num_classes",
    "lanet_ratio",
    "base_lr",
    "momentum",
    "weight_decay",
    "clip_norm",
    "batch_size",
    "total_steps",
    "seed",
    "kr_schedule",
    "eval_every",
    "augment",
    "train_count",
    "test_count",
    "occluder_count",
    "occluder_min",
    "occluder_max",
    "noise_std",
    "data_seed",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    pub model: ApvitConfig,
    pub train: TrainConfig,
    /// Image side, channels and class count follow `model`.
    pub data: SyntheticSpec,
}

fn parse<V: FromStr>(value: &str) -> std::result::Result<V, String>
where
    V::Err: Display,
{
    value.parse::<V>().map_err(|e| format!("invalid value {value:?}: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("invalid value {value:?}: expected true or false")),
    }
}

impl CliConfig {
    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "stem_channels" => {
                let channels = value
                    .split(',')
                    .map(|c| parse::<usize>(c.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                m.stem.stages = channels.len();
                m.stem.channels = channels;
            }
            "input_side" => m.stem.input_side = parse(value)?,
            "input_channels" => m.stem.input_channels = parse(value)?,
            "linear_tap" => m.stem.linear_tap = parse_bool(value)?,
            "embed_dim" => m.embed_dim = parse(value)?,
            "blocks" => m.blocks = parse(value)?,
            "heads" => m.heads = parse(value)?,
            "k" => m.k = parse(value)?,
            "r" => m.r = parse(value)?,
            "criterion" => m.criterion = parse(value)?,
            "atp_variant" => m.atp_variant = parse(value)?,
            "pooling" => m.pooling = parse(value)?,
            "head" => m.head = parse(value)?,
            "num_classes" => m.num_classes = parse(value)?,
            "lanet_ratio" => m.lanet_ratio = parse(value)?,
            "base_lr" => t.base_lr = parse(value)?,
            "momentum" => t.momentum = parse(value)?,
            "weight_decay" => t.weight_decay = parse(value)?,
            "clip_norm" => t.clip_norm = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "total_steps" => t.total_steps = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "kr_schedule" => t.kr_schedule = parse(value)?,
            "eval_every" => t.eval_every = parse(value)?,
            "augment" => t.augment = parse_bool(value)?,
            "train_count" => d.train_count = parse(value)?,
            "test_count" => d.test_count = parse(value)?,
            "occluder_count" => d.occluder_count = parse(value)?,
            "occluder_min" => d.occluder_min = parse(value)?,
            "occluder_max" => d.occluder_max = parse(value)?,
            "noise_std" => d.noise_std = parse(value)?,
            "data_seed" => d.seed = parse(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Self> {
        self.data.side = self.model.stem.input_side;
        self.data.channels = self.model.stem.input_channels;
        self.data.num_classes = self.model.num_classes;
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(self)
    }
}

fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => Err(format!("expected key = value, got {line:?}")),
    })
}

/// Parses config text, then applies `overrides` (`key=value`) in order.
pub fn parse_config_str(text: &str, source: &str, overrides: &[String]) -> Result<CliConfig> {
    let mut cfg = CliConfig::default();
    for (i, line) in text.lines().enumerate() {
        if let Some(pair) = split_line(line) {
            pair.and_then(|(k, v)| cfg.set(k, v))
                .map_err(|e| ApvitError::Config(format!("{source} line {}: {e}", i + 1)))?;
        }
    }
    for (i, o) in overrides.iter().enumerate() {
        split_line(o)
            .unwrap_or_else(|| Err("empty override".into()))
            .and_then(|(k, v)| cfg.set(k, v))
            .map_err(|e| ApvitError::Config(format!("override {}: {e}", i + 1)))?;
    }
    cfg.finish()
}

/// Reads `path` (defaults only when `None`) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    match path {
        None => parse_config_str("", "defaults", overrides),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| ApvitError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_config_str(&text, &p.display().to_string(), overrides)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("stem_channels", "8,8"),
            ("linear_tap", "false"),
            ("criterion", "lanet"),
            ("atp_variant", "max"),
            ("pooling", "soft"),
            ("head", "gap"),
            ("kr_schedule", "linear_decay"),
            ("augment", "true"),
            ("r", "0.5"),
            ("noise_std", "1.5"),
            ("base_lr", "0.1"),
            ("momentum", "0.5"),
            ("weight_decay", "0.0"),
            ("clip_norm", "1.0"),
        ];
        for key in KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map_or("3", |(_, v)| *v);
            CliConfig::default()
                .set(key, value)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = parse_config_str("# header\n\nk = 32  # fewer\n", "t", &[]).unwrap();
        assert_eq!(cfg.model.k, 32);
    }

    #[test]
    fn missing_equals_names_line() {
        let err = parse_config_str("k = 3\nbogus\n", "t", &[]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
