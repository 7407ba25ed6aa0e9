//! Flat `key = value` run configuration shared by every CLI subcommand.
//!
//! One file describes a whole run: model shape, training hyperparameters,
//! and dataset generator settings, all in a single flat namespace so that
//! `--set key=value` overrides compose trivially. Lines are UTF-8, `#`
//! starts a comment, blank lines are skipped, and the last assignment of a
//! key wins. Unknown keys are hard errors — a typo must not silently train
//! the wrong model.

use crate::data::SynthDatasetSpec;
use crate::model::{ImportanceKind, ModelConfig, ReductionOrder};
use crate::reduction::MergeWeighting;
use crate::train::TrainConfig;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {0}: expected `key = value`")]
    MissingEquals(usize),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a run needs. `image_size` and `classes` are shared between
/// the model and the generator, so the corresponding keys set both.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthDatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: SynthDatasetSpec::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            // Shared between model and dataset generator.
            "image_size" => {
                let v = parse_num(key, value)?;
                self.model.image_size = v;
                self.data.image_size = v;
            }
            "classes" => {
                let v = parse_num(key, value)?;
                self.model.classes = v;
                self.data.classes = v;
            }
            // Model shape.
            "patch_size" => self.model.patch_size = parse_num(key, value)?,
            "channels" => self.model.channels = parse_num(key, value)?,
            "embed_dim" => self.model.embed_dim = parse_num(key, value)?,
            "heads" => self.model.heads = parse_num(key, value)?,
            "blocks" => self.model.blocks = parse_num(key, value)?,
            "mlp_ratio" => self.model.mlp_ratio = parse_num(key, value)?,
            "reduction_order" => {
                self.model.reduction_order = parse_num::<ReductionOrder>(key, value)?
            }
            "importance_score" => {
                self.model.importance_score = parse_num::<ImportanceKind>(key, value)?
            }
            "topk_k" => self.model.topk_k = parse_num(key, value)?,
            "merge_weighting" => {
                self.model.merge_weighting = parse_num::<MergeWeighting>(key, value)?
            }
            // Training.
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "lr_backbone" => self.train.lr_backbone = parse_num(key, value)?,
            "lr_merge" => self.train.lr_merge = parse_num(key, value)?,
            "lr_prune" => self.train.lr_prune = parse_num(key, value)?,
            "lambda" => self.train.lambda = parse_num(key, value)?,
            "r_target" => self.train.r_target = parse_num(key, value)?,
            "seed" => self.train.seed = parse_num(key, value)?,
            // Dataset generator.
            "samples" => self.data.samples = parse_num(key, value)?,
            "noise" => self.data.noise = parse_num(key, value)?,
            "data_seed" => self.data.seed = parse_num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Cross-field checks, run once after every file line and override has
    /// been applied.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Parses a config file body on top of the defaults.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::MissingEquals(lineno + 1))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    parse(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
        assert_eq!(parse("\n# only a comment\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn assignments_land_in_the_right_fields() {
        let cfg = parse(
            "embed_dim = 32\n\
             heads=2  # trailing comment\n\
             reduction_order = ltpm\n\
             importance_score = class_attention\n\
             merge_weighting = pairwise\n\
             lr_merge = 1e-2\n\
             r_target = 0.5\n\
             samples = 64\n\
             noise = 0.05\n\
             data_seed = 99\n",
        )
        .unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.model.reduction_order, ReductionOrder::Ltpm);
        assert_eq!(cfg.model.importance_score, ImportanceKind::ClassAttention);
        assert_eq!(cfg.model.merge_weighting, MergeWeighting::Pairwise);
        assert_eq!(cfg.train.lr_merge, 1e-2);
        assert_eq!(cfg.train.r_target, 0.5);
        assert_eq!(cfg.data.samples, 64);
        assert_eq!(cfg.data.noise, 0.05);
        assert_eq!(cfg.data.seed, 99);
    }

    #[test]
    fn shared_keys_fan_out() {
        let cfg = parse("image_size = 64\nclasses = 6\n").unwrap();
        assert_eq!(cfg.model.image_size, 64);
        assert_eq!(cfg.data.image_size, 64);
        assert_eq!(cfg.model.classes, 6);
        assert_eq!(cfg.data.classes, 6);
    }

    #[test]
    fn last_assignment_wins() {
        let cfg = parse("seed = 1\nseed = 2\n").unwrap();
        assert_eq!(cfg.train.seed, 2);
    }

    #[test]
    fn unknown_key_is_an_error() {
        match parse("lr = 0.1") {
            Err(ConfigError::UnknownKey(k)) => assert_eq!(k, "lr"),
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn bad_values_and_missing_equals_are_reported() {
        assert!(matches!(
            parse("embed_dim = wide"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            parse("reduction_order = fastest"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            parse("embed_dim 64"),
            Err(ConfigError::MissingEquals(1))
        ));
    }

    #[test]
    fn validate_catches_cross_field_problems() {
        let mut cfg = RunConfig::default();
        cfg.apply("embed_dim", "65").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let ok = RunConfig::default();
        assert!(ok.validate().is_ok());
    }
}
