//! TOML run configuration for `criticvio train`.

use std::path::{Path, PathBuf};

use criticvio_core::data::list_sequences;
use criticvio_core::model::ModelConfig;
use criticvio_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "CRITICVIO_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding one subdirectory per sequence.
    pub root: PathBuf,
    /// Training sequence ids; empty means every sequence not in `eval`.
    #[serde(default)]
    pub train: Vec<String>,
    /// Held-out sequence ids used for the scheduler signal and final metrics.
    #[serde(default)]
    pub eval: Vec<String>,
    /// Stride between training windows.
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Refinement iterations; defaults to the variant preset.
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Monte-Carlo repeats for the final evaluation.
    #[serde(default = "ten")]
    pub eval_repeats: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides merged over the variant preset.
    #[serde(default)]
    pub model: Option<toml::Table>,
}

fn ten() -> usize {
    10
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::args(format!("{}: {e}", path.display())))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.train.seed = s
                .parse()
                .map_err(|_| CliError::args(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        cfg.train.validate().map_err(|e| CliError::args(e.to_string()))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut cfg = ModelConfig::for_variant(self.train.variant);
        if let Some(over) = &self.model {
            let mut base = toml::Table::try_from(&cfg).map_err(|e| CliError::args(e.to_string()))?;
            merge(&mut base, over);
            cfg = base
                .try_into()
                .map_err(|e| CliError::args(format!("[model]: {e}")))?;
        }
        if let Some(i) = self.iterations {
            cfg.transformer.iterations = i;
        }
        self.train.apply_to(&mut cfg);
        cfg.validate().map_err(|e| CliError::args(e.to_string()))?;
        Ok(cfg)
    }

    /// Resolves the train/eval split against what exists on disk.
    pub fn split(&self) -> Result<(Vec<String>, Vec<String>), CliError> {
        let root = &self.data.root;
        if !root.is_dir() {
            return Err(CliError::args(format!("data root {} is not a directory", root.display())));
        }
        let all = list_sequences(root).map_err(CliError::from)?;
        let train = if self.data.train.is_empty() {
            all.iter().filter(|s| !self.data.eval.contains(s)).cloned().collect()
        } else {
            self.data.train.clone()
        };
        for id in train.iter().chain(&self.data.eval) {
            if !all.contains(id) {
                return Err(CliError::args(format!("sequence {id} not found under {}", root.display())));
            }
        }
        if train.is_empty() {
            return Err(CliError::args("no training sequences".into()));
        }
        if let Some(id) = train.iter().find(|s| self.data.eval.contains(s)) {
            return Err(CliError::args(format!("sequence {id} is in both train and eval")));
        }
        if self.data.stride == 0 {
            return Err(CliError::args("data.stride must be >= 1".into()));
        }
        Ok((train, self.data.eval.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig, toml::de::Error> {
        toml::from_str(s)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("out_dir = \"o\"\n[data]\nroot = \"d\"\n").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data.stride, 1);
        assert_eq!(c.eval_repeats, 10);
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("out_dir = \"o\"\nbogus = 1\n[data]\nroot = \"d\"\n").is_err());
        assert!(parse("out_dir = \"o\"\n[data]\nroot = \"d\"\n[train]\nlr = 1.0\n").is_err());
        let c = parse("out_dir = \"o\"\n[data]\nroot = \"d\"\n[model.encoder]\nwidth = 3\n").unwrap();
        assert!(c.model_config().is_err());
    }

    #[test]
    fn shipped_desk_config_is_the_default_run() {
        let c = parse(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.data.eval, ["10", "11"]);
    }

    #[test]
    fn model_overrides_merge_over_preset() {
        let c = parse(
            "out_dir = \"o\"\niterations = 8\n[data]\nroot = \"d\"\n[train]\nvariant = \"s\"\ndropout = 0.2\n\
             [model.encoder]\nn_c = 128\n",
        )
        .unwrap();
        let m = c.model_config().unwrap();
        let preset = ModelConfig::for_variant(criticvio_core::model::Variant::S);
        assert_eq!(m.encoder.n_c, 128);
        assert_eq!(m.encoder.conv_channels, preset.encoder.conv_channels);
        assert_eq!(m.transformer.iterations, 8);
        assert_eq!(m.transformer.dropout, 0.2);
        assert_eq!(m.image, preset.image);
    }
}
