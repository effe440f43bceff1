use std::path::Path;

use anyhow::Context;
use kvqa_core::pipeline::{EvalSettings, SynthConfig, TrainSettings};
use serde::Deserialize;

/// Contents of the optional `--config` TOML file. Command-line flags win.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub val_fraction: f64,
    /// Word-vector width used when no vector file is given.
    pub word_dim: usize,
    /// Fallback sentence-embedding width.
    pub embedding_dim: usize,
    pub synth: SynthConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: None,
            val_fraction: 0.0,
            word_dim: 8,
            embedding_dim: 256,
            synth: SynthConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_keep_defaults() {
        let cfg: FileConfig = toml::from_str(
            r#"
            seed = 4
            [train]
            selector = "sim,ep"
            epochs = 3
            lr = 0.2
            [eval]
            hops = 2
            reference_mode = "max"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.selector.to_string(), "sim,ep");
        assert_eq!(cfg.train.optimizer.epochs, 3);
        assert_eq!(cfg.train.optimizer.momentum, 0.9);
        assert_eq!(cfg.eval.hops, 2);
        assert_eq!(cfg.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sed = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[train]\nselector = \"xx\"").is_err());
    }
}
