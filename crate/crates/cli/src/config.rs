//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use setcomplete::data::{GenConfig, SplitRole};
use setcomplete::matching::MatchTrainConfig;
use setcomplete::model::Variant;
use setcomplete::retrieval::{AnnConfig, SearchMode};
use setcomplete::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitRole,
    pub k: usize,
    pub mode: SearchMode,
    pub negatives: usize,
    pub seed: u64,
    /// Caps the evaluated outfits.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitRole::Test,
            k: 32,
            mode: SearchMode::Exact,
            negatives: 7,
            seed: 0,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    #[serde(rename = "match")]
    pub matching: MatchTrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub index: AnnConfig,
    pub bench: crate::commands::BenchConfig,
}

/// Values given on the command line; each one replaces its config key.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.data.seed = seed;
            cfg.matching.seed = seed;
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
            cfg.index.seed = seed;
        }
        if let Some(v) = overrides.variant {
            cfg.train.variant = v;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nepochs = 3\nseed = 5\n[eval]\nk = 8\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.seed, cfg.eval.k), (3, 5, 8));
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let o = Overrides {
            seed: Some(9),
            variant: Some(Variant::Cx),
        };
        let cfg = RunConfig::load(Some(&p), &o).unwrap();
        assert_eq!(
            (cfg.train.seed, cfg.train.variant, cfg.train.epochs),
            (9, Variant::Cx, 3)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nepoch = 3\n").unwrap();
        assert!(RunConfig::load(Some(&p), &Overrides::default()).is_err());
    }

    #[test]
    fn guide_example_config_parses() {
        let chapter = include_str!("../../../book/src/cli.md");
        let body = chapter
            .split("```toml\n")
            .nth(1)
            .and_then(|rest| rest.split("```").next())
            .expect("toml block in the command-line chapter");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, body).unwrap();
        let cfg = RunConfig::load(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(cfg.train.variant, Variant::Cr);
        assert_eq!(cfg.index.probes, 8);
    }
}
