//! Run-level configuration: one JSON document holding every setting of an
//! experiment, with defaults for anything omitted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, InteractionGraph, SplitDataset, SplitRatios, DEFAULT_NEIGHBOR_CAP};
use crate::error::{ConfigIssue, Error, Result};
use crate::eval::DEFAULT_KS;
use crate::synthgen::SynthConfig;
use crate::trainer::{GridSpace, TrainConfig};

/// How a dump is turned into a train/validation/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Ratings strictly above this count as positive when ingesting raw logs.
    pub rating_threshold: f64,
    pub k_core: usize,
    pub split: SplitRatios,
    /// Extend each adjacency list with co-interaction neighbors derived from
    /// training interactions.
    pub co_interaction_neighbors: bool,
    pub neighbor_cap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rating_threshold: 3.0,
            k_core: 10,
            split: SplitRatios::default(),
            co_interaction_neighbors: false,
            neighbor_cap: DEFAULT_NEIGHBOR_CAP,
        }
    }
}

impl DataConfig {
    pub fn issues(&self, prefix: &str) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(ConfigIssue {
                path: format!("{prefix}{field}"),
                message,
            })
        };
        if !self.rating_threshold.is_finite() {
            push("rating_threshold", "must be finite".into());
        }
        if self.k_core == 0 {
            push("k_core", "must be at least 1".into());
        }
        if let Err(Error::Config(issues)) = self.split.validate() {
            for i in issues {
                push("split", i.message);
            }
        }
        if self.co_interaction_neighbors && self.neighbor_cap == 0 {
            push("neighbor_cap", "must be positive".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec() }
    }
}

/// Values swept by default for each axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub embedding_size: Vec<f64>,
    pub dropout: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            embedding_size: vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0],
            dropout: (0..=8).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into `synth.seed` and `train.seed` on resolution.
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub grid: GridSpace,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.synth.issues("synth.");
        out.extend(self.data.issues("data."));
        out.extend(self.train.issues("train."));
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            out.push(ConfigIssue {
                path: "eval.ks".into(),
                message: "need at least one K, each >= 1".into(),
            });
        }
        out
    }

    /// Propagates the master seed into the sub-configurations.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }
}

/// Parses and checks a config document. Whitespace-only input yields the
/// defaults. Every violated constraint is reported, each with its field path.
pub fn validate_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = if text.trim().is_empty() {
        RunConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| {
            Error::config(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?
    };
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg.resolve())
    } else {
        Err(Error::Config(issues))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    validate_config(&text)
}

/// Filters a graph to its k-core, splits it per user and optionally adds
/// co-interaction neighbors computed from the training pairs alone.
pub fn prepare_split(graph: &InteractionGraph, data: &DataConfig, seed: u64) -> Result<SplitDataset> {
    let filtered = dataset::k_core_filter(graph, data.k_core)?;
    if filtered.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions survive {}-core filtering",
            data.k_core
        )));
    }
    let mut split = dataset::split(&filtered, data.split, seed)?;
    if data.co_interaction_neighbors {
        let keep_u = vec![true; filtered.n_users()];
        let keep_i = vec![true; filtered.n_items()];
        let train_only = filtered.restrict(&keep_u, &keep_i, &split.train)?;
        let derived = dataset::derive_co_interaction_neighbors(&train_only, data.neighbor_cap)?;
        split.graph = split.graph.with_adjacency(
            derived.user_causal_adj().to_vec(),
            derived.item_causal_adj().to_vec(),
        )?;
    }
    Ok(split)
}

/// Loads a canonical dump and prepares its split.
pub fn load_split(dir: &Path, data: &DataConfig, seed: u64) -> Result<SplitDataset> {
    let (graph, _) = dataset::load_dump(dir)?;
    prepare_split(&graph, data, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = validate_config("  \n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.eval.ks, [10, 20]);
    }

    #[test]
    fn omitted_patience_defaults() {
        let cfg = validate_config(r#"{"train": {"learning_rate": 0.005}}"#).unwrap();
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.train.learning_rate, 0.005);
    }

    #[test]
    fn every_issue_is_reported() {
        let err = validate_config(
            r#"{"train": {"lambda": 1.5, "dropout": -0.1}, "data": {"k_core": 0}, "eval": {"ks": []}}"#,
        )
        .unwrap_err();
        let Error::Config(issues) = err else { panic!("wrong error kind") };
        let paths: Vec<&str> = issues.iter().map(|i| i.path.as_str()).collect();
        assert_eq!(paths, ["data.k_core", "train.dropout", "train.lambda", "eval.ks"]);
        let lambda = &issues[2];
        assert!(lambda.message.contains("[0, 1]"), "{lambda}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(validate_config(r#"{"trian": {}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn seed_propagates_and_round_trips() {
        let cfg = validate_config(r#"{"seed": 9}"#).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        let again = validate_config(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }
}
