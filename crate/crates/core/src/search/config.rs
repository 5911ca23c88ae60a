//! Search configuration: one TOML document with a version key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluate::{EvaluatorConfig, FitnessEvaluator, ToyTrainConfig};
use super::strategy::{Init, SearchSettings, Strategy};
use super::task::TaskId;
use crate::grammar::{build_grammar, Grammar, Variant};
use crate::sampling::SampleLimits;
use crate::seeds;
use crate::tree::ArchitectureTree;

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_WORKERS: &str = "EINSPACE_WORKERS";
pub const ENV_OUT_DIR: &str = "EINSPACE_OUT_DIR";

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("config_version {0} is not supported (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// `[evaluator]` table. The task comes from the top-level `task_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    pub kind: String,
    pub task_seed: u64,
    pub epochs: usize,
    pub train_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_macs: u64,
    pub max_activations: u64,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        let t = ToyTrainConfig::default();
        Self {
            kind: "toy-train".into(),
            task_seed: t.task_seed,
            epochs: t.epochs,
            train_samples: t.train_samples,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            max_macs: t.max_macs,
            max_activations: t.max_activations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub config_version: u32,
    pub strategy: Strategy,
    #[serde(default = "default_task")]
    pub task_id: TaskId,
    /// Defaults to the task's variant.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default = "default_stop")]
    pub stop_probability: f64,
    #[serde(default)]
    pub limits: SampleLimits,
    #[serde(default)]
    pub evaluator: EvaluatorSection,
    #[serde(default = "default_init")]
    pub init: Init,
    /// Seed-library names, or paths (relative to the config file) of tree JSON files.
    #[serde(default)]
    pub seeds: Vec<String>,
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_tournament")]
    pub tournament_size: usize,
    /// Evolution iterations, or the sample count of the random strategies.
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_one")]
    pub batch: usize,
    /// 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_task() -> TaskId {
    TaskId::ImPatterns
}
fn default_stop() -> f64 {
    0.32
}
fn default_init() -> Init {
    Init::Scratch
}
fn default_population() -> usize {
    100
}
fn default_tournament() -> usize {
    10
}
fn default_one() -> usize {
    1
}
fn default_checkpoint_every() -> u64 {
    10
}

/// Grammar, evaluator and run settings resolved from a config.
pub struct Resolved {
    pub grammar: Grammar,
    pub evaluator: FitnessEvaluator,
    pub settings: SearchSettings,
}

impl SearchConfig {
    pub fn parse(text: &str) -> Result<SearchConfig, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse { path: ".".into(), message: e.message().to_string() })?;
        let cfg: SearchConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(ConfigError::Version(cfg.config_version));
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SearchConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn check(&self) -> Result<(), ConfigError> {
        if !(self.stop_probability > 0.0 && self.stop_probability <= 1.0) {
            return Err(invalid("stop_probability", "must lie in (0, 1]"));
        }
        self.limits.check().map_err(|m| invalid("limits", m))?;
        if !["toy-train", "validity", "param-surrogate"].contains(&self.evaluator.kind.as_str()) {
            return Err(invalid("evaluator.kind", format!("unknown evaluator '{}'", self.evaluator.kind)));
        }
        if self.evaluator.kind == "toy-train" && (self.evaluator.epochs == 0 || self.evaluator.batch_size == 0 || self.evaluator.train_samples == 0) {
            return Err(invalid("evaluator", "epochs, train_samples and batch_size must be positive"));
        }
        if self.strategy == Strategy::RegularizedEvolution {
            if self.population_size == 0 {
                return Err(invalid("population_size", "must be positive"));
            }
            if self.tournament_size == 0 {
                return Err(invalid("tournament_size", "must be positive"));
            }
            if self.init != Init::Scratch && self.seeds.is_empty() {
                return Err(invalid("seeds", "seeded or mixed initialisation needs at least one seed"));
            }
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every", "must be positive"));
        }
        Ok(())
    }

    /// Applies `EINSPACE_WORKERS` and `EINSPACE_OUT_DIR` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(ENV_WORKERS) {
            self.workers = v.trim().parse().map_err(|_| invalid(ENV_WORKERS, format!("'{v}' is not a worker count")))?;
        }
        if let Ok(v) = std::env::var(ENV_OUT_DIR) {
            self.out_dir = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(self.task_id.variant())
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        let e = &self.evaluator;
        match e.kind.as_str() {
            "validity" => EvaluatorConfig::Validity,
            "param-surrogate" => EvaluatorConfig::ParamSurrogate,
            _ => EvaluatorConfig::ToyTrain(ToyTrainConfig {
                task: self.task_id,
                task_seed: e.task_seed,
                epochs: e.epochs,
                train_samples: e.train_samples,
                batch_size: e.batch_size,
                lr: e.lr,
                momentum: e.momentum,
                weight_decay: e.weight_decay,
                max_macs: e.max_macs,
                max_activations: e.max_activations,
            }),
        }
    }

    /// Hash of everything that affects results (worker count and output directory excluded).
    pub fn result_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.out_dir = None;
        hex::encode(Sha256::digest(serde_json::to_string(&c).expect("config serialises").as_bytes()))
    }

    /// Builds the grammar, evaluator and settings. Relative seed paths resolve against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<Resolved, ConfigError> {
        let grammar = build_grammar(self.variant(), self.stop_probability).map_err(|e| invalid("stop_probability", e.to_string()))?;
        let blueprint = self.task_id.blueprint();
        let mut trees = Vec::new();
        for (i, s) in self.seeds.iter().enumerate() {
            let key = format!("seeds[{i}]");
            let tree = match seeds::by_name(s) {
                Ok(d) => d.build(&blueprint).map_err(|e| invalid(&key, e.to_string()))?,
                Err(_) => {
                    let path = base_dir.join(s);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| invalid(&key, format!("'{s}' is neither a library seed nor a readable file: {e}")))?;
                    ArchitectureTree::from_json(&text).map_err(|e| invalid(&key, e.to_string()))?
                }
            };
            trees.push(tree);
        }
        let evaluator = FitnessEvaluator::new(self.evaluator_config(), grammar.clone(), self.limits.clone());
        let settings = SearchSettings {
            strategy: self.strategy,
            blueprint,
            iterations: self.iterations,
            population_size: self.population_size,
            tournament_size: self.tournament_size,
            init: self.init,
            seeds: trees,
            seed: self.seed,
            batch: self.batch,
            workers: self.workers,
        };
        Ok(Resolved { grammar, evaluator, settings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "config_version = 1\nstrategy = \"random-search\"\niterations = 5\n";

    #[test]
    fn defaults_fill_in() {
        let c = SearchConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.population_size, 100);
        assert_eq!(c.tournament_size, 10);
        assert_eq!(c.stop_probability, 0.32);
        assert_eq!(c.variant(), Variant::TwoD);
        assert_eq!(c.evaluator.epochs, 10);
        assert_eq!(SearchConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let e = SearchConfig::parse(&format!("{MINIMAL}[evaluator]\nepochs = \"ten\"\n")).unwrap_err();
        assert!(matches!(&e, ConfigError::Parse { path, .. } if path == "evaluator.epochs"), "{e}");
        let e = SearchConfig::parse(&format!("{MINIMAL}[limits]\nmax_nodez = 3\n")).unwrap_err();
        assert!(e.to_string().contains("limits"), "{e}");
        let e = SearchConfig::parse(&MINIMAL.replace("= 1", "= 2")).unwrap_err();
        assert_eq!(e, ConfigError::Version(2));
        let e = SearchConfig::parse(&format!("{MINIMAL}stop_probability = 0.0\n")).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "stop_probability"));
    }

    #[test]
    fn seeds_resolve_by_name() {
        let text = "config_version = 1\nstrategy = \"regularized-evolution\"\niterations = 1\ninit = \"seeded\"\nseeds = [\"conv-stem-block\"]\n";
        let r = SearchConfig::parse(text).unwrap().resolve(Path::new(".")).unwrap();
        assert_eq!(r.settings.seeds.len(), 1);
        let bad = text.replace("conv-stem-block", "no-such-seed");
        assert!(SearchConfig::parse(&bad).unwrap().resolve(Path::new(".")).is_err());
    }

    #[test]
    fn result_hash_ignores_workers() {
        let mut a = SearchConfig::parse(MINIMAL).unwrap();
        let h = a.result_hash();
        a.workers = 7;
        a.out_dir = Some("x".into());
        assert_eq!(a.result_hash(), h);
        a.seed = 1;
        assert_ne!(a.result_hash(), h);
    }
}
