//! Experiment configuration: one TOML file describes the whole pipeline —
//! paths, model size, per-phase training settings, entropy-minimization
//! settings, the synthetic continuum, the evaluation grid, and the seeds.
//! Unknown keys are rejected everywhere so typos fail loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::ensemble::EmeaConfig;
use crate::error::{Error, Result};
use crate::eval::GridOptions;
use crate::model::ModelConfig;
use crate::train::{OptimKind, TrainConfig};

/// Where artifacts live. Relative paths are joined onto `workdir`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    pub corpora: PathBuf,
    pub checkpoints: PathBuf,
    pub results: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workdir: PathBuf::from("work"),
            corpora: PathBuf::from("corpora"),
            checkpoints: PathBuf::from("checkpoints"),
            results: PathBuf::from("results.jsonl"),
        }
    }
}

impl PathsConfig {
    fn anchor(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn corpora_dir(&self) -> PathBuf {
        self.anchor(&self.corpora)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.anchor(&self.checkpoints)
    }

    pub fn results_file(&self) -> PathBuf {
        self.anchor(&self.results)
    }
}

/// One variety of the continuum at a given divergence from the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarietyConfig {
    pub name: String,
    pub divergence: f32,
}

/// The synthetic dialect continuum: a source variety, related varieties
/// with their own adapters, and unseen target varieties for testing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuumConfig {
    pub root_seed: u64,
    pub vocab_size: usize,
    pub source: VarietyConfig,
    pub related: Vec<VarietyConfig>,
    pub targets: Vec<VarietyConfig>,
    /// Unlabeled sentences generated per variety for adapter training.
    pub unlabeled_sentences: usize,
    /// Labeled source sentences for task training.
    pub labeled_sentences: usize,
}

impl Default for ContinuumConfig {
    fn default() -> Self {
        ContinuumConfig {
            root_seed: 17,
            vocab_size: 600,
            source: VarietyConfig {
                name: "src".to_string(),
                divergence: 0.0,
            },
            related: vec![
                VarietyConfig {
                    name: "rel-a".to_string(),
                    divergence: 0.15,
                },
                VarietyConfig {
                    name: "rel-b".to_string(),
                    divergence: 0.3,
                },
            ],
            targets: vec![
                VarietyConfig {
                    name: "tgt-near".to_string(),
                    divergence: 0.2,
                },
                VarietyConfig {
                    name: "tgt-mid".to_string(),
                    divergence: 0.4,
                },
                VarietyConfig {
                    name: "tgt-far".to_string(),
                    divergence: 0.6,
                },
            ],
            unlabeled_sentences: 600,
            labeled_sentences: 300,
        }
    }
}

/// Training settings for each pipeline phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfigs {
    pub pretrain: TrainConfig,
    pub lm_adapter: TrainConfig,
    pub task_adapter: TrainConfig,
    pub fusion: TrainConfig,
}

fn phase(epochs: usize, lr: f32, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr,
        seed,
        mask_rate: 0.15,
        optimizer: OptimKind::default(),
    }
}

impl Default for PhaseConfigs {
    fn default() -> Self {
        PhaseConfigs {
            pretrain: phase(20, 1e-3, 100),
            lm_adapter: phase(20, 1e-3, 200),
            // Span tagging default; token tagging conventionally halves this.
            task_adapter: phase(100, 1e-4, 300),
            fusion: phase(10, 5e-5, 400),
        }
    }
}

/// The whole experiment in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: PhaseConfigs,
    pub emea: EmeaConfig,
    pub eval: GridOptions,
    pub continuum: ContinuumConfig,
    /// Evaluation seeds; each samples its own test sets.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskKind::Span,
            paths: PathsConfig::default(),
            model: ModelConfig {
                vocab_size: 0, // filled from the built tokenizer
                d_model: 24,
                n_layers: 2,
                n_heads: 2,
                d_ff: 48,
                d_adapter: 8,
                max_len: 128,
                n_tags: TaskKind::Span.tag_names().len(),
            },
            train: PhaseConfigs::default(),
            emea: EmeaConfig::default(),
            eval: GridOptions::default(),
            continuum: ContinuumConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config '{}': {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        // Model vocab is derived from the corpus at pretrain time, so a
        // placeholder zero is allowed here; everything else must be sound.
        if self.model.vocab_size != 0 {
            self.model.validate()?;
        } else {
            let mut m = self.model;
            m.vocab_size = 4;
            m.validate()?;
        }
        self.train.pretrain.validate()?;
        self.train.lm_adapter.validate()?;
        self.train.task_adapter.validate()?;
        self.train.fusion.validate()?;
        self.emea.validate()?;
        self.eval.budget_train.validate()?;
        if self.eval.n_test == 0 || self.eval.n_dev == 0 {
            return Err(Error::Config(
                "eval.n_test and eval.n_dev must be at least 1".to_string(),
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".to_string()));
        }
        if self.model.n_tags != self.task.tag_names().len() {
            return Err(Error::Config(format!(
                "model.n_tags = {} but the task defines {} tags",
                self.model.n_tags,
                self.task.tag_names().len()
            )));
        }

        let c = &self.continuum;
        if c.vocab_size < 20 {
            return Err(Error::Config(
                "continuum.vocab_size must be at least 20".to_string(),
            ));
        }
        if c.targets.is_empty() {
            return Err(Error::Config("continuum.targets is empty".to_string()));
        }
        if c.unlabeled_sentences == 0 || c.labeled_sentences == 0 {
            return Err(Error::Config(
                "continuum sentence counts must be at least 1".to_string(),
            ));
        }
        let mut names = vec![c.source.name.clone()];
        names.extend(c.related.iter().map(|v| v.name.clone()));
        names.extend(c.targets.iter().map(|v| v.name.clone()));
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("variety names must be non-empty".to_string()));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate variety name '{n}'")));
            }
        }
        for v in std::iter::once(&c.source).chain(&c.related).chain(&c.targets) {
            if !(0.0..=1.0).contains(&v.divergence) {
                return Err(Error::Config(format!(
                    "divergence {} of variety '{}' outside [0, 1]",
                    v.divergence, v.name
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash over the canonical serialized form, for
    /// provenance headers. Identical configs hash identically.
    pub fn content_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canon.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top = "bogus_key = 1\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(top),
            Err(Error::Config(_))
        ));
        let nested = "[model]\nd_model = 16\nbogus = true\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(nested),
            Err(Error::Config(_))
        ));
        let phase = "[train.pretrain]\nepochs = 1\nnot_a_knob = 2\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(phase),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_toml_inherits_defaults() {
        let text = "seeds = [7]\n[continuum]\nvocab_size = 100\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.continuum.vocab_size, 100);
        assert_eq!(cfg.model.d_model, ExperimentConfig::default().model.d_model);
        // Phase learning rates keep their documented defaults.
        assert!((cfg.train.task_adapter.lr - 1e-4).abs() < 1e-12);
        assert!((cfg.train.fusion.lr - 5e-5).abs() < 1e-12);
        assert_eq!(cfg.train.task_adapter.epochs, 100);
        assert!((cfg.emea.gamma - 10.0).abs() < 1e-12);
        assert!((cfg.eval.cl_lr - 2e-5).abs() < 1e-12);
        assert_eq!(cfg.eval.cl_steps, 1);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.continuum.targets[0].divergence = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = ExperimentConfig::default();
        cfg.continuum.related[0].name = "src".to_string();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let mut cfg = ExperimentConfig::default();
        cfg.model.n_tags = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn content_hash_tracks_config_changes() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seeds.push(99);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 16);
    }

    #[test]
    fn paths_anchor_relative_to_workdir() {
        let mut p = PathsConfig::default();
        p.workdir = PathBuf::from("/tmp/exp");
        assert_eq!(p.results_file(), PathBuf::from("/tmp/exp/results.jsonl"));
        p.results = PathBuf::from("/abs/results.jsonl");
        assert_eq!(p.results_file(), PathBuf::from("/abs/results.jsonl"));
    }
}
