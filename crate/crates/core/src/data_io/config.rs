//! Training configuration file (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::grpo::GrpoConfig;
use crate::lexicon::{load_lexicon, Lexicon};
use crate::policy::{SftConfig, ToyPolicy};
use crate::rewards::{EvidenceWeights, RewardWeights};

/// Shape and initialization of the toy policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub num_features: usize,
    pub max_len: usize,
    /// Half-width of the uniform noise on the initial parameters.
    pub init_scale: f64,
    /// Strength of the tag-template bias of the base policy; 0 disables it.
    pub template_prior: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { num_features: 2, max_len: 40, init_scale: 0.01, template_prior: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `None` selects the built-in lexicon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_path: Option<PathBuf>,
    /// Training datasets by name; all of them are concatenated for training.
    pub dataset_paths: BTreeMap<String, PathBuf>,
    #[serde(default = "default_sft_epochs")]
    pub sft_epochs: usize,
    #[serde(default = "default_sft_learning_rate")]
    pub sft_learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_batch_size: Option<usize>,
    #[serde(default = "default_grpo_steps")]
    pub grpo_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub reward_weights: RewardWeights,
    #[serde(default)]
    pub evidence_weights: EvidenceWeights,
    /// Directory relative paths are resolved against; the config file's directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_sft_epochs() -> usize {
    20
}
fn default_sft_learning_rate() -> f64 {
    1.0
}
fn default_grpo_steps() -> usize {
    500
}
fn default_batch_size() -> usize {
    16
}

impl TrainConfig {
    /// Parses without touching the filesystem; relative paths stay relative
    /// to `base_dir`.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.grpo.validate().map_err(|e| DataError::Config(e.to_string()))?;
        if cfg.grpo.seed != cfg.seed {
            // The run seed governs everything; the GRPO section inherits it.
            cfg.grpo.seed = cfg.seed;
        }
        if cfg.batch_size == 0 {
            return Err(DataError::Config("batch_size must be positive".into()));
        }
        if cfg.policy.num_features == 0 || cfg.policy.max_len == 0 {
            return Err(DataError::Config("policy.num_features and policy.max_len must be positive".into()));
        }
        if cfg.dataset_paths.is_empty() {
            return Err(DataError::Config("dataset_paths must name at least one dataset".into()));
        }
        Ok(cfg)
    }

    /// Loads the file and checks that every referenced input path exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let cfg = Self::parse(&text, base)?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<(), DataError> {
        let inputs = self.lexicon_path.iter().chain(self.dataset_paths.values());
        for p in inputs {
            let resolved = self.resolve(p);
            if !resolved.is_file() {
                return Err(DataError::Config(format!("referenced file {} does not exist", resolved.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn lexicon(&self) -> Result<Lexicon, DataError> {
        match &self.lexicon_path {
            None => Ok(Lexicon::default_lexicon()),
            Some(p) => load_lexicon(self.resolve(p)).map_err(DataError::from),
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            learning_rate: self.sft_learning_rate,
            seed: self.seed,
            batch_size: self.sft_batch_size,
        }
    }

    /// Base policy before any training; deterministic in the config seed.
    pub fn initial_policy(&self) -> ToyPolicy {
        let mut p = ToyPolicy::with_default_vocab(self.policy.num_features, self.policy.max_len);
        p.randomize(self.seed, self.policy.init_scale);
        p.apply_template_prior(self.policy.template_prior);
        p
    }

    pub fn to_toml(&self) -> Result<String, DataError> {
        toml::to_string_pretty(self).map_err(|e| DataError::Config(e.to_string()))
    }

    /// Copy with every path made absolute, suitable for a run snapshot that
    /// must be reloadable from anywhere.
    pub fn absolutized(&self) -> Self {
        let abs = |p: &Path| std::path::absolute(self.resolve(p)).unwrap_or_else(|_| self.resolve(p));
        let mut c = self.clone();
        c.output_dir = abs(&self.output_dir);
        c.lexicon_path = self.lexicon_path.as_deref().map(abs);
        c.dataset_paths = self.dataset_paths.iter().map(|(k, v)| (k.clone(), abs(v))).collect();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
output_dir = "runs/x"
[dataset_paths]
synthetic = "train.jsonl"
"#;

    #[test]
    fn defaults_mirror_reference_hyperparameters() {
        let c = TrainConfig::parse(MINIMAL, "/tmp").unwrap();
        assert_eq!(c.reward_weights, RewardWeights { outcome: 5.0, format: 0.15, evidence: 0.07, consistency: 0.02 });
        assert_eq!(c.evidence_weights, EvidenceWeights { a: 0.3, b: 0.3, c: 0.35, d: 0.15, e: 0.3 });
        assert_eq!((c.grpo.group_size, c.grpo.kl_coefficient, c.grpo.epsilon), (8, 0.03, 1e-6));
        assert_eq!(c.grpo.seed, 7);
        assert_eq!(c.output_dir(), PathBuf::from("/tmp/runs/x"));
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let c = TrainConfig::parse(MINIMAL, "/tmp").unwrap();
        let again = TrainConfig::parse(&c.to_toml().unwrap(), "/tmp").unwrap();
        assert_eq!(c, again);

        let custom =
            format!("{MINIMAL}\n[reward_weights]\noutcome = 1.0\nformat = 0.5\nevidence = 0.0\nconsistency = 0.25\n");
        let c = TrainConfig::parse(&custom, "/tmp").unwrap();
        assert_eq!(c.reward_weights.format, 0.5);
        assert_eq!(TrainConfig::parse(&c.to_toml().unwrap(), "/tmp").unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig::parse(&format!("{MINIMAL}\nbogus = 1"), "/").is_err());
        assert!(TrainConfig::parse("seed = 1\noutput_dir = \"o\"\n[dataset_paths]\n", "/").is_err());
        let bad_group = format!("{MINIMAL}\n[grpo]\ngroup_size = 1\n");
        assert!(TrainConfig::parse(&bad_group, "/").is_err());
        assert!(TrainConfig::parse(&format!("batch_size = 0\n{MINIMAL}"), "/").is_err());
    }

    #[test]
    fn load_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.toml");
        std::fs::write(&cfg_path, MINIMAL).unwrap();
        assert!(matches!(TrainConfig::load(&cfg_path), Err(DataError::Config(m)) if m.contains("train.jsonl")));
        std::fs::write(dir.path().join("train.jsonl"), "").unwrap();
        let c = TrainConfig::load(&cfg_path).unwrap();
        let snap = c.absolutized();
        assert!(snap.dataset_paths["synthetic"].is_absolute());
        snap.check_paths().unwrap();
    }
}
