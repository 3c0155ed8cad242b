//! Experiment configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::corpus::GeneratorConfig;
use crate::error::{Result, TqError};
use crate::evaluate::EvalConfig;
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;

/// Generator settings plus `min_freq`, written as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub struct CorpusSection {
    pub generator: GeneratorConfig,
    /// Tokens seen fewer times than this map to `[UNK]`.
    pub min_freq: usize,
}

impl TryFrom<serde_json::Value> for CorpusSection {
    type Error = String;

    fn try_from(v: serde_json::Value) -> std::result::Result<Self, String> {
        let serde_json::Value::Object(mut map) = v else {
            return Err("corpus section must be an object".to_string());
        };
        let min_freq = match map.remove("min_freq") {
            None => 1,
            Some(m) => m.as_u64().ok_or("min_freq must be a non-negative integer")? as usize,
        };
        let generator = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| e.to_string())?;
        Ok(Self { generator, min_freq })
    }
}

impl From<CorpusSection> for serde_json::Value {
    fn from(c: CorpusSection) -> Self {
        let mut v = serde_json::to_value(&c.generator).expect("generator config serialises");
        v["min_freq"] = c.min_freq.into();
        v
    }
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TqError::format(path, e.to_string()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| TqError::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates every section. Model sizes that come from the corpus
    /// (vocabulary, sequence length) may still be zero here.
    pub fn validate(&self) -> Result<()> {
        self.corpus.generator.validate()?;
        self.augment.validate()?;
        self.model.resolved(16, 16).validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.eval.validate()
    }

    /// Copy with the global seed pushed into every section that has one.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.corpus.generator.seed = c.seed;
        c.pretrain.seed = c.seed;
        c.finetune.seed = c.seed;
        c.eval.probe.seed = c.seed;
        c
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"pretrain": {"tua": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"corpus": {"n_questions": 10, "bogus": 1}}"#).is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 3, "corpus": {"n_questions": 500, "min_freq": 2}}"#).unwrap();
        assert_eq!(cfg.corpus.generator.n_questions, 500);
        assert_eq!(cfg.corpus.min_freq, 2);
        assert_eq!(cfg.corpus.generator.n_kp, GeneratorConfig::default().n_kp);
        let seeded = cfg.seeded();
        assert_eq!((seeded.pretrain.seed, seeded.finetune.seed), (3, 3));
        assert_ne!(cfg.hash(), seeded.hash());
    }

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }
}
