use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ParamStore, TqNet};
use crate::corpus::TokenVocab;
use crate::error::{Result, TqError};

const PARAMS_FILE: &str = "params.safetensors";
const MANIFEST_FILE: &str = "manifest.json";
const VOCAB_FILE: &str = "vocab.json";
const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub id: String,
    pub model: ModelConfig,
    /// Training stages applied so far, oldest first (e.g. `["mlm", "cl-uni"]`).
    pub stages: Vec<String>,
    pub vocab_hash: String,
    pub seed: u64,
    /// Strategy / scope / fusion / method tags.
    pub tags: BTreeMap<String, String>,
    pub parent: Option<String>,
}

impl CheckpointManifest {
    pub fn stage(&self) -> &str {
        self.stages.last().map(String::as_str).unwrap_or("init")
    }
}

/// Named parameter arrays plus manifest, vocabulary and loss curve.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub vocab: TokenVocab,
    pub tensors: HashMap<String, Tensor>,
    pub loss_curve: Vec<(usize, f64)>,
}

impl Checkpoint {
    pub fn from_model(model: &TqNet, vocab: &TokenVocab, manifest: CheckpointManifest) -> Result<Self> {
        Ok(Self {
            manifest,
            vocab: vocab.clone(),
            tensors: model.params().to_tensors()?,
            loss_curve: Vec::new(),
        })
    }

    /// Adds an auxiliary parameter store under `prefix.`.
    pub fn with_extra(mut self, prefix: &str, store: &ParamStore) -> Result<Self> {
        for (name, t) in store.to_tensors()? {
            self.tensors.insert(format!("{prefix}.{name}"), t);
        }
        Ok(self)
    }

    /// Tensors stored under `prefix.`, with the prefix removed.
    pub fn extra(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn has_extra(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Instantiates the encoder and loads every parameter.
    pub fn build_model(&self, dtype: DType) -> Result<TqNet> {
        let model = TqNet::new(&self.manifest.model, 0, dtype)?;
        model.params().load_from(&self.tensors, |_| true)?;
        Ok(model)
    }

    /// Hex SHA-256 over parameter names and raw bytes, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            let t = self.tensors[name].flatten_all()?.to_dtype(DType::F64)?;
            h.update(name.as_bytes());
            for v in t.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        candle_core::safetensors::save(&self.tensors, dir.join(PARAMS_FILE))?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        fs::write(dir.join(VOCAB_FILE), serde_json::to_string(&self.vocab)?)?;
        let mut csv = String::from("step,loss\n");
        for (step, loss) in &self.loss_curve {
            writeln!(csv, "{step},{loss}").unwrap();
        }
        fs::write(dir.join(LOSS_FILE), csv)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| TqError::format(&manifest_path, e.to_string()))?;
        let manifest = serde_json::from_str(&text).map_err(|e| TqError::format(&manifest_path, e.to_string()))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let text = fs::read_to_string(&vocab_path).map_err(|e| TqError::format(&vocab_path, e.to_string()))?;
        let vocab = serde_json::from_str(&text).map_err(|e| TqError::format(&vocab_path, e.to_string()))?;
        let tensors = candle_core::safetensors::load(dir.join(PARAMS_FILE), &Device::Cpu)?;
        let mut loss_curve = Vec::new();
        if let Ok(csv) = fs::read_to_string(dir.join(LOSS_FILE)) {
            for line in csv.lines().skip(1) {
                let mut parts = line.split(',');
                if let (Some(s), Some(l)) = (parts.next(), parts.next()) {
                    if let (Ok(s), Ok(l)) = (s.parse(), l.parse()) {
                        loss_curve.push((s, l));
                    }
                }
            }
        }
        Ok(Self {
            manifest,
            vocab,
            tensors,
            loss_curve,
        })
    }
}
