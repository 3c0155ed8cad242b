//! Unsupervised pretraining: masked-token prediction, then momentum
//! contrastive learning over augmented views of whole questions.

mod cl;
mod loss;
mod mlm;
mod momentum;
mod queue;

use std::collections::BTreeMap;

use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::corpus::{EncodedCorpus, EncodedQuestion, TokenVocab};
use crate::error::{bail_arg, Result};
use crate::model::{Checkpoint, CheckpointManifest, ModelConfig, TqNet};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub use cl::{shuffle_keys, shuffled_key_forward, ClPath, ClSettings, ClStepOutcome, ClTrainer};
pub use loss::{info_nce, info_nce_batch, info_nce_rows};
pub use mlm::{mask_tokens, mlm_loss, mlm_step, MaskedBatch};
pub use momentum::{momentum_update, MomentumState};
pub use queue::{NegativeQueue, UNIT_NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mlm,
    Cl,
    Mcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Uni,
    Seq,
    Cross,
}

impl Scope {
    pub fn stage(&self) -> &'static str {
        match self {
            Scope::Uni => "cl-uni",
            Scope::Seq => "cl-seq",
            Scope::Cross => "cl-cross",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Mlm => "mlm",
            Strategy::Cl => "cl",
            Strategy::Mcl => "mcl",
        })
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Uni => "uni",
            Scope::Seq => "seq",
            Scope::Cross => "cross",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub strategy: Strategy,
    pub scope: Scope,
    pub tau: f64,
    pub m: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    /// Contrastive steps (per stream for SEQ).
    pub steps: usize,
    /// Contrastive learning rate.
    pub lr: f64,
    pub seed: u64,
    pub n_virtual_devices: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub mlm_steps: usize,
    pub mlm_lr: f64,
    pub mlm_optimizer: OptimizerKind,
    pub mlm_weight_decay: f64,
    pub mask_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Mcl,
            scope: Scope::Uni,
            tau: 0.2,
            m: 0.999,
            queue_size: 4096,
            batch_size: 32,
            steps: 1000,
            lr: 0.03 * 32.0 / 256.0,
            seed: 0,
            n_virtual_devices: 4,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            mlm_steps: 1000,
            mlm_lr: 1e-3,
            mlm_optimizer: OptimizerKind::Adamw,
            mlm_weight_decay: 0.01,
            mask_prob: 0.15,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bail_arg!("tau must be positive, got {}", self.tau);
        }
        if !(0.0..=1.0).contains(&self.m) {
            bail_arg!("m must lie in [0, 1], got {}", self.m);
        }
        if self.batch_size == 0 {
            bail_arg!("batch_size must be at least 1");
        }
        if self.queue_size < self.batch_size {
            bail_arg!("queue_size {} is smaller than batch_size {}", self.queue_size, self.batch_size);
        }
        if self.n_virtual_devices == 0 {
            bail_arg!("n_virtual_devices must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            bail_arg!("mask_prob must lie in [0, 1]");
        }
        self.cl_optimizer().validate()?;
        self.mlm_optimizer_config().validate()
    }

    pub fn cl_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn mlm_optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.mlm_optimizer,
            lr: self.mlm_lr,
            momentum: self.momentum,
            weight_decay: self.mlm_weight_decay,
        }
    }
}

/// Endless stream of duplicate-free batches drawn from a fixed pool,
/// reshuffled every epoch; the tail of an epoch that cannot fill a batch is
/// dropped.
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
            rng: rng_from_seed(seed),
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.pool.len());
        if self.pos + size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

fn pick<'a>(corpus: &'a EncodedCorpus, idx: &[usize]) -> Vec<&'a EncodedQuestion> {
    idx.iter().map(|&i| &corpus.questions[i]).collect()
}

/// Masked-token training of the text stream, appending to `curve`.
pub fn run_mlm(model: &TqNet, corpus: &EncodedCorpus, cfg: &PretrainConfig, curve: &mut Vec<(usize, f64)>) -> Result<()> {
    let vars = model.params().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Optimizer::new(&cfg.mlm_optimizer_config(), vars)?;
    let mut sampler = BatchSampler::new((0..corpus.len()).collect(), derive_seed(cfg.seed, "mlm-batches"));
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "mlm-mask"));
    let start = curve.len();
    for step in 0..cfg.mlm_steps {
        let items = pick(corpus, &sampler.next_batch(cfg.batch_size));
        match mlm_step(model, &mut opt, &items, cfg.mask_prob, &mut rng)? {
            Some(loss) => curve.push((start + step, loss)),
            None => log::warn!("mlm step {step}: nothing to mask"),
        }
    }
    Ok(())
}

/// One contrastive run along `path`; returns the trained query encoder.
pub fn run_cl(
    model: TqNet,
    path: ClPath,
    corpus: &EncodedCorpus,
    augment: &AugmentConfig,
    cfg: &PretrainConfig,
    label: &str,
    curve: &mut Vec<(usize, f64)>,
) -> Result<TqNet> {
    let pool: Vec<usize> = (0..corpus.len())
        .filter(|&i| !path.needs_images() || !corpus.questions[i].images.is_empty())
        .collect();
    if pool.is_empty() {
        bail_arg!("contrastive run {label} has no usable questions (no images in corpus?)");
    }
    let settings = ClSettings {
        path,
        tau: cfg.tau,
        m: cfg.m,
        queue_size: cfg.queue_size,
        n_virtual_devices: cfg.n_virtual_devices,
        optimizer: cfg.cl_optimizer(),
        augment: augment.clone(),
        seed: derive_seed(cfg.seed, label),
    };
    let mut trainer = ClTrainer::new(model, settings)?;
    let mut sampler = BatchSampler::new(pool, derive_seed(cfg.seed, &format!("{label}-batches")));
    let start = curve.len();
    for step in 0..cfg.steps {
        let items = pick(corpus, &sampler.next_batch(cfg.batch_size));
        let out = trainer.step(&items)?;
        if let Some(loss) = out.loss {
            curve.push((start + step, loss));
        }
        if step % 50 == 0 {
            log::info!(
                "{label} step {step}: loss {:?} pos {:.3} neg {:?}",
                out.loss,
                out.pos_sim,
                out.neg_sim
            );
        }
    }
    Ok(trainer.into_model())
}

fn assemble_seq(cfg: &ModelConfig, text: &TqNet, visual: &TqNet, seed: u64) -> Result<TqNet> {
    let model = TqNet::new(cfg, derive_seed(seed, "seq-assemble"), text.dtype())?;
    let text_tensors = text.params().to_tensors()?;
    let visual_tensors = visual.params().to_tensors()?;
    model
        .params()
        .load_from(&text_tensors, |n| n.starts_with("text.") || n.starts_with("mlm."))?;
    model.params().load_from(&visual_tensors, |n| n.starts_with("visual."))?;
    Ok(model)
}

fn checkpoint_id(stages: &[String], seed: u64, parent: Option<&str>, model: &ModelConfig, cfg: Option<&PretrainConfig>) -> String {
    let settings = serde_json::to_string(&(model, cfg)).unwrap_or_default();
    let label = format!("{}|{}|{}|{}", stages.join(">"), seed, parent.unwrap_or("-"), settings);
    format!("{:016x}", derive_seed(seed, &label))
}

/// Runs the configured stages on top of `model`.
pub fn pretrain_model(
    model: TqNet,
    corpus: &EncodedCorpus,
    augment: &AugmentConfig,
    cfg: &PretrainConfig,
) -> Result<(TqNet, Vec<String>, Vec<(usize, f64)>)> {
    cfg.validate()?;
    let mut curve = Vec::new();
    let mut stages = Vec::new();
    let mut model = model;
    if matches!(cfg.strategy, Strategy::Mlm | Strategy::Mcl) {
        run_mlm(&model, corpus, cfg, &mut curve)?;
        stages.push("mlm".to_string());
    }
    if matches!(cfg.strategy, Strategy::Cl | Strategy::Mcl) {
        model = match cfg.scope {
            Scope::Uni => run_cl(model, ClPath::Fused, corpus, augment, cfg, "cl-uni", &mut curve)?,
            Scope::Cross => {
                if model.config().text_only {
                    bail_arg!("cross scope needs a model that reads images");
                }
                run_cl(model, ClPath::Cross, corpus, augment, cfg, "cl-cross", &mut curve)?
            }
            Scope::Seq => {
                let mcfg = model.config().clone();
                let visual_start = model.duplicate()?;
                let text = run_cl(model, ClPath::Text, corpus, augment, cfg, "cl-seq-text", &mut curve)?;
                let visual = if mcfg.text_only {
                    visual_start
                } else {
                    run_cl(visual_start, ClPath::Image, corpus, augment, cfg, "cl-seq-image", &mut curve)?
                };
                assemble_seq(&mcfg, &text, &visual, cfg.seed)?
            }
        };
        stages.push(cfg.scope.stage().to_string());
    }
    Ok((model, stages, curve))
}

fn manifest_tags(cfg: &PretrainConfig, model: &ModelConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("strategy".to_string(), cfg.strategy.to_string()),
        ("scope".to_string(), cfg.scope.to_string()),
        ("fusion".to_string(), model.fusion.as_str().to_string()),
        ("text_only".to_string(), model.text_only.to_string()),
    ])
}

/// Pretrains a freshly initialised model.
pub fn pretrain(
    corpus: &EncodedCorpus,
    vocab: &TokenVocab,
    model_cfg: &ModelConfig,
    augment: &AugmentConfig,
    cfg: &PretrainConfig,
    dtype: DType,
) -> Result<Checkpoint> {
    let model = TqNet::new(model_cfg, derive_seed(cfg.seed, "init"), dtype)?;
    let (model, stages, curve) = pretrain_model(model, corpus, augment, cfg)?;
    let manifest = CheckpointManifest {
        id: checkpoint_id(&stages, cfg.seed, None, model_cfg, Some(cfg)),
        model: model_cfg.clone(),
        stages,
        vocab_hash: vocab.hash(),
        seed: cfg.seed,
        tags: manifest_tags(cfg, model_cfg),
        parent: None,
    };
    let mut ckpt = Checkpoint::from_model(&model, vocab, manifest)?;
    ckpt.loss_curve = curve;
    Ok(ckpt)
}

/// Continues pretraining from an existing checkpoint; its stages are kept
/// at the front of the new stage chain.
pub fn pretrain_from(
    init: &Checkpoint,
    corpus: &EncodedCorpus,
    augment: &AugmentConfig,
    cfg: &PretrainConfig,
    dtype: DType,
) -> Result<Checkpoint> {
    let model = init.build_model(dtype)?;
    let (model, new_stages, curve) = pretrain_model(model, corpus, augment, cfg)?;
    let mut stages = init.manifest.stages.clone();
    stages.extend(new_stages);
    let mut tags = manifest_tags(cfg, &init.manifest.model);
    tags.insert("init".to_string(), init.manifest.stage().to_string());
    let manifest = CheckpointManifest {
        id: checkpoint_id(&stages, cfg.seed, Some(&init.manifest.id), &init.manifest.model, Some(cfg)),
        model: init.manifest.model.clone(),
        stages,
        vocab_hash: init.manifest.vocab_hash.clone(),
        seed: cfg.seed,
        tags,
        parent: Some(init.manifest.id.clone()),
    };
    let mut ckpt = Checkpoint::from_model(&model, &init.vocab, manifest)?;
    ckpt.loss_curve = curve;
    Ok(ckpt)
}

/// A randomly initialised checkpoint (no training).
pub fn init_checkpoint(vocab: &TokenVocab, model_cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Checkpoint> {
    let model = TqNet::new(model_cfg, derive_seed(seed, "init"), dtype)?;
    let stages = Vec::new();
    let manifest = CheckpointManifest {
        id: checkpoint_id(&stages, seed, None, model_cfg, None),
        model: model_cfg.clone(),
        stages,
        vocab_hash: vocab.hash(),
        seed,
        tags: BTreeMap::new(),
        parent: None,
    };
    Checkpoint::from_model(&model, vocab, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_bad_values() {
        let ok = PretrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            PretrainConfig { tau: 0.0, ..ok.clone() },
            PretrainConfig { queue_size: 8, batch_size: 16, ..ok.clone() },
            PretrainConfig { m: 1.5, ..ok.clone() },
            PretrainConfig { n_virtual_devices: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let err = serde_json::from_str::<PretrainConfig>(r#"{"tau":0.1,"bogus":1}"#);
        assert!(err.is_err());
        let cfg: PretrainConfig = serde_json::from_str(r#"{"strategy":"mlm","scope":"seq"}"#).unwrap();
        assert_eq!((cfg.strategy, cfg.scope), (Strategy::Mlm, Scope::Seq));
    }

    #[test]
    fn sampler_batches_are_duplicate_free() {
        let mut s = BatchSampler::new((0..10).collect(), 1);
        for _ in 0..20 {
            let mut b = s.next_batch(4);
            b.sort();
            b.dedup();
            assert_eq!(b.len(), 4);
        }
    }
}
