//! Supervised fine-tuning on labelled similar pairs: the supervised
//! contrastive objective and the pair-classification baseline.

mod labels;
mod loss;
mod pair;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::EncodedBatch;
use crate::corpus::{CorpusBundle, EncodedCorpus, EncodedQuestion, SimilarityGroundTruth, Split};
use crate::error::{bail_arg, bail_integrity, Result};
use crate::model::{Checkpoint, CheckpointManifest, Mode, TqNet};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::{derive_seed, rng_from_seed, Rng};

pub use labels::{build_label_matrix, LabelMatrix};
pub use loss::scl_loss;
pub use pair::{bce_with_logits, PairHead, PAIR_HEAD_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pair,
    Scl,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pair => "pair",
            Method::Scl => "scl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub method: Method,
    pub tau: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Hidden width of the pair-classification head.
    pub pair_hidden: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: Method::Scl,
            tau: 0.2,
            batch_size: 32,
            lr: 3e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            pair_hidden: 64,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bail_arg!("tau must be positive, got {}", self.tau);
        }
        if self.batch_size < 4 {
            bail_arg!("batch_size must be at least 4");
        }
        if self.pair_hidden == 0 {
            bail_arg!("pair_hidden must be at least 1");
        }
        self.optimizer_config().validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Draws batches in which half the items come as labelled similar pairs and
/// the rest uniformly from the pool, so every batch holds a positive pair.
pub struct SclSampler {
    pool: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    rng: Rng,
}

impl SclSampler {
    pub fn new(pool: Vec<usize>, pairs: Vec<(usize, usize)>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            bail_arg!("no similar pairs to sample from");
        }
        if pool.len() < 2 {
            bail_arg!("sampling pool too small");
        }
        Ok(Self {
            pool,
            pairs,
            rng: rng_from_seed(seed),
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut taken = BTreeSet::new();
        let mut out = Vec::with_capacity(size);
        let n_pairs = (size / 4).max(1);
        let mut tries = 0;
        while out.len() < 2 * n_pairs && tries < 50 * n_pairs {
            tries += 1;
            let (a, b) = self.pairs[self.rng.random_range(0..self.pairs.len())];
            if !taken.contains(&a) && !taken.contains(&b) {
                taken.extend([a, b]);
                out.extend([a, b]);
            }
        }
        let target = size.min(self.pool.len().max(out.len()));
        let mut shuffled = self.pool.clone();
        shuffled.shuffle(&mut self.rng);
        for i in shuffled {
            if out.len() >= target {
                break;
            }
            if taken.insert(i) {
                out.push(i);
            }
        }
        out
    }
}

/// Index pairs of labelled similar questions restricted to `pool`.
fn positive_index_pairs(gt: &SimilarityGroundTruth, corpus: &EncodedCorpus, pool: &BTreeSet<usize>) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (a, b) in gt.positive_pairs() {
        let (Some(ia), Some(ib)) = (index_of(corpus, &a), index_of(corpus, &b)) else {
            bail_integrity!("pair ({a}, {b}) refers to an unknown question");
        };
        if pool.contains(&ia) && pool.contains(&ib) {
            out.push((ia, ib));
        }
    }
    Ok(out)
}

fn index_of(corpus: &EncodedCorpus, id: &str) -> Option<usize> {
    corpus.index(id)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Averages a per-step loss curve over consecutive epochs.
pub fn epoch_means(curve: &[(usize, f64)], steps_per_epoch: usize) -> Vec<f64> {
    curve
        .chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().map(|(_, l)| l).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Trained encoder, optional pair head and the per-step loss curve.
pub struct FinetuneOutcome {
    pub model: TqNet,
    pub head: Option<PairHead>,
    pub curve: Vec<(usize, f64)>,
    pub steps_per_epoch: usize,
}

/// Fine-tunes `model` on the training split of `bundle`.
pub fn finetune_model(model: TqNet, bundle: &CorpusBundle, corpus: &EncodedCorpus, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let gt = bundle.train_ground_truth()?;
    let pool: Vec<usize> = (0..corpus.len())
        .filter(|&i| bundle.split_of(&corpus.questions[i].id) == Split::Train)
        .collect();
    let pool_set: BTreeSet<usize> = pool.iter().copied().collect();
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let dtype = model.dtype();
    let mut curve = Vec::with_capacity(total);
    let mut vars: Vec<_> = model.params().iter().map(|(_, v)| v.clone()).collect();
    match cfg.method {
        Method::Scl => {
            let pairs = positive_index_pairs(&gt, corpus, &pool_set)?;
            let mut sampler = SclSampler::new(pool, pairs, derive_seed(cfg.seed, "scl-batches"))?;
            let mut opt = Optimizer::new(&cfg.optimizer_config(), vars)?;
            for step in 0..total {
                let idx = sampler.next_batch(cfg.batch_size);
                let items: Vec<&EncodedQuestion> = idx.iter().map(|&i| &corpus.questions[i]).collect();
                let ids: Vec<String> = items.iter().map(|q| q.id.clone()).collect();
                let labels = build_label_matrix(&ids, &gt)?;
                let batch = EncodedBatch::from_questions(&items, dtype, true)?;
                let emb = model.forward(&batch, Mode::Train)?;
                let loss = scl_loss(&emb, &labels, cfg.tau)?;
                curve.push((step, scalar(&loss)?));
                opt.backward_step(&loss)?;
            }
            Ok(FinetuneOutcome {
                model,
                head: None,
                curve,
                steps_per_epoch,
            })
        }
        Method::Pair => {
            let mut labelled = Vec::new();
            for p in &bundle.pairs_train {
                let (Some(a), Some(b)) = (index_of(corpus, &p.a), index_of(corpus, &p.b)) else {
                    bail_integrity!("pair ({}, {}) refers to an unknown question", p.a, p.b);
                };
                labelled.push((a, b, p.label as f64));
            }
            if labelled.is_empty() {
                bail_arg!("no labelled training pairs");
            }
            let head = PairHead::new(model.config().d_model, cfg.pair_hidden, derive_seed(cfg.seed, "pair-head"), dtype)?;
            vars.extend(head.params().iter().map(|(_, v)| v.clone()));
            let mut opt = Optimizer::new(&cfg.optimizer_config(), vars)?;
            let mut rng = rng_from_seed(derive_seed(cfg.seed, "pair-batches"));
            let per_step = (cfg.batch_size / 2).max(2);
            let mut order: Vec<usize> = Vec::new();
            let mut pos = 0;
            for step in 0..total {
                if pos + per_step > order.len() {
                    order = (0..labelled.len()).collect();
                    order.shuffle(&mut rng);
                    pos = 0;
                }
                let chosen: Vec<(usize, usize, f64)> = order[pos..(pos + per_step).min(order.len())]
                    .iter()
                    .map(|&i| labelled[i])
                    .collect();
                pos += per_step;
                let n = chosen.len();
                let items: Vec<&EncodedQuestion> = chosen
                    .iter()
                    .map(|&(a, _, _)| &corpus.questions[a])
                    .chain(chosen.iter().map(|&(_, b, _)| &corpus.questions[b]))
                    .collect();
                let batch = EncodedBatch::from_questions(&items, dtype, true)?;
                let emb = model.forward(&batch, Mode::Train)?;
                let left = emb.narrow(0, 0, n)?;
                let right = emb.narrow(0, n, n)?;
                // In-batch negatives: each left item against the next pair's right item.
                let shifted: Vec<u32> = (0..n).map(|i| ((i + 1) % n) as u32).collect();
                let right_shift = right.index_select(&Tensor::from_vec(shifted, n, &Device::Cpu)?, 0)?;
                let mut labels: Vec<f64> = chosen.iter().map(|c| c.2).collect();
                for i in 0..n {
                    let a = &corpus.questions[chosen[i].0].id;
                    let b = &corpus.questions[chosen[(i + 1) % n].1].id;
                    labels.push(if a == b || gt.is_similar(a, b) { 1.0 } else { 0.0 });
                }
                let u = Tensor::cat(&[&left, &left], 0)?;
                let v = Tensor::cat(&[&right, &right_shift], 0)?;
                let y = Tensor::from_vec(labels, 2 * n, &Device::Cpu)?.to_dtype(dtype)?;
                let loss = bce_with_logits(&head.logits(&u, &v)?, &y)?;
                curve.push((step, scalar(&loss)?));
                opt.backward_step(&loss)?;
            }
            Ok(FinetuneOutcome {
                model,
                head: Some(head),
                curve,
                steps_per_epoch,
            })
        }
    }
}

/// Fine-tunes the encoder stored in `init` and returns the new checkpoint.
pub fn finetune(init: &Checkpoint, bundle: &CorpusBundle, corpus: &EncodedCorpus, cfg: &FinetuneConfig, dtype: DType) -> Result<Checkpoint> {
    let model = init.build_model(dtype)?;
    let out = finetune_model(model, bundle, corpus, cfg)?;
    let mut stages = init.manifest.stages.clone();
    stages.push(format!("ft-{}", cfg.method.as_str()));
    let mut tags = init.manifest.tags.clone();
    tags.insert("method".to_string(), cfg.method.as_str().to_string());
    tags.insert("steps_per_epoch".to_string(), out.steps_per_epoch.to_string());
    let settings = serde_json::to_string(cfg).unwrap_or_default();
    let label = format!("{}|{}|{}|{}", stages.join(">"), cfg.seed, init.manifest.id, settings);
    let manifest = CheckpointManifest {
        id: format!("{:016x}", derive_seed(cfg.seed, &label)),
        model: init.manifest.model.clone(),
        stages,
        vocab_hash: init.manifest.vocab_hash.clone(),
        seed: cfg.seed,
        tags,
        parent: Some(init.manifest.id.clone()),
    };
    let mut ckpt = Checkpoint::from_model(&out.model, &init.vocab, manifest)?;
    if let Some(head) = &out.head {
        ckpt = ckpt.with_extra(PAIR_HEAD_PREFIX, head.params())?;
    }
    ckpt.loss_curve = out.curve;
    Ok(ckpt)
}

/// Rebuilds the pair head stored in a checkpoint, if any.
pub fn load_pair_head(ckpt: &Checkpoint, hidden: usize, dtype: DType) -> Result<Option<PairHead>> {
    if !ckpt.has_extra(PAIR_HEAD_PREFIX) {
        return Ok(None);
    }
    let tensors = ckpt.extra(PAIR_HEAD_PREFIX);
    let hidden = tensors.get("hidden.b").map(|t| t.dims()[0]).unwrap_or(hidden);
    let head = PairHead::new(ckpt.manifest.model.d_model, hidden, 0, dtype)?;
    head.params().load_from(&tensors, |_| true)?;
    Ok(Some(head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_always_contains_a_positive_pair() {
        let pool: Vec<usize> = (0..40).collect();
        let pairs = vec![(0, 1), (2, 3), (5, 9)];
        let mut s = SclSampler::new(pool, pairs.clone(), 4).unwrap();
        for _ in 0..100 {
            let b = s.next_batch(8);
            assert_eq!(b.len(), 8);
            let set: BTreeSet<usize> = b.iter().copied().collect();
            assert_eq!(set.len(), 8);
            assert!(pairs.iter().any(|(a, c)| set.contains(a) && set.contains(c)));
        }
    }

    #[test]
    fn epoch_means_average_chunks() {
        let curve = vec![(0, 1.0), (1, 3.0), (2, 2.0), (3, 2.0), (4, 5.0)];
        assert_eq!(epoch_means(&curve, 2), vec![2.0, 2.0, 5.0]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = FinetuneConfig::default();
        assert_eq!((cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay), (32, 3e-4, 0.9, 5e-4));
        assert!(FinetuneConfig { tau: -1.0, ..cfg.clone() }.validate().is_err());
        assert!(serde_json::from_str::<FinetuneConfig>(r#"{"method":"pair","extra":1}"#).is_err());
    }
}
