use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use super::loss::info_nce_batch;
use super::momentum::MomentumState;
use super::queue::NegativeQueue;
use crate::augment::{two_views_seeded, AugmentConfig};
use crate::batch::EncodedBatch;
use crate::corpus::EncodedQuestion;
use crate::error::{bail_arg, Result};
use crate::model::{EmbedPath, Mode, NormStyle, TqNet};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, derive_seed_n, rng_from_seed, Rng};

/// Which encoder paths form positive pairs in a contrastive run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClPath {
    /// Whole multimodal encoder on both views.
    Fused,
    /// Text stream only.
    Text,
    /// Visual stream only; items without images are skipped.
    Image,
    /// Text embedding against image embedding of the same question, in both
    /// directions; items without images are skipped.
    Cross,
}

impl ClPath {
    /// `(query path, key path)` pairs, one negative queue each.
    fn directions(self) -> &'static [(EmbedPath, EmbedPath)] {
        match self {
            ClPath::Fused => &[(EmbedPath::Fused, EmbedPath::Fused)],
            ClPath::Text => &[(EmbedPath::TextOnly, EmbedPath::TextOnly)],
            ClPath::Image => &[(EmbedPath::ImageOnly, EmbedPath::ImageOnly)],
            ClPath::Cross => &[
                (EmbedPath::TextOnly, EmbedPath::ImageOnly),
                (EmbedPath::ImageOnly, EmbedPath::TextOnly),
            ],
        }
    }

    pub fn needs_images(self) -> bool {
        matches!(self, ClPath::Image | ClPath::Cross)
    }
}

/// Permutation for the key forward and its inverse.
///
/// `permuted[i] = batch[perm[i]]` and `batch[j] = permuted[inverse[j]]`.
pub fn shuffle_keys(n: usize, n_virtual_devices: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_virtual_devices == 0 || n % n_virtual_devices != 0 {
        bail_arg!("batch of {n} is not divisible into {n_virtual_devices} virtual devices");
    }
    let mut perm: Vec<usize> = (0..n).collect();
    if n_virtual_devices > 1 {
        perm.shuffle(rng);
    }
    let mut inverse = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    Ok((perm, inverse))
}

/// Embeds `items` with each virtual device seeing its own slice of the batch.
fn embed_chunked(model: &TqNet, items: &[&EncodedQuestion], path: EmbedPath, n_dev: usize) -> Result<Tensor> {
    let with_images = path != EmbedPath::TextOnly;
    let chunk = if model.config().norm_style == NormStyle::BatchDependent {
        items.len() / n_dev
    } else {
        items.len()
    };
    let parts = items
        .chunks(chunk.max(1))
        .map(|c| {
            let batch = EncodedBatch::from_questions(c, model.dtype(), with_images)?;
            model.embed(&batch, Mode::Train, path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Key embeddings computed on a shuffled batch and returned in original order.
///
/// With batch-independent normalization the shuffle cannot change anything
/// and is skipped.
pub fn shuffled_key_forward(
    key: &TqNet,
    items: &[&EncodedQuestion],
    path: EmbedPath,
    n_dev: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if key.config().norm_style == NormStyle::BatchIndependent {
        return Ok(embed_chunked(key, items, path, 1)?.detach());
    }
    let (perm, inverse) = shuffle_keys(items.len(), n_dev, rng)?;
    let permuted: Vec<&EncodedQuestion> = perm.iter().map(|&i| items[i]).collect();
    let out = embed_chunked(key, &permuted, path, n_dev)?;
    let inv = Tensor::from_vec(inverse.iter().map(|&i| i as u32).collect::<Vec<_>>(), items.len(), &Device::Cpu)?;
    Ok(out.index_select(&inv, 0)?.detach())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClStepOutcome {
    /// `None` when the step only filled the queue or had no usable items.
    pub loss: Option<f64>,
    /// Mean cosine similarity of query and positive key.
    pub pos_sim: f64,
    /// Mean cosine similarity of query and queue entries.
    pub neg_sim: Option<f64>,
    pub n_items: usize,
}

#[derive(Debug, Clone)]
pub struct ClSettings {
    pub path: ClPath,
    pub tau: f64,
    pub m: f64,
    pub queue_size: usize,
    pub n_virtual_devices: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

/// Momentum-contrast trainer: query encoder, key encoder and negative queues.
pub struct ClTrainer {
    pub state: MomentumState,
    pub queues: Vec<NegativeQueue>,
    opt: Optimizer,
    settings: ClSettings,
    shuffle_rng: Rng,
    step: u64,
}

impl ClTrainer {
    pub fn new(model: TqNet, settings: ClSettings) -> Result<Self> {
        if !(settings.tau > 0.0) {
            bail_arg!("temperature must be positive, got {}", settings.tau);
        }
        settings.augment.validate()?;
        let d = model.config().d_model;
        let queues = settings
            .path
            .directions()
            .iter()
            .map(|_| NegativeQueue::new(settings.queue_size, d))
            .collect::<Result<Vec<_>>>()?;
        let vars = model.params().iter().map(|(_, v)| v.clone()).collect();
        let opt = Optimizer::new(&settings.optimizer, vars)?;
        let state = MomentumState::new(model, settings.m)?;
        let shuffle_rng = rng_from_seed(derive_seed(settings.seed, "shuffle"));
        Ok(Self {
            state,
            queues,
            opt,
            settings,
            shuffle_rng,
            step: 0,
        })
    }

    /// Replaces the negative queues, e.g. with pre-filled random ones.
    pub fn with_queues(mut self, queues: Vec<NegativeQueue>) -> Result<Self> {
        if queues.len() != self.queues.len() {
            bail_arg!("expected {} queues, got {}", self.queues.len(), queues.len());
        }
        self.queues = queues;
        Ok(self)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn into_model(self) -> TqNet {
        self.state.query
    }

    /// Drops items the path cannot use and trims to a multiple of the
    /// virtual device count when normalization is batch-dependent.
    fn usable<'a>(&self, items: &[&'a EncodedQuestion]) -> Vec<&'a EncodedQuestion> {
        let mut keep: Vec<&EncodedQuestion> = items
            .iter()
            .copied()
            .filter(|q| !self.settings.path.needs_images() || !q.images.is_empty())
            .collect();
        if keep.len() < items.len() {
            log::warn!("{} items without images skipped", items.len() - keep.len());
        }
        if self.state.query.config().norm_style == NormStyle::BatchDependent {
            let n = self.settings.n_virtual_devices.max(1);
            keep.truncate(keep.len() / n * n);
        }
        keep
    }

    pub fn step(&mut self, items: &[&EncodedQuestion]) -> Result<ClStepOutcome> {
        let step = self.step;
        self.step += 1;
        let items = self.usable(items);
        if items.is_empty() {
            return Ok(ClStepOutcome {
                loss: None,
                pos_sim: 0.0,
                neg_sim: None,
                n_items: 0,
            });
        }
        let image_size = self.state.query.config().image_size;
        let stream = derive_seed_n(derive_seed(self.settings.seed, "views"), step);
        let views = items
            .iter()
            .map(|q| two_views_seeded(q, &self.settings.augment, image_size, stream))
            .collect::<Result<Vec<_>>>()?;
        let view_a: Vec<&EncodedQuestion> = views.iter().map(|v| &v.0).collect();
        let view_b: Vec<&EncodedQuestion> = views.iter().map(|v| &v.1).collect();

        let n_dev = self.settings.n_virtual_devices;
        let dirs = self.settings.path.directions();
        let mut losses = Vec::new();
        let mut keys = Vec::new();
        let (mut pos_sum, mut neg_sum, mut neg_n) = (0.0, 0.0, 0usize);
        for (i, &(qp, kp)) in dirs.iter().enumerate() {
            let q = embed_chunked(&self.state.query, &view_a, qp, n_dev)?;
            let k = shuffled_key_forward(&self.state.key, &view_b, kp, n_dev, &mut self.shuffle_rng)?;
            pos_sum += (&q * &k)?.sum(1)?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !self.queues[i].is_empty() {
                let negs = self.queues[i].to_tensor(q.dtype())?;
                neg_sum += q
                    .detach()
                    .matmul(&negs.t()?)?
                    .mean_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
                neg_n += 1;
                losses.push(info_nce_batch(&q, &k, &negs, self.settings.tau)?);
            }
            keys.push(k);
        }
        let loss = if losses.len() == dirs.len() {
            let total = (Tensor::stack(&losses, 0)?.mean_all())?;
            let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            self.opt.backward_step(&total)?;
            Some(value)
        } else {
            None
        };
        self.state.update()?;
        for (queue, k) in self.queues.iter_mut().zip(&keys) {
            queue.enqueue_tensor(k)?;
        }
        Ok(ClStepOutcome {
            loss,
            pos_sim: pos_sum / dirs.len() as f64,
            neg_sim: (neg_n > 0).then(|| neg_sum / neg_n as f64),
            n_items: items.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_round_trips() {
        let mut rng = rng_from_seed(5);
        let (perm, inv) = shuffle_keys(12, 4, &mut rng).unwrap();
        let items: Vec<usize> = (100..112).collect();
        let permuted: Vec<usize> = perm.iter().map(|&i| items[i]).collect();
        let restored: Vec<usize> = inv.iter().map(|&i| permuted[i]).collect();
        assert_eq!(restored, items);
        assert_ne!(perm, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn single_device_is_identity() {
        let (perm, inv) = shuffle_keys(7, 1, &mut rng_from_seed(0)).unwrap();
        assert_eq!(perm, (0..7).collect::<Vec<_>>());
        assert_eq!(inv, perm);
    }

    #[test]
    fn indivisible_batch_is_rejected() {
        assert!(shuffle_keys(10, 4, &mut rng_from_seed(0)).is_err());
        assert!(shuffle_keys(10, 0, &mut rng_from_seed(0)).is_err());
    }
}
