use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};
use crate::model::layers::log_softmax_last;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 3e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail_arg!("probe batch_size must be at least 1");
        }
        OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay).validate()
    }
}

/// Linear softmax classifier over fixed features.
#[derive(Debug)]
pub struct LinearProbe {
    w: Var,
    b: Var,
}

impl LinearProbe {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.as_tensor().t()?)?.broadcast_add(self.b.as_tensor())?)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        let x = to_tensor(x)?;
        let idx: Vec<u32> = self.logits(&x)?.argmax(D::Minus1)?.to_vec1()?;
        Ok(idx.into_iter().map(|i| i as usize).collect())
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Ok(Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu)?)
}

/// Trains a zero-initialised linear layer with SGD on cross-entropy.
pub fn train_linear_probe(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if x.is_empty() || x.len() != y.len() {
        bail_arg!("probe needs matching non-empty features and labels");
    }
    if y.iter().any(|&c| c >= n_classes) {
        bail_arg!("label outside 0..{n_classes}");
    }
    let d = x[0].len();
    let probe = LinearProbe {
        w: Var::zeros((n_classes, d), DType::F64, &Device::Cpu)?,
        b: Var::zeros(n_classes, DType::F64, &Device::Cpu)?,
    };
    let mut opt = Optimizer::new(
        &OptimizerConfig::sgd(cfg.lr, cfg.momentum, cfg.weight_decay),
        vec![probe.w.clone(), probe.b.clone()],
    )?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb: Vec<Vec<f64>> = chunk.iter().map(|&i| x[i].clone()).collect();
            let yb: Vec<u32> = chunk.iter().map(|&i| y[i] as u32).collect();
            let n = yb.len();
            let logp = log_softmax_last(&probe.logits(&to_tensor(&xb)?)?)?;
            let gold = Tensor::from_vec(yb, (n, 1), &Device::Cpu)?;
            let loss = logp.gather(&gold, D::Minus1)?.mean_all()?.neg()?;
            opt.backward_step(&loss)?;
        }
    }
    Ok(probe)
}

/// Micro- and macro-averaged F1 for single-label predictions.
///
/// Classes that never occur in either `pred` or `gold` are left out of the
/// macro average.
pub fn f1_scores(pred: &[usize], gold: &[usize], n_classes: usize) -> (f64, f64) {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let micro = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let present: Vec<usize> = (0..n_classes).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let macro_ = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|&c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / present.len() as f64
    };
    (micro, macro_)
}
