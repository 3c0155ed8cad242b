//! Optimizers over named candle variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer as _, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum (ignored by AdamW).
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail_arg!("learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail_arg!("momentum must lie in [0, 1), got {}", self.momentum);
        }
        if self.weight_decay < 0.0 {
            bail_arg!("weight decay must be non-negative");
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Parameters without a gradient in a step are left untouched (no decay).
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.clone();
            if self.weight_decay > 0.0 {
                g = (g + (&p * self.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(p - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

pub struct Optimizer {
    inner: Inner,
}

enum Inner {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, vars: Vec<Var>) -> Result<Self> {
        cfg.validate()?;
        let inner = match cfg.kind {
            OptimizerKind::Sgd => Inner::Sgd(Sgd {
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                velocity: vec![None; vars.len()],
                vars,
            }),
            OptimizerKind::Adamw => Inner::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: cfg.lr,
                    weight_decay: cfg.weight_decay,
                    ..Default::default()
                },
            )?),
        };
        Ok(Self { inner })
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match &mut self.inner {
            Inner::Sgd(s) => s.step(grads),
            Inner::AdamW(a) => Ok(a.step(grads)?),
        }
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn sgd_matches_hand_computation() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Optimizer::new(&OptimizerConfig::sgd(0.1, 0.9, 0.01), vec![var.clone()]).unwrap();
        // loss = sum(p^2) -> grad = 2p
        for _ in 0..2 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        // step 1: g = 2p + 0.01p = 2.01p; v = g; p1 = p - 0.1 * 2.01p = 0.799p
        // step 2: g = 2.01 * 0.799p; v = 0.9 * 2.01p + g; p2 = p1 - 0.1 v
        let p = [1.0f64, -2.0];
        let expected: Vec<f64> = p
            .iter()
            .map(|&p0| {
                let p1 = p0 - 0.1 * 2.01 * p0;
                let v2 = 0.9 * 2.01 * p0 + 2.01 * p1;
                p1 - 0.1 * v2
            })
            .collect();
        let got: Vec<f64> = var.as_tensor().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig::sgd(0.0, 0.9, 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0, 0.0).validate().is_err());
    }
}
