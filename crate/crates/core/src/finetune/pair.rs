use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;

use crate::error::Result;
use crate::model::layers::linear;
use crate::model::ParamStore;
use crate::rng::rng_from_seed;

/// Prefix of the pair head's tensors inside a checkpoint.
pub const PAIR_HEAD_PREFIX: &str = "pair_head";

/// Two-layer classifier on `[u, v, |u−v|, u⊙v]`, averaged over both input
/// orders so swapping the pair cannot change the output.
#[derive(Debug)]
pub struct PairHead {
    params: ParamStore,
    hidden: Linear,
    out: Linear,
}

impl PairHead {
    pub fn new(d: usize, hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut ps = ParamStore::new(dtype);
        let mut rng = rng_from_seed(seed);
        let hidden_layer = linear(&mut ps, "hidden", 4 * d, hidden, &mut rng)?;
        let out = linear(&mut ps, "out", hidden, 1, &mut rng)?;
        Ok(Self {
            params: ps,
            hidden: hidden_layer,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn one_order(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        let feats = Tensor::cat(&[u, v, &(u - v)?.abs()?, &(u * v)?], 1)?;
        let h = crate::model::layers::gelu(&self.hidden.forward(&feats)?)?;
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }

    /// `(B,)` logits for rows of `u` and `v`.
    pub fn logits(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(((self.one_order(u, v)? + self.one_order(v, u)?)? * 0.5)?)
    }

    pub fn probability(&self, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(u, v)?)?)
    }
}

/// Mean binary cross-entropy on logits; `labels` holds 0/1 values.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    // softplus(x) − y·x, with softplus(x) = max(x, 0) + ln(1 + e^{−|x|}).
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (labels * logits)?)?.mean_all()?)
}
