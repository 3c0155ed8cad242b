use candle_core::{Tensor, D};

use super::labels::LabelMatrix;
use crate::error::{bail_arg, Result};

/// Supervised contrastive loss over a batch of unit-norm embeddings.
///
/// For each ordered positive pair `(i, j)` the negatives of `i` are the
/// items that are neither `i` nor labelled similar to `i`. Terms are
/// averaged over all ordered positive pairs.
pub fn scl_loss(emb: &Tensor, labels: &LabelMatrix, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        bail_arg!("temperature must be positive, got {tau}");
    }
    let (b, _) = emb.dims2()?;
    if b != labels.len() {
        bail_arg!("{b} embeddings but a {}×{} label matrix", labels.len(), labels.len());
    }
    let n_pos = labels.n_positive();
    if n_pos == 0 {
        bail_arg!("label matrix has no positive pairs");
    }
    let dtype = emb.dtype();
    let pos = labels.to_tensor(dtype)?;
    let eye = Tensor::eye(b, dtype, emb.device())?;
    let neg = ((pos.ones_like()? - &pos)? - &eye)?;
    let sim = (emb.matmul(&emb.t()?)? / tau)?;
    let shift = sim.max_keepdim(D::Minus1)?.detach();
    let s = sim.broadcast_sub(&shift)?;
    let neg_sum = (s.exp()? * &neg)?.sum_keepdim(D::Minus1)?;
    let terms = (s.exp()?.broadcast_add(&neg_sum)?.log()? - &s)?;
    Ok(((terms * &pos)?.sum_all()? / n_pos as f64)?)
}
