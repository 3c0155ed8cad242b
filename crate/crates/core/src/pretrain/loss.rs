use candle_core::{DType, Device, Tensor, D};

use super::queue::NegativeQueue;
use crate::error::{bail_arg, Result};
use crate::model::layers::log_softmax_last;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        bail_arg!("temperature must be positive, got {tau}");
    }
    Ok(())
}

/// Per-row InfoNCE. `q`, `k_pos`: `(B, d)`; `negatives`: `(K, d)`.
///
/// Returns `(B,)` losses. `k_pos` and `negatives` are detached.
pub fn info_nce_rows(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    if negatives.dims()[0] == 0 {
        bail_arg!("InfoNCE needs a non-empty negative set");
    }
    let k_pos = k_pos.detach();
    let negatives = negatives.detach();
    let pos = (q * &k_pos)?.sum_keepdim(D::Minus1)?;
    let neg = q.matmul(&negatives.t()?)?;
    let logits = (Tensor::cat(&[&pos, &neg], 1)? / tau)?;
    Ok(log_softmax_last(&logits)?.narrow(1, 0, 1)?.squeeze(1)?.neg()?)
}

/// Mean InfoNCE over a batch.
pub fn info_nce_batch(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(info_nce_rows(q, k_pos, negatives, tau)?.mean_all()?)
}

/// InfoNCE for a single query against the queue, in f64.
pub fn info_nce(q: &[f64], k_pos: &[f64], queue: &NegativeQueue, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if queue.is_empty() {
        bail_arg!("InfoNCE needs a non-empty queue");
    }
    if q.len() != queue.dim() || k_pos.len() != queue.dim() {
        bail_arg!("vector width differs from queue width {}", queue.dim());
    }
    let d = q.len();
    let qt = Tensor::from_slice(q, (1, d), &Device::Cpu)?;
    let kt = Tensor::from_slice(k_pos, (1, d), &Device::Cpu)?;
    let loss = info_nce_rows(&qt, &kt, &queue.to_tensor(DType::F64)?, tau)?;
    Ok(loss.to_vec1::<f64>()?[0])
}
