use candle_core::{DType, Device, Tensor, D};
use rand::Rng as _;

use crate::batch::EncodedBatch;
use crate::corpus::{EncodedQuestion, MASK_ID};
use crate::error::{bail_arg, Result};
use crate::model::layers::log_softmax_last;
use crate::model::TqNet;
use crate::optim::Optimizer;
use crate::rng::Rng;

/// First id that is an ordinary vocabulary token.
const FIRST_TOKEN: u32 = 3;

/// A batch with masked inputs and the positions to predict.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub inputs: Vec<EncodedQuestion>,
    /// `(row, position, original id)`.
    pub targets: Vec<(usize, usize, u32)>,
}

/// Selects each real, non-reserved token with probability `mask_prob`; a
/// selected token becomes `[MASK]` 80% of the time, a random token 10%, and
/// stays unchanged 10%.
pub fn mask_tokens(items: &[&EncodedQuestion], mask_prob: f64, vocab_size: usize, rng: &mut Rng) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&mask_prob) {
        bail_arg!("mask_prob must lie in [0, 1], got {mask_prob}");
    }
    if vocab_size as u32 <= FIRST_TOKEN {
        bail_arg!("vocabulary of {vocab_size} has no ordinary tokens");
    }
    let mut inputs = Vec::with_capacity(items.len());
    let mut targets = Vec::new();
    for (row, q) in items.iter().enumerate() {
        let mut q = (*q).clone();
        for pos in 0..q.real_len() {
            let tok = q.token_ids[pos];
            if tok < FIRST_TOKEN || !rng.random_bool(mask_prob) {
                continue;
            }
            targets.push((row, pos, tok));
            let r: f64 = rng.random();
            if r < 0.8 {
                q.token_ids[pos] = MASK_ID;
            } else if r < 0.9 {
                q.token_ids[pos] = rng.random_range(FIRST_TOKEN..vocab_size as u32);
            }
        }
        inputs.push(q);
    }
    Ok(MaskedBatch { inputs, targets })
}

/// Mean cross-entropy over the masked positions.
pub fn mlm_loss(model: &TqNet, masked: &MaskedBatch) -> Result<Tensor> {
    if masked.targets.is_empty() {
        bail_arg!("no masked positions");
    }
    let refs: Vec<&EncodedQuestion> = masked.inputs.iter().collect();
    let batch = EncodedBatch::from_questions(&refs, model.dtype(), false)?;
    let features = model.encode_text(&batch.ids, &batch.text_mask)?;
    let (b, l, d) = features.dims3()?;
    let rows: Vec<u32> = masked.targets.iter().map(|&(r, p, _)| (r * l + p) as u32).collect();
    let gold: Vec<u32> = masked.targets.iter().map(|&(_, _, t)| t).collect();
    let n = rows.len();
    let picked = features
        .reshape((b * l, d))?
        .index_select(&Tensor::from_vec(rows, n, &Device::Cpu)?, 0)?;
    let logp = log_softmax_last(&model.mlm_logits(&picked)?)?;
    let gold = Tensor::from_vec(gold, (n, 1), &Device::Cpu)?;
    Ok(logp.gather(&gold, D::Minus1)?.mean_all()?.neg()?)
}

/// One optimizer step of masked-token prediction. `None` when nothing was masked.
pub fn mlm_step(
    model: &TqNet,
    opt: &mut Optimizer,
    items: &[&EncodedQuestion],
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<Option<f64>> {
    let masked = mask_tokens(items, mask_prob, model.config().vocab_size, rng)?;
    if masked.targets.is_empty() {
        log::debug!("mlm step skipped: no maskable tokens");
        return Ok(None);
    }
    let loss = mlm_loss(model, &masked)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    opt.backward_step(&loss)?;
    Ok(Some(value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD_ID;
    use crate::rng::rng_from_seed;

    #[test]
    fn masking_skips_reserved_and_padding() {
        let q = EncodedQuestion::from_tokens("a", &[MASK_ID, 5, 6, 7], 8, vec![]);
        let masked = mask_tokens(&[&q], 1.0, 20, &mut rng_from_seed(0)).unwrap();
        let positions: Vec<usize> = masked.targets.iter().map(|t| t.1).collect();
        assert_eq!(positions, vec![1, 2, 3]);
        assert!(masked.inputs[0].token_ids[4..].iter().all(|&t| t == PAD_ID));
    }

    #[test]
    fn zero_probability_masks_nothing() {
        let q = EncodedQuestion::from_tokens("a", &[4, 5, 6], 8, vec![]);
        let masked = mask_tokens(&[&q], 0.0, 20, &mut rng_from_seed(0)).unwrap();
        assert!(masked.targets.is_empty());
        assert_eq!(masked.inputs[0], q);
    }

    #[test]
    fn replacement_mix_is_roughly_80_10_10() {
        let toks: Vec<u32> = (3..1003).map(|i| i % 500 + 3).collect();
        let q = EncodedQuestion::from_tokens("a", &toks, toks.len(), vec![]);
        let masked = mask_tokens(&[&q], 1.0, 600, &mut rng_from_seed(9)).unwrap();
        let n = masked.targets.len() as f64;
        let as_mask = masked
            .targets
            .iter()
            .filter(|&&(_, p, _)| masked.inputs[0].token_ids[p] == MASK_ID)
            .count() as f64;
        let kept = masked
            .targets
            .iter()
            .filter(|&&(_, p, t)| masked.inputs[0].token_ids[p] == t)
            .count() as f64;
        assert!((as_mask / n - 0.8).abs() < 0.04);
        assert!((kept / n - 0.1).abs() < 0.04);
    }
}
