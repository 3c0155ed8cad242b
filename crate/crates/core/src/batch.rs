//! Padded tensor batches built from encoded questions.

use candle_core::{DType, Device, Tensor};

use crate::corpus::EncodedQuestion;
use crate::error::{bail_arg, Result};

/// A batch of questions as model inputs.
///
/// Text is padded to the longest real length in the batch. Images of all
/// items are stacked into one `(N,C,H,W)` tensor; `image_slots` scatters the
/// per-image tokens into a `(B,M)` grid where `M` is the largest per-item
/// image count and empty slots point at a trailing zero row.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub ids: Tensor,
    pub text_mask: Tensor,
    pub images: Option<Tensor>,
    pub image_slots: Option<Tensor>,
    pub image_mask: Option<Tensor>,
    pub image_counts: Vec<usize>,
    pub max_images: usize,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.image_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_counts.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.ids.dims()[1]
    }

    pub fn total_images(&self) -> usize {
        self.image_counts.iter().sum()
    }

    /// Builds a batch; `with_images = false` drops the visual inputs.
    pub fn from_questions(items: &[&EncodedQuestion], dtype: DType, with_images: bool) -> Result<Self> {
        if items.is_empty() {
            bail_arg!("cannot build an empty batch");
        }
        let device = Device::Cpu;
        let b = items.len();
        let len = items.iter().map(|q| q.real_len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(b * len);
        let mut mask = Vec::with_capacity(b * len);
        for q in items {
            for i in 0..len {
                ids.push(q.token_ids.get(i).copied().unwrap_or(0));
                mask.push(q.mask.get(i).copied().unwrap_or(0) as f32);
            }
        }
        let ids = Tensor::from_vec(ids, (b, len), &device)?;
        let text_mask = Tensor::from_vec(mask, (b, len), &device)?.to_dtype(dtype)?;

        let image_counts: Vec<usize> = items
            .iter()
            .map(|q| if with_images { q.images.len() } else { 0 })
            .collect();
        let total: usize = image_counts.iter().sum();
        let max_images = image_counts.iter().copied().max().unwrap_or(0);
        if total == 0 {
            return Ok(Self {
                ids,
                text_mask,
                images: None,
                image_slots: None,
                image_mask: None,
                image_counts,
                max_images: 0,
            });
        }
        let (h, w, c) = items
            .iter()
            .flat_map(|q| q.images.first())
            .next()
            .map(|img| img.dim())
            .expect("at least one image");
        let mut pixels = Vec::with_capacity(total * c * h * w);
        let mut slots = Vec::with_capacity(b * max_images);
        let mut img_mask = Vec::with_capacity(b * max_images);
        let mut next = 0u32;
        for (q, &count) in items.iter().zip(&image_counts) {
            for img in q.images.iter().take(count) {
                if img.dim() != (h, w, c) {
                    bail_arg!("images in a batch must share one shape, got {:?} and {:?}", img.dim(), (h, w, c));
                }
                // HWC -> CHW
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            pixels.push(img[[y, x, ch]]);
                        }
                    }
                }
            }
            for s in 0..max_images {
                if s < count {
                    slots.push(next);
                    next += 1;
                    img_mask.push(1f32);
                } else {
                    slots.push(total as u32);
                    img_mask.push(0f32);
                }
            }
        }
        Ok(Self {
            ids,
            text_mask,
            images: Some(Tensor::from_vec(pixels, (total, c, h, w), &device)?.to_dtype(dtype)?),
            image_slots: Some(Tensor::from_vec(slots, b * max_images, &device)?),
            image_mask: Some(Tensor::from_vec(img_mask, (b, max_images), &device)?.to_dtype(dtype)?),
            image_counts,
            max_images,
        })
    }

    /// Sub-batch of the given item positions, in that order.
    pub fn select(items: &[&EncodedQuestion], order: &[usize], dtype: DType, with_images: bool) -> Result<Self> {
        let picked: Vec<&EncodedQuestion> = order.iter().map(|&i| items[i]).collect();
        Self::from_questions(&picked, dtype, with_images)
    }
}
