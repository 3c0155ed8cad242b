//! Stochastic views of a question for instance-level contrastive learning.
//!
//! Text: a random contiguous window is kept and tokens are independently
//! masked. Images: random resized crop, horizontal flip, colour jitter and
//! Gaussian blur. A view always keeps every image of its question.

use ndarray::Array3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedQuestion, ImageArray, TokenVocab, MASK_ID};
use crate::error::{bail_arg, Result, TqError};
use crate::rng::{view_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub mask_prob: f64,
    /// Fraction of the text kept by the window crop, drawn uniformly.
    pub window_frac_range: (f64, f64),
    /// Crop area as a fraction of the source image, drawn uniformly.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Brightness/contrast/saturation factors are drawn from `[1-s, 1+s]`.
    pub jitter_strength: f64,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            window_frac_range: (0.7, 1.0),
            crop_scale_range: (0.2, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.4,
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        Self {
            mask_prob: 0.0,
            window_frac_range: (1.0, 1.0),
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            blur_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mask_prob", self.mask_prob),
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail_arg!("{name} must lie in [0, 1], got {p}");
            }
        }
        for (name, (lo, hi)) in [
            ("window_frac_range", self.window_frac_range),
            ("crop_scale_range", self.crop_scale_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                bail_arg!("{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})");
            }
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            bail_arg!("jitter_strength must lie in [0, 1), got {}", self.jitter_strength);
        }
        Ok(())
    }
}

/// Window crop followed by independent masking of non-reserved tokens.
pub fn augment_text(tokens: &[u32], cfg: &AugmentConfig, rng: &mut Rng) -> Vec<u32> {
    let n = tokens.len();
    if n == 0 {
        return Vec::new();
    }
    let (lo, hi) = cfg.window_frac_range;
    let frac = rng.random_range(lo..=hi);
    let keep = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - keep);
    tokens[start..start + keep]
        .iter()
        .map(|&t| {
            let hit = rng.random_bool(cfg.mask_prob);
            if hit && !TokenVocab::is_reserved(t) {
                MASK_ID
            } else {
                t
            }
        })
        .collect()
}

/// Bilinear sample at continuous pixel coordinates, clamped at the border.
fn sample_bilinear(img: &ImageArray, y: f64, x: f64, c: usize) -> f32 {
    let (h, w, _) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img[[y0, x0, c]] * (1.0 - fx) + img[[y0, x1, c]] * fx;
    let bottom = img[[y1, x0, c]] * (1.0 - fx) + img[[y1, x1, c]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Picks a crop box `(y0, x0, h, w)` in source pixels.
fn crop_box(h: usize, w: usize, scale: (f64, f64), rng: &mut Rng) -> (f64, f64, f64, f64) {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let y0 = rng.random_range(0.0..=h as f64 - ch);
            let x0 = rng.random_range(0.0..=w as f64 - cw);
            return (y0, x0, ch, cw);
        }
    }
    (0.0, 0.0, h as f64, w as f64)
}

fn gaussian_blur(img: &ImageArray, sigma: f64) -> ImageArray {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| (v / s) as f32).collect()
    };
    let (h, w, ch) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                tmp[[y, x, c]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img[[y, clamp(x as isize + k as isize - radius, w), c]])
                    .sum();
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, ch));
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out[[y, x, c]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[[clamp(y as isize + k as isize - radius, h), x, c]])
                    .sum();
            }
        }
    }
    out
}

fn luminance(img: &ImageArray, y: usize, x: usize) -> f32 {
    if img.dim().2 >= 3 {
        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
    } else {
        img[[y, x, 0]]
    }
}

fn color_jitter(img: &mut ImageArray, strength: f64, rng: &mut Rng) {
    let (lo, hi) = (1.0 - strength, 1.0 + strength);
    let brightness = rng.random_range(lo..=hi) as f32;
    let contrast = rng.random_range(lo..=hi) as f32;
    let saturation = rng.random_range(lo..=hi) as f32;
    img.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let (h, w, ch) = img.dim();
    let mean = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| luminance(img, y, x))
        .sum::<f32>()
        / (h * w) as f32;
    img.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    for y in 0..h {
        for x in 0..w {
            let gray = luminance(img, y, x);
            for c in 0..ch {
                let v = img[[y, x, c]];
                img[[y, x, c]] = (gray + (v - gray) * saturation).clamp(0.0, 1.0);
            }
        }
    }
}

/// Random resized crop to `out_size`×`out_size`, flip, jitter and blur.
pub fn augment_image(
    img: &ImageArray,
    cfg: &AugmentConfig,
    out_size: usize,
    rng: &mut Rng,
) -> Result<ImageArray> {
    if img.iter().any(|v| !v.is_finite()) {
        return Err(TqError::Data("image contains non-finite pixels".into()));
    }
    let (h, w, ch) = img.dim();
    if h == 0 || w == 0 || out_size == 0 {
        bail_arg!("cannot augment an empty image");
    }
    let (y0, x0, bh, bw) = crop_box(h, w, cfg.crop_scale_range, rng);
    let flip = rng.random_bool(cfg.flip_prob);
    let sy = bh / out_size as f64;
    let sx = bw / out_size as f64;
    let mut out = Array3::from_shape_fn((out_size, out_size, ch), |(oy, ox, c)| {
        let ox = if flip { out_size - 1 - ox } else { ox };
        let y = y0 + (oy as f64 + 0.5) * sy - 0.5;
        let x = x0 + (ox as f64 + 0.5) * sx - 0.5;
        sample_bilinear(img, y, x, c)
    });
    if cfg.jitter_strength > 0.0 {
        color_jitter(&mut out, cfg.jitter_strength, rng);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(0.1..=2.0);
        out = gaussian_blur(&out, sigma);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// One augmented view of a whole question (text and every image).
pub fn augment_question(
    q: &EncodedQuestion,
    cfg: &AugmentConfig,
    image_size: usize,
    rng: &mut Rng,
) -> Result<EncodedQuestion> {
    let tokens = augment_text(q.real_tokens(), cfg, rng);
    let images = q
        .images
        .iter()
        .map(|img| augment_image(img, cfg, image_size, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedQuestion::from_tokens(q.id.clone(), &tokens, q.max_len(), images))
}

/// Two independently augmented views drawn from the given streams.
pub fn two_views(
    q: &EncodedQuestion,
    cfg: &AugmentConfig,
    image_size: usize,
    rng_a: &mut Rng,
    rng_b: &mut Rng,
) -> Result<(EncodedQuestion, EncodedQuestion)> {
    Ok((
        augment_question(q, cfg, image_size, rng_a)?,
        augment_question(q, cfg, image_size, rng_b)?,
    ))
}

/// [`two_views`] with streams derived from `(stream_seed, question id, view)`.
pub fn two_views_seeded(
    q: &EncodedQuestion,
    cfg: &AugmentConfig,
    image_size: usize,
    stream_seed: u64,
) -> Result<(EncodedQuestion, EncodedQuestion)> {
    let mut a = view_rng(stream_seed, &q.id, 0);
    let mut b = view_rng(stream_seed, &q.id, 1);
    two_views(q, cfg, image_size, &mut a, &mut b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn no_mask_full_window() -> AugmentConfig {
        AugmentConfig {
            mask_prob: 0.0,
            window_frac_range: (1.0, 1.0),
            ..Default::default()
        }
    }

    #[test]
    fn identity_text() {
        let toks: Vec<u32> = (3..13).collect();
        let out = augment_text(&toks, &no_mask_full_window(), &mut rng_from_seed(1));
        assert_eq!(out, toks);
    }

    #[test]
    fn full_masking() {
        let toks: Vec<u32> = (3..13).collect();
        let cfg = AugmentConfig {
            mask_prob: 1.0,
            ..no_mask_full_window()
        };
        let out = augment_text(&toks, &cfg, &mut rng_from_seed(1));
        assert_eq!(out, vec![MASK_ID; 10]);
    }

    #[test]
    fn seed_seven_golden() {
        let toks: Vec<u32> = (10..20).collect();
        let out = augment_text(&toks, &AugmentConfig::default(), &mut rng_from_seed(7));
        // recorded from the first audited run
        assert_eq!(out, GOLDEN_SEED7);
    }

    const GOLDEN_SEED7: [u32; 8] = [10, 2, 2, 13, 14, 15, 16, 17];

    #[test]
    fn single_token_survives() {
        let out = augment_text(&[5], &AugmentConfig::default(), &mut rng_from_seed(3));
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn mask_rate_matches_probability() {
        let cfg = AugmentConfig {
            mask_prob: 0.15,
            window_frac_range: (1.0, 1.0),
            ..Default::default()
        };
        let toks: Vec<u32> = (3..23).collect();
        let mut rng = rng_from_seed(11);
        let (mut masked, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let out = augment_text(&toks, &cfg, &mut rng);
            masked += out.iter().filter(|&&t| t == MASK_ID).count();
            total += out.len();
        }
        let rate = masked as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.02, "rate {rate}");
    }

    proptest! {
        #[test]
        fn text_length_bounds(len in 1usize..64, lo in 0.05f64..1.0, seed in 0u64..1000) {
            let cfg = AugmentConfig { window_frac_range: (lo, 1.0), ..Default::default() };
            let toks: Vec<u32> = (0..len as u32).map(|i| i + 3).collect();
            let out = augment_text(&toks, &cfg, &mut rng_from_seed(seed));
            let min = ((lo * len as f64).ceil() as usize).max(1);
            prop_assert!(out.len() >= min && out.len() <= len);
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageArray {
        let mut rng = rng_from_seed(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn zero_image_stays_zero() {
        let img = Array3::<f32>::zeros((20, 24, 3));
        let out = augment_image(&img, &AugmentConfig::default(), 16, &mut rng_from_seed(2)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let cfg = AugmentConfig {
            jitter_strength: 0.0,
            blur_prob: 1.0,
            ..Default::default()
        };
        let out = augment_image(&img, &cfg, 16, &mut rng_from_seed(2)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_output_shape_and_range() {
        for (h, w) in [(8, 8), (40, 30), (64, 64)] {
            let img = random_image(h, w, 4);
            let out = augment_image(&img, &AugmentConfig::default(), 16, &mut rng_from_seed(9)).unwrap();
            assert_eq!(out.dim(), (16, 16, 3));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn image_augmentation_deterministic() {
        let img = random_image(32, 32, 5);
        let a = augment_image(&img, &AugmentConfig::default(), 16, &mut rng_from_seed(9)).unwrap();
        let b = augment_image(&img, &AugmentConfig::default(), 16, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_config_preserves_same_size_image() {
        let img = random_image(16, 16, 6);
        let out = augment_image(&img, &AugmentConfig::identity(), 16, &mut rng_from_seed(1)).unwrap();
        for (a, b) in img.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_pixel_rejected() {
        let mut img = random_image(8, 8, 1);
        img[[2, 2, 1]] = f32::NAN;
        let err = augment_image(&img, &AugmentConfig::default(), 8, &mut rng_from_seed(1)).unwrap_err();
        assert!(matches!(err, TqError::Data(_)));
    }

    fn question(n_images: usize) -> EncodedQuestion {
        let images = (0..n_images).map(|i| random_image(16, 16, i as u64)).collect();
        EncodedQuestion::from_tokens("q1", &[5, 6, 7, 8, 9], 8, images)
    }

    #[test]
    fn views_keep_every_image() {
        let (a, b) = two_views_seeded(&question(2), &AugmentConfig::default(), 12, 3).unwrap();
        assert_eq!(a.images.len(), 2);
        assert_eq!(b.images.len(), 2);
        assert_eq!(a.images[0].dim(), (12, 12, 3));
        assert_ne!(a.images[0], b.images[0]);
    }

    #[test]
    fn text_only_views_stay_text_only() {
        let (a, b) = two_views_seeded(&question(0), &AugmentConfig::default(), 12, 3).unwrap();
        assert!(a.images.is_empty() && b.images.is_empty());
        assert_eq!(a.max_len(), 8);
    }

    #[test]
    fn identical_streams_give_identical_views() {
        let mut ra = rng_from_seed(77);
        let mut rb = rng_from_seed(77);
        let (a, b) = two_views(&question(1), &AugmentConfig::default(), 12, &mut ra, &mut rb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            window_frac_range: (0.9, 0.5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            mask_prob: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
