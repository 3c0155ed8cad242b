use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;

use super::{CorpusBundle, Question, TokenVocab, PAD_ID};
use crate::error::{bail_arg, Result};

/// An H×W×C image with values in `[0, 1]`.
pub type ImageArray = Array3<f32>;

/// A question ready for the model: padded ids, mask and decoded images.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub id: String,
    pub token_ids: Vec<u32>,
    /// 1 for real tokens, 0 for padding.
    pub mask: Vec<u8>,
    pub images: Vec<ImageArray>,
}

impl EncodedQuestion {
    /// Builds an encoded question from unpadded ids.
    pub fn from_tokens(id: impl Into<String>, tokens: &[u32], max_len: usize, images: Vec<ImageArray>) -> Self {
        let n = tokens.len().min(max_len);
        let mut token_ids = vec![PAD_ID; max_len];
        token_ids[..n].copy_from_slice(&tokens[..n]);
        let mut mask = vec![0u8; max_len];
        mask[..n].fill(1);
        Self {
            id: id.into(),
            token_ids,
            mask,
            images,
        }
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn real_tokens(&self) -> &[u32] {
        &self.token_ids[..self.real_len()]
    }

    pub fn max_len(&self) -> usize {
        self.token_ids.len()
    }
}

/// Converts RGB8 pixels to a float H×W×3 array, resizing to `size`×`size`.
pub fn to_float_image(img: &RgbImage, size: usize) -> ImageArray {
    let resized;
    let img = if img.width() as usize != size || img.height() as usize != size {
        resized = imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    } else {
        img
    };
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn decode_image(corpus: &CorpusBundle, reference: &str, size: usize) -> Result<ImageArray> {
    Ok(to_float_image(&corpus.load_image(reference)?, size))
}

/// Maps text to ids (truncating/padding to `max_len`) and decodes images.
pub fn encode_question(
    q: &Question,
    vocab: &TokenVocab,
    max_len: usize,
    corpus: &CorpusBundle,
    image_size: usize,
) -> Result<EncodedQuestion> {
    if max_len == 0 {
        bail_arg!("max_len must be positive");
    }
    let ids: Vec<u32> = q.text.iter().map(|t| vocab.id(t)).collect();
    let images = q
        .images
        .iter()
        .map(|r| decode_image(corpus, r, image_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedQuestion::from_tokens(q.id.clone(), &ids, max_len, images))
}

/// Every question of a corpus, encoded once and addressable by id.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub questions: Vec<EncodedQuestion>,
    index: std::collections::HashMap<String, usize>,
}

impl EncodedCorpus {
    pub fn new(questions: Vec<EncodedQuestion>) -> Self {
        let index = questions.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        Self { questions, index }
    }

    pub fn encode(corpus: &CorpusBundle, vocab: &TokenVocab, max_len: usize, image_size: usize) -> Result<Self> {
        let questions = corpus
            .questions
            .iter()
            .map(|q| encode_question(q, vocab, max_len, corpus, image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(questions))
    }

    pub fn get(&self, id: &str) -> Option<&EncodedQuestion> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    /// Position of `id` in `questions`.
    pub fn index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Looks up several ids; unknown ids are an integrity error.
    pub fn lookup(&self, ids: &[String]) -> Result<Vec<&EncodedQuestion>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| crate::TqError::Integrity(format!("unknown question id {id:?}")))
            })
            .collect()
    }
}
