use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusBundle;
use crate::error::{bail_arg, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];

/// Dense token → id mapping. Ids `0..3` are reserved for PAD, UNK, MASK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct TokenVocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for TokenVocab {
    fn from(f: VocabFile) -> Self {
        TokenVocab::from_tokens(f.tokens)
    }
}

impl From<TokenVocab> for VocabFile {
    fn from(v: TokenVocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl TokenVocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        format!("{:x}", h.finalize())
    }
}

/// Builds a vocabulary from every question's text.
///
/// Tokens seen at least `min_freq` times get ids ordered by descending
/// frequency, ties broken lexicographically.
pub fn build_vocab(corpus: &CorpusBundle, min_freq: usize) -> Result<TokenVocab> {
    if corpus.is_empty() {
        bail_arg!("cannot build a vocabulary from an empty corpus");
    }
    build_vocab_from(corpus.questions.iter().map(|q| q.text.as_slice()), min_freq)
}

pub(crate) fn build_vocab_from<'a>(
    texts: impl Iterator<Item = &'a [String]>,
    min_freq: usize,
) -> Result<TokenVocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in texts {
        for t in text {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Ok(TokenVocab::from_tokens(tokens))
}
