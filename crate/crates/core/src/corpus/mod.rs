//! Question corpus: data model, on-disk format, vocabulary, encoding and the
//! seeded synthetic generator.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! questions.jsonl     {"id","text":[tokens],"images":[paths],"kp":int|null,"qtype":...}
//! pairs_train.jsonl   {"a":id,"b":id,"label":0|1}
//! pairs_test.jsonl
//! generator.json      optional config echo
//! images/             PNG files referenced by questions.jsonl
//! ```
//!
//! Questions referenced by test pairs form the test split; every other
//! question belongs to the train split.

mod encode;
mod generate;
mod ground_truth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{bail_integrity, Result, TqError};

pub use encode::{decode_image, encode_question, to_float_image, EncodedCorpus, EncodedQuestion, ImageArray};
pub use generate::{generate_synthetic_corpus, GeneratorConfig};
pub use ground_truth::{ground_truth_map, SimilarityGroundTruth};
pub use vocab::{build_vocab, TokenVocab, MASK_ID, PAD_ID, UNK_ID};

pub const DEFAULT_MAX_IMAGES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Choice,
    Blank,
    Calc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub text: Vec<String>,
    pub images: Vec<String>,
    pub kp: Option<u32>,
    pub qtype: QuestionType,
}

impl Question {
    pub fn has_images(&self) -> bool {
        !self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, label: u8) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Where image references resolve.
#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Relative paths under a corpus root directory.
    Dir(PathBuf),
    /// Rendered in memory by the generator, keyed by reference.
    Memory(Arc<BTreeMap<String, RgbImage>>),
}

#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub questions: Vec<Question>,
    pub pairs_train: Vec<LabeledPair>,
    pub pairs_test: Vec<LabeledPair>,
    /// Echo of the generator config when the corpus is synthetic.
    pub generator: Option<GeneratorConfig>,
    pub images: ImageSource,
    index: BTreeMap<String, usize>,
}

impl PartialEq for CorpusBundle {
    fn eq(&self, other: &Self) -> bool {
        self.questions == other.questions
            && self.pairs_train == other.pairs_train
            && self.pairs_test == other.pairs_test
            && self.generator == other.generator
    }
}

impl CorpusBundle {
    /// Assembles a bundle and checks its invariants.
    pub fn new(
        questions: Vec<Question>,
        pairs_train: Vec<LabeledPair>,
        pairs_test: Vec<LabeledPair>,
        generator: Option<GeneratorConfig>,
        images: ImageSource,
        max_images: usize,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, q) in questions.iter().enumerate() {
            if index.insert(q.id.clone(), i).is_some() {
                bail_integrity!("duplicate question id {:?}", q.id);
            }
            if q.text.is_empty() {
                bail_integrity!("question {:?} has empty text", q.id);
            }
            if q.images.len() > max_images {
                bail_integrity!(
                    "question {:?} has {} images, maximum is {}",
                    q.id,
                    q.images.len(),
                    max_images
                );
            }
        }
        for (name, pairs) in [("train", &pairs_train), ("test", &pairs_test)] {
            for p in pairs.iter() {
                for id in [&p.a, &p.b] {
                    if !index.contains_key(id) {
                        bail_integrity!("{name} pair references unknown question id {id:?}");
                    }
                }
                if p.label > 1 {
                    bail_integrity!("{name} pair ({}, {}) has label {}", p.a, p.b, p.label);
                }
            }
        }
        let key = |p: &LabeledPair| {
            if p.a <= p.b {
                (p.a.clone(), p.b.clone())
            } else {
                (p.b.clone(), p.a.clone())
            }
        };
        let train_keys: BTreeSet<_> = pairs_train.iter().map(key).collect();
        if let Some(p) = pairs_test.iter().find(|p| train_keys.contains(&key(p))) {
            bail_integrity!("pair ({}, {}) occurs in both train and test", p.a, p.b);
        }
        Ok(Self {
            questions,
            pairs_train,
            pairs_test,
            generator,
            images,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn test_ids(&self) -> BTreeSet<String> {
        self.pairs_test
            .iter()
            .flat_map(|p| [p.a.clone(), p.b.clone()])
            .collect()
    }

    pub fn split_of(&self, id: &str) -> Split {
        if self.pairs_test.iter().any(|p| p.a == id || p.b == id) {
            Split::Test
        } else {
            Split::Train
        }
    }

    /// Questions of one split, in corpus order.
    pub fn split(&self, split: Split) -> Vec<&Question> {
        let test = self.test_ids();
        self.questions
            .iter()
            .filter(|q| test.contains(&q.id) == (split == Split::Test))
            .collect()
    }

    pub fn train_ground_truth(&self) -> Result<SimilarityGroundTruth> {
        ground_truth_map(&self.pairs_train)
    }

    pub fn test_ground_truth(&self) -> Result<SimilarityGroundTruth> {
        ground_truth_map(&self.pairs_test)
    }

    /// Raw RGB pixels of an image reference.
    pub fn load_image(&self, reference: &str) -> Result<RgbImage> {
        match &self.images {
            ImageSource::Memory(map) => map
                .get(reference)
                .cloned()
                .ok_or_else(|| TqError::Data(format!("image {reference:?} not in memory store"))),
            ImageSource::Dir(root) => {
                let path = root.join(reference);
                let img = image::open(&path)
                    .map_err(|e| TqError::Data(format!("cannot decode {}: {e}", path.display())))?;
                Ok(img.to_rgb8())
            }
        }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| TqError::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| TqError::format(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(value);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a corpus directory, validating ids, image counts and image files.
pub fn load_corpus(dir: &Path) -> Result<CorpusBundle> {
    load_corpus_with(dir, DEFAULT_MAX_IMAGES)
}

pub fn load_corpus_with(dir: &Path, max_images: usize) -> Result<CorpusBundle> {
    let questions: Vec<Question> = read_jsonl(&dir.join("questions.jsonl"))?;
    let pairs_train: Vec<LabeledPair> = read_jsonl(&dir.join("pairs_train.jsonl"))?;
    let pairs_test: Vec<LabeledPair> = read_jsonl(&dir.join("pairs_test.jsonl"))?;
    let gen_path = dir.join("generator.json");
    let generator = if gen_path.exists() {
        let text = fs::read_to_string(&gen_path)?;
        Some(serde_json::from_str(&text).map_err(|e| TqError::format(&gen_path, e.to_string()))?)
    } else {
        None
    };
    let bundle = CorpusBundle::new(
        questions,
        pairs_train,
        pairs_test,
        generator,
        ImageSource::Dir(dir.to_path_buf()),
        max_images,
    )?;
    for q in &bundle.questions {
        for reference in &q.images {
            if !dir.join(reference).is_file() {
                bail_integrity!("question {:?} references missing image {reference:?}", q.id);
            }
        }
    }
    Ok(bundle)
}

/// Writes a bundle in the directory layout read by [`load_corpus`].
pub fn write_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("questions.jsonl"), &bundle.questions)?;
    write_jsonl(&dir.join("pairs_train.jsonl"), &bundle.pairs_train)?;
    write_jsonl(&dir.join("pairs_test.jsonl"), &bundle.pairs_test)?;
    if let Some(cfg) = &bundle.generator {
        fs::write(dir.join("generator.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    for q in &bundle.questions {
        for reference in &q.images {
            let target = dir.join(reference);
            if let ImageSource::Dir(root) = &bundle.images {
                if root.join(reference) == target {
                    continue;
                }
            }
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            let img = bundle.load_image(reference)?;
            img.save(&target)
                .map_err(|e| TqError::Data(format!("cannot write {}: {e}", target.display())))?;
        }
    }
    Ok(())
}
