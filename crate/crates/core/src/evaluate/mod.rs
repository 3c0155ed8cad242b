//! Similar-question retrieval, pair-structure subsets and frozen-feature
//! knowledge-point classification.

mod probe;
mod retrieval;

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::EncodedBatch;
use crate::corpus::{CorpusBundle, EncodedCorpus, EncodedQuestion, LabeledPair, Split, TokenVocab};
use crate::error::{bail_arg, bail_integrity, Result};
use crate::finetune::{load_pair_head, PairHead};
use crate::model::{Checkpoint, EmbedPath, Mode, TqNet};

pub use probe::{f1_scores, train_linear_probe, ProbeConfig};
pub use retrieval::{precision_at_k, query_precision, rank_candidates, retrieve_topk_by, PredictionMap};

const EMBED_BATCH: usize = 64;

/// Unit-norm embeddings, one row per question, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != rows.len() {
            bail_arg!("{} ids for {} rows", ids.len(), rows.len());
        }
        let mut pairs: Vec<(String, Vec<f64>)> = ids.into_iter().zip(rows).collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let (ids, rows): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self { ids, rows, index })
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    fn row(&self, id: &str) -> Result<&[f64]> {
        match self.get(id) {
            Some(r) => Ok(r),
            None => bail_integrity!("no embedding for question {id:?}"),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, row) in self.ids.iter().zip(&self.rows) {
            h.update(id.as_bytes());
            for v in row {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Cosine similarity (dot product of unit rows) of `query` to each candidate.
    pub fn scores(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let q = self.row(query)?;
        candidates
            .iter()
            .map(|c| Ok(q.iter().zip(self.row(c)?).map(|(a, b)| a * b).sum()))
            .collect()
    }
}

/// Eval-mode embeddings of `items` along `path`, in input order.
pub fn embed_questions(model: &TqNet, items: &[&EncodedQuestion], path: EmbedPath) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EMBED_BATCH) {
        let batch = EncodedBatch::from_questions(chunk, model.dtype(), path != EmbedPath::TextOnly)?;
        let emb = model.embed(&batch, Mode::Eval, path)?.detach().to_dtype(DType::F64)?;
        out.extend(emb.to_vec2::<f64>()?);
    }
    Ok(out)
}

pub fn embed_model(model: &TqNet, corpus: &EncodedCorpus) -> Result<EmbeddingMatrix> {
    let items: Vec<&EncodedQuestion> = corpus.questions.iter().collect();
    let rows = embed_questions(model, &items, EmbedPath::Fused)?;
    EmbeddingMatrix::new(items.iter().map(|q| q.id.clone()).collect(), rows)
}

fn check_vocab(ckpt: &Checkpoint, vocab: &TokenVocab) -> Result<()> {
    if ckpt.manifest.vocab_hash != vocab.hash() {
        bail_integrity!(
            "checkpoint {} was trained with vocabulary {} but the corpus vocabulary is {}",
            ckpt.manifest.id,
            ckpt.manifest.vocab_hash,
            vocab.hash()
        );
    }
    Ok(())
}

pub fn embed_corpus(ckpt: &Checkpoint, vocab: &TokenVocab, corpus: &EncodedCorpus, dtype: DType) -> Result<EmbeddingMatrix> {
    check_vocab(ckpt, vocab)?;
    embed_model(&ckpt.build_model(dtype)?, corpus)
}

/// Top-`k` candidates per query by cosine similarity.
pub fn retrieve_topk(emb: &EmbeddingMatrix, queries: &[String], candidates: &[String], k: usize) -> Result<PredictionMap> {
    retrieve_topk_by(queries, candidates, k, |q, c| emb.scores(q, c))
}

/// Which test pairs take part in a retrieval evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    /// Both questions text-only.
    Tt,
    /// Exactly one question has images.
    Ti,
    /// Both questions have images.
    Ii,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Tt => "tt",
            Subset::Ti => "ti",
            Subset::Ii => "ii",
        }
    }

    pub fn keeps(&self, a_images: bool, b_images: bool) -> bool {
        match self {
            Subset::All => true,
            Subset::Tt => !a_images && !b_images,
            Subset::Ti => a_images != b_images,
            Subset::Ii => a_images && b_images,
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = crate::TqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Subset::All),
            "tt" => Ok(Subset::Tt),
            "ti" => Ok(Subset::Ti),
            "ii" => Ok(Subset::Ii),
            _ => bail_arg!("unknown subset {s:?} (expected all, tt, ti or ii)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            probe: ProbeConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail_arg!("k must be at least 1");
        }
        self.probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub subset: String,
    pub metric: Metric,
    /// Every metric computed, including the headline one.
    pub metrics: BTreeMap<String, f64>,
    pub k: usize,
    pub n_queries: usize,
    pub checkpoint_id: String,
    pub seed: u64,
    /// Queries whose effective k was reduced (too few similars or candidates).
    pub n_clamped: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "task,subset,metric,value,k,n_queries,checkpoint_id,seed,n_clamped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.task,
            self.subset,
            self.metric.name,
            self.metric.value,
            self.k,
            self.n_queries,
            self.checkpoint_id,
            self.seed,
            self.n_clamped
        )
    }
}

/// Outcome of a retrieval run before it is wrapped into a report.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarOutcome {
    pub precision: f64,
    pub n_queries: usize,
    pub n_clamped: usize,
    pub predictions: PredictionMap,
}

/// Scores used to rank candidates: cosine similarity, or the probability of
/// a trained pair head.
pub enum Scorer<'a> {
    Cosine,
    PairHead(&'a PairHead),
}

fn head_scores(head: &PairHead, emb: &EmbeddingMatrix, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
    let d = emb.dim();
    let q = emb.row(query)?;
    let mut u = Vec::with_capacity(candidates.len() * d);
    let mut v = Vec::with_capacity(candidates.len() * d);
    for c in candidates {
        u.extend_from_slice(q);
        v.extend_from_slice(emb.row(c)?);
    }
    let dtype = head.params().dtype();
    let n = candidates.len();
    let u = Tensor::from_vec(u, (n, d), &Device::Cpu)?.to_dtype(dtype)?;
    let v = Tensor::from_vec(v, (n, d), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(head.probability(&u, &v)?.to_dtype(DType::F64)?.to_vec1()?)
}

/// Retrieval precision over the test pairs selected by `subset`.
pub fn eval_similar_embeddings(
    emb: &EmbeddingMatrix,
    scorer: &Scorer,
    bundle: &CorpusBundle,
    subset: Subset,
    k: usize,
) -> Result<SimilarOutcome> {
    if k == 0 {
        bail_arg!("k must be at least 1");
    }
    let has_images = |id: &str| bundle.get(id).is_some_and(|q| q.has_images());
    let kept: Vec<LabeledPair> = bundle
        .pairs_test
        .iter()
        .filter(|p| p.label == 1 && subset.keeps(has_images(&p.a), has_images(&p.b)))
        .cloned()
        .collect();
    if kept.is_empty() {
        bail_arg!("subset {} has no similar test pairs", subset.as_str());
    }
    let gt = crate::corpus::ground_truth_map(&kept)?;
    let test_ids: Vec<String> = bundle.test_ids().into_iter().collect();
    let (with_img, without_img): (Vec<String>, Vec<String>) = test_ids.iter().cloned().partition(|id| has_images(id));
    let pool_for = |q: &str| -> &Vec<String> {
        match subset {
            Subset::All => &test_ids,
            Subset::Tt => &without_img,
            Subset::Ii => &with_img,
            Subset::Ti => {
                if has_images(q) {
                    &without_img
                } else {
                    &with_img
                }
            }
        }
    };
    let mut predictions = PredictionMap::new();
    let mut sum = 0.0;
    let mut n_clamped = 0;
    let queries: Vec<&String> = gt.ids().collect();
    for q in &queries {
        let pool = pool_for(q);
        let available = pool.iter().filter(|c| c != q).count();
        let similars = gt.similars(q).expect("query comes from the map");
        let k_eff = k.min(available);
        if k_eff < k || similars.len() < k {
            n_clamped += 1;
        }
        if k_eff == 0 {
            bail_arg!("subset {} leaves query {q} without candidates", subset.as_str());
        }
        let scores = match scorer {
            Scorer::Cosine => emb.scores(q, pool)?,
            Scorer::PairHead(head) => head_scores(head, emb, q, pool)?,
        };
        let ranked = rank_candidates(q, pool, &scores, k_eff);
        sum += query_precision(&ranked, similars, k_eff)?;
        predictions.insert((*q).clone(), ranked);
    }
    Ok(SimilarOutcome {
        precision: sum / queries.len() as f64,
        n_queries: queries.len(),
        n_clamped,
        predictions,
    })
}

/// Retrieval precision of a checkpoint on one subset of the test pairs.
///
/// Checkpoints carrying a pair head rank candidates by its probability.
pub fn eval_similar(
    ckpt: &Checkpoint,
    bundle: &CorpusBundle,
    vocab: &TokenVocab,
    corpus: &EncodedCorpus,
    subset: Subset,
    cfg: &EvalConfig,
    dtype: DType,
) -> Result<EvalReport> {
    cfg.validate()?;
    let emb = embed_corpus(ckpt, vocab, corpus, dtype)?;
    let head = load_pair_head(ckpt, 64, dtype)?;
    let scorer = match &head {
        Some(h) => Scorer::PairHead(h),
        None => Scorer::Cosine,
    };
    let out = eval_similar_embeddings(&emb, &scorer, bundle, subset, cfg.k)?;
    let mut warnings = Vec::new();
    if out.n_clamped > 0 {
        warnings.push(format!(
            "{} of {} queries had fewer than {} similars or candidates; k was clamped for them",
            out.n_clamped, out.n_queries, cfg.k
        ));
    }
    let name = format!("p@{}", cfg.k);
    Ok(EvalReport {
        task: "similar".to_string(),
        subset: subset.as_str().to_string(),
        metric: Metric {
            name: name.clone(),
            value: out.precision,
        },
        metrics: BTreeMap::from([(name, out.precision)]),
        k: cfg.k,
        n_queries: out.n_queries,
        checkpoint_id: ckpt.manifest.id.clone(),
        seed: ckpt.manifest.seed,
        n_clamped: out.n_clamped,
        warnings,
    })
}

/// Micro and macro F1 of a linear probe on frozen embeddings.
pub fn eval_kp_embeddings(emb: &EmbeddingMatrix, bundle: &CorpusBundle, cfg: &ProbeConfig) -> Result<(f64, f64, usize)> {
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for q in &bundle.questions {
        let Some(kp) = q.kp else {
            bail_arg!("question {} has no knowledge-point label", q.id);
        };
        let row = emb.row(&q.id)?.to_vec();
        let side = match bundle.split_of(&q.id) {
            Split::Train => &mut train,
            Split::Test => &mut test,
        };
        side.0.push(row);
        side.1.push(kp as usize);
    }
    if train.0.is_empty() || test.0.is_empty() {
        bail_arg!("knowledge-point probe needs both train and test questions");
    }
    let n_classes = train.1.iter().chain(&test.1).max().map_or(0, |m| m + 1);
    let probe = train_linear_probe(&train.0, &train.1, n_classes, cfg)?;
    let pred = probe.predict(&test.0)?;
    let (micro, macro_) = f1_scores(&pred, &test.1, n_classes);
    Ok((micro, macro_, test.0.len()))
}

pub fn eval_kp(
    ckpt: &Checkpoint,
    bundle: &CorpusBundle,
    vocab: &TokenVocab,
    corpus: &EncodedCorpus,
    cfg: &EvalConfig,
    dtype: DType,
) -> Result<EvalReport> {
    cfg.validate()?;
    if bundle.questions.iter().any(|q| q.kp.is_none()) {
        bail_arg!("knowledge-point evaluation needs a kp label on every question");
    }
    let emb = embed_corpus(ckpt, vocab, corpus, dtype)?;
    let (micro, macro_, n) = eval_kp_embeddings(&emb, bundle, &cfg.probe)?;
    Ok(EvalReport {
        task: "kp".to_string(),
        subset: "all".to_string(),
        metric: Metric {
            name: "micro_f1".to_string(),
            value: micro,
        },
        metrics: BTreeMap::from([("micro_f1".to_string(), micro), ("macro_f1".to_string(), macro_)]),
        k: cfg.k,
        n_queries: n,
        checkpoint_id: ckpt.manifest.id.clone(),
        seed: ckpt.manifest.seed,
        n_clamped: 0,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(points: &[(&str, [f64; 2])]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            points.iter().map(|p| p.0.to_string()).collect(),
            points.iter().map(|p| p.1.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_candidate_ranks_first() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let emb = matrix(&[("q", [1.0, 0.0]), ("a", [0.0, 1.0]), ("b", [1.0, 0.0]), ("c", [s, s])]);
        let cands: Vec<String> = emb.ids.clone();
        let pred = retrieve_topk(&emb, &["q".to_string()], &cands, 2).unwrap();
        assert_eq!(pred["q"], vec!["b".to_string(), "c".to_string()]);
    }

    #[test]
    fn orthogonal_candidates_fall_back_to_id_order() {
        let emb = matrix(&[("q", [1.0, 0.0]), ("z", [0.0, 1.0]), ("m", [0.0, -1.0]), ("a", [0.0, 1.0])]);
        let pred = retrieve_topk(&emb, &["q".to_string()], &emb.ids.clone(), 3).unwrap();
        assert_eq!(pred["q"], vec!["a".to_string(), "m".to_string(), "z".to_string()]);
    }

    #[test]
    fn subset_membership() {
        assert!(Subset::Tt.keeps(false, false) && !Subset::Tt.keeps(true, false));
        assert!(Subset::Ti.keeps(true, false) && Subset::Ti.keeps(false, true) && !Subset::Ti.keeps(true, true));
        assert!(Subset::Ii.keeps(true, true) && !Subset::Ii.keeps(false, true));
        assert!(Subset::All.keeps(false, true));
        assert_eq!("II".parse::<Subset>().unwrap(), Subset::Ii);
        assert!("xx".parse::<Subset>().is_err());
    }
}
