use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::SimilarityGroundTruth;
use crate::error::{bail_arg, bail_integrity, Result};

/// Query id → ranked candidate ids.
pub type PredictionMap = BTreeMap<String, Vec<String>>;

/// Ranks candidates by descending score, ascending id on ties, skipping the
/// query itself, and keeps the first `k`.
pub fn rank_candidates(query: &str, candidates: &[String], scores: &[f64], k: usize) -> Vec<String> {
    let mut order: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i] != query).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| candidates[a].cmp(&candidates[b]))
    });
    order.into_iter().take(k).map(|i| candidates[i].clone()).collect()
}

/// Top-`k` retrieval with an arbitrary scoring function
/// `score(query, candidates) -> one score per candidate`.
pub fn retrieve_topk_by(
    queries: &[String],
    candidates: &[String],
    k: usize,
    mut score: impl FnMut(&str, &[String]) -> Result<Vec<f64>>,
) -> Result<PredictionMap> {
    if k == 0 {
        bail_arg!("k must be at least 1");
    }
    if k + 1 > candidates.len() {
        bail_arg!("k = {k} needs at least {} candidates, got {}", k + 1, candidates.len());
    }
    let mut out = PredictionMap::new();
    for q in queries {
        let scores = score(q, candidates)?;
        if scores.len() != candidates.len() {
            bail_arg!("scorer returned {} scores for {} candidates", scores.len(), candidates.len());
        }
        out.insert(q.clone(), rank_candidates(q, candidates, &scores, k));
    }
    Ok(out)
}

/// |top-k prediction ∩ similars| / min(k, |similars|) for one query.
pub fn query_precision(pred: &[String], similars: &BTreeSet<String>, k: usize) -> Result<f64> {
    let denom = k.min(similars.len());
    if denom == 0 {
        bail_integrity!("query has no ground-truth similars");
    }
    let hits = pred.iter().take(k).filter(|p| similars.contains(*p)).count();
    Ok(hits as f64 / denom as f64)
}

/// Mean over queries of the per-query precision at `k`.
pub fn precision_at_k(pred: &PredictionMap, gt: &SimilarityGroundTruth, k: usize) -> Result<f64> {
    if pred.is_empty() {
        bail_arg!("empty prediction map");
    }
    if k == 0 {
        bail_arg!("k must be at least 1");
    }
    let mut sum = 0.0;
    for (q, ranked) in pred {
        let Some(similars) = gt.similars(q) else {
            bail_integrity!("query {q:?} missing from ground truth");
        };
        sum += query_precision(ranked, similars, k)?;
    }
    Ok(sum / pred.len() as f64)
}
