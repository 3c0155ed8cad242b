use std::collections::{BTreeMap, BTreeSet};

use super::LabeledPair;
use crate::error::{bail_arg, bail_integrity, Result};

/// Symmetric, irreflexive "is similar to" relation over question ids.
///
/// Label-0 pairs are kept aside (in input order) for the pair-classification
/// baseline; they never enter the similarity map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimilarityGroundTruth {
    map: BTreeMap<String, BTreeSet<String>>,
    negatives: Vec<(String, String)>,
}

impl SimilarityGroundTruth {
    pub fn similars(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.map.get(id)
    }

    pub fn is_similar(&self, a: &str, b: &str) -> bool {
        self.map.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn negatives(&self) -> &[(String, String)] {
        &self.negatives
    }

    /// Ids with at least one similar question, ascending.
    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Unordered positive pairs `(a, b)` with `a < b`.
    pub fn positive_pairs(&self) -> Vec<(String, String)> {
        self.map
            .iter()
            .flat_map(|(a, set)| set.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone())))
            .collect()
    }

    fn insert(&mut self, a: &str, b: &str) {
        self.map.entry(a.to_string()).or_default().insert(b.to_string());
        self.map.entry(b.to_string()).or_default().insert(a.to_string());
    }
}

impl FromIterator<(String, String)> for SimilarityGroundTruth {
    /// Builds a map from positive pairs; self-pairs are dropped.
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        let mut gt = SimilarityGroundTruth::default();
        for (a, b) in iter {
            if a != b {
                gt.insert(&a, &b);
            }
        }
        gt
    }
}

/// Builds the similarity map from labeled pairs, symmetrizing label-1 pairs.
pub fn ground_truth_map(pairs: &[LabeledPair]) -> Result<SimilarityGroundTruth> {
    let mut gt = SimilarityGroundTruth::default();
    for p in pairs {
        if p.a == p.b {
            bail_integrity!("self-pair ({}, {})", p.a, p.b);
        }
        match p.label {
            1 => gt.insert(&p.a, &p.b),
            0 => gt.negatives.push((p.a.clone(), p.b.clone())),
            other => bail_arg!("pair label must be 0 or 1, got {other}"),
        }
    }
    Ok(gt)
}
