use std::collections::BTreeSet;

use proptest::prelude::*;
use tqnet::corpus::{
    build_vocab, generate_synthetic_corpus, ground_truth_map, load_corpus, write_corpus, EncodedCorpus, GeneratorConfig,
};
use tqnet::corpus::LabeledPair;
use tqnet::rng::rng_from_seed;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        n_questions: 200,
        n_kp: 10,
        n_pairs_train: 200,
        n_pairs_test: 400,
        vocab_size: 400,
        ..GeneratorConfig::default()
    }
}

#[test]
fn write_then_load_round_trips() {
    let bundle = generate_synthetic_corpus(&small(), 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&bundle, dir.path()).unwrap();
    let loaded = load_corpus(dir.path()).unwrap();
    assert_eq!(bundle, loaded);
    for q in bundle.questions.iter().filter(|q| q.has_images()) {
        for r in &q.images {
            assert_eq!(bundle.load_image(r).unwrap(), loaded.load_image(r).unwrap());
        }
    }
    let vocab = build_vocab(&bundle, 1).unwrap();
    let a = EncodedCorpus::encode(&bundle, &vocab, 32, 16).unwrap();
    let b = EncodedCorpus::encode(&loaded, &vocab, 32, 16).unwrap();
    assert_eq!(a.questions, b.questions);
}

#[test]
fn default_corpus_image_share_near_thirty_percent() {
    let bundle = generate_synthetic_corpus(&GeneratorConfig::default(), 1).unwrap();
    assert_eq!(bundle.len(), 2000);
    let share = bundle.questions.iter().filter(|q| q.has_images()).count() as f64 / bundle.len() as f64;
    assert!((share - 0.30).abs() <= 0.03, "image share {share}");
    assert!(bundle.questions.iter().all(|q| !q.text.is_empty() && q.images.len() <= 10));
}

#[test]
fn test_split_protocol() {
    let bundle = generate_synthetic_corpus(&GeneratorConfig::default(), 2).unwrap();
    let gt = bundle.test_ground_truth().unwrap();
    for id in bundle.test_ids() {
        assert!(gt.similars(&id).map_or(0, |s| s.len()) >= 5, "{id}");
    }
    let key = |p: &LabeledPair| {
        if p.a < p.b {
            (p.a.clone(), p.b.clone())
        } else {
            (p.b.clone(), p.a.clone())
        }
    };
    let train: BTreeSet<_> = bundle.pairs_train.iter().map(key).collect();
    assert!(bundle.pairs_test.iter().all(|p| !train.contains(&key(p))));
}

fn overlap(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
}

#[test]
fn similar_pairs_share_more_vocabulary() {
    let bundle = generate_synthetic_corpus(&GeneratorConfig::default(), 3).unwrap();
    let text = |id: &str| &bundle.get(id).unwrap().text;
    let similar: Vec<f64> = bundle
        .pairs_train
        .iter()
        .filter(|p| p.label == 1)
        .take(1000)
        .map(|p| overlap(text(&p.a), text(&p.b)))
        .collect();
    assert_eq!(similar.len(), 1000);
    let mut rng = rng_from_seed(3);
    let mut cross = Vec::new();
    while cross.len() < 1000 {
        let a = &bundle.questions[rand::Rng::random_range(&mut rng, 0..bundle.len())];
        let b = &bundle.questions[rand::Rng::random_range(&mut rng, 0..bundle.len())];
        if a.kp != b.kp {
            cross.push(overlap(&a.text, &b.text));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&similar) > mean(&cross), "{} vs {}", mean(&similar), mean(&cross));
}

#[test]
fn generator_seeds() {
    let a = generate_synthetic_corpus(&small(), 9).unwrap();
    let b = generate_synthetic_corpus(&small(), 9).unwrap();
    let c = generate_synthetic_corpus(&small(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.questions, c.questions);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ground_truth_symmetric_and_irreflexive(raw in prop::collection::vec((0u8..12, 0u8..12, 0u8..2), 0..40)) {
        let pairs: Vec<LabeledPair> = raw
            .iter()
            .filter(|(a, b, _)| a != b)
            .map(|&(a, b, l)| LabeledPair::new(format!("q{a}"), format!("q{b}"), l))
            .collect();
        let gt = ground_truth_map(&pairs).unwrap();
        for (id, sims) in gt.iter() {
            prop_assert!(!sims.contains(id));
            for s in sims {
                prop_assert!(gt.is_similar(s, id));
            }
        }
        for p in &pairs {
            if p.label == 1 {
                prop_assert!(gt.is_similar(&p.a, &p.b));
            }
        }
    }
}
