mod common;

use proptest::prelude::*;
use tqnet::augment::AugmentConfig;
use tqnet::corpus::{EncodedQuestion, GeneratorConfig};
use tqnet::model::{ModelConfig, TqNet};
use tqnet::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use tqnet::pretrain::{
    mask_tokens, mlm_loss, mlm_step, pretrain, BatchSampler, ClPath, ClSettings, ClTrainer, MaskedBatch, NegativeQueue,
    PretrainConfig, Strategy,
};
use tqnet::rng::rng_from_seed;
use tqnet::DType;

use common::{fixture, tiny, tiny_model};

fn settings(m: f64, queue: usize, seed: u64) -> ClSettings {
    ClSettings {
        path: ClPath::Fused,
        tau: 0.2,
        m,
        queue_size: queue,
        n_virtual_devices: 1,
        optimizer: OptimizerConfig::sgd(0.05, 0.9, 5e-4),
        augment: AugmentConfig::default(),
        seed,
    }
}

fn batch<'a>(corpus: &'a [EncodedQuestion], start: usize, n: usize) -> Vec<&'a EncodedQuestion> {
    (0..n).map(|i| &corpus[(start + i) % corpus.len()]).collect()
}

#[test]
fn queue_fills_to_capacity() {
    let f = tiny(1);
    let model = TqNet::new(&f.model, 1, DType::F32).unwrap();
    let mut t = ClTrainer::new(model, settings(0.99, 20, 1)).unwrap();
    let mut lens = Vec::new();
    for s in 0..4 {
        let out = t.step(&batch(&f.corpus.questions, s * 8, 8)).unwrap();
        assert_eq!(out.loss.is_some(), s > 0);
        lens.push(t.queues[0].len());
    }
    assert_eq!(lens, vec![8, 16, 20, 20]);
}

#[test]
fn key_encoder_moves_only_by_momentum() {
    let f = tiny(2);
    let model = TqNet::new(&f.model, 2, DType::F64).unwrap();
    let frozen = model.duplicate().unwrap();
    let mut t = ClTrainer::new(model, settings(1.0, 32, 2)).unwrap();
    for s in 0..3 {
        t.step(&batch(&f.corpus.questions, s * 8, 8)).unwrap();
    }
    let mut query_moved = false;
    for name in frozen.params().names() {
        let before = frozen.params().values(name).unwrap();
        assert_eq!(before, t.state.key.params().values(name).unwrap(), "{name}");
        query_moved |= before != t.state.query.params().values(name).unwrap();
    }
    assert!(query_moved);

    // m = 0.5: key' = 0.5 key + 0.5 query', parameter by parameter.
    let f = tiny(3);
    let model = TqNet::new(&f.model, 3, DType::F64).unwrap();
    let mut t = ClTrainer::new(model, settings(0.5, 32, 3)).unwrap();
    t.step(&batch(&f.corpus.questions, 0, 8)).unwrap();
    let key_before = t.state.key.duplicate().unwrap();
    t.step(&batch(&f.corpus.questions, 8, 8)).unwrap();
    for name in key_before.params().names() {
        let k0 = key_before.params().values(name).unwrap();
        let q1 = t.state.query.params().values(name).unwrap();
        let k1 = t.state.key.params().values(name).unwrap();
        for ((a, b), c) in k0.iter().zip(&q1).zip(&k1) {
            assert!((0.5 * a + 0.5 * b - c).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn step_zero_loss_is_of_order_log_k_plus_one() {
    let f = tiny(4);
    let model = TqNet::new(&f.model, 4, DType::F32).unwrap();
    // Negatives drawn from the untrained encoder itself, so every
    // similarity in the logits is of the same order.
    let t = ClTrainer::new(model.duplicate().unwrap(), settings(0.999, 256, 4)).unwrap();
    let mut filler = ClTrainer::new(model, settings(0.999, 256, 5)).unwrap();
    for s in 0..32 {
        filler.step(&batch(&f.corpus.questions, s * 8, 8)).unwrap();
        if filler.queues[0].len() == 256 {
            break;
        }
    }
    assert_eq!(filler.queues[0].len(), 256);
    let queue = filler.queues[0].clone();
    let mut t = t.with_queues(vec![queue]).unwrap();
    let loss = t.step(&batch(&f.corpus.questions, 0, 16)).unwrap().loss.unwrap();
    // Two views of one question stay closer than two different questions
    // even at initialisation, so the loss sits somewhat below ln(K+1).
    let target = 257f64.ln();
    assert!(loss > 0.7 * target && loss < 1.15 * target, "loss {loss} vs {target}");
}

#[test]
fn random_unit_queue_gives_finite_positive_loss() {
    let f = tiny(5);
    let model = TqNet::new(&f.model, 5, DType::F32).unwrap();
    let queue = NegativeQueue::random(256, f.model.d_model, &mut rng_from_seed(5)).unwrap();
    let mut t = ClTrainer::new(model, settings(0.999, 256, 5)).unwrap().with_queues(vec![queue]).unwrap();
    let loss = t.step(&batch(&f.corpus.questions, 0, 16)).unwrap().loss.unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}

#[test]
fn positives_separate_from_negatives_after_training() {
    let gen = GeneratorConfig {
        n_questions: 600,
        n_kp: 10,
        n_pairs_train: 600,
        n_pairs_test: 800,
        vocab_size: 400,
        max_len: 24,
        ..GeneratorConfig::default()
    };
    let model_cfg = ModelConfig {
        d_model: 32,
        n_heads: 2,
        ..tiny_model()
    };
    for seed in 1..=3 {
        let f = fixture(&gen, &model_cfg, seed);
        let model = TqNet::new(&f.model, seed, DType::F32).unwrap();
        let mut s = settings(0.99, 256, seed);
        s.optimizer = OptimizerConfig::sgd(0.03, 0.9, 5e-4);
        let mut t = ClTrainer::new(model, s).unwrap();
        let mut sampler = BatchSampler::new((0..f.corpus.len()).collect(), seed);
        let mut gaps = Vec::new();
        for step in 0..500 {
            let idx = sampler.next_batch(32);
            let items: Vec<&EncodedQuestion> = idx.iter().map(|&i| &f.corpus.questions[i]).collect();
            let out = t.step(&items).unwrap();
            if step >= 450 {
                gaps.push(out.pos_sim - out.neg_sim.unwrap());
            }
        }
        let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(gap >= 0.1, "seed {seed}: gap {gap}");
    }
}

#[test]
fn mlm_overfit_recovers_masked_tokens() {
    let model_cfg = ModelConfig {
        vocab_size: 40,
        max_len: 12,
        d_model: 32,
        n_heads: 2,
        n_text_layers: 2,
        ..tiny_model()
    };
    let model = TqNet::new(&model_cfg, 7, DType::F32).unwrap();
    let sentence: Vec<u32> = vec![5, 9, 13, 21, 8, 30, 17, 11];
    let q = EncodedQuestion::from_tokens("s", &sentence, 12, vec![]);
    let cfg = OptimizerConfig {
        kind: OptimizerKind::Adamw,
        lr: 3e-3,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let vars = model.params().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Optimizer::new(&cfg, vars).unwrap();
    let mut rng = rng_from_seed(7);
    for _ in 0..600 {
        mlm_step(&model, &mut opt, &[&q], 0.3, &mut rng).unwrap();
    }
    for pos in 0..sentence.len() {
        let mut masked = q.clone();
        masked.token_ids[pos] = tqnet::corpus::MASK_ID;
        let batch = MaskedBatch {
            inputs: vec![masked],
            targets: vec![(0, pos, sentence[pos])],
        };
        let loss = mlm_loss(&model, &batch).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        // Cross-entropy below ln 2 means the original token holds more than
        // half the probability mass, so it is the argmax.
        assert!(loss < std::f64::consts::LN_2, "position {pos}: loss {loss}");
    }
}

#[test]
fn mcl_checkpoint_records_stages() {
    let f = tiny(8);
    let cfg = PretrainConfig {
        strategy: Strategy::Mcl,
        steps: 3,
        mlm_steps: 3,
        batch_size: 8,
        queue_size: 32,
        seed: 8,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain(&f.corpus, &f.vocab, &f.model, &AugmentConfig::default(), &cfg, DType::F32).unwrap();
    assert_eq!(ckpt.manifest.stages, vec!["mlm".to_string(), "cl-uni".to_string()]);
    assert_eq!(ckpt.loss_curve.len(), 3 + 2);
    let again = pretrain(&f.corpus, &f.vocab, &f.model, &AugmentConfig::default(), &cfg, DType::F32).unwrap();
    assert_eq!(ckpt.content_hash().unwrap(), again.content_hash().unwrap());
    assert_eq!(ckpt.manifest.id, again.manifest.id);
}

#[test]
fn seeded_queue_contents_are_reproducible() {
    let f = tiny(9);
    let run = || {
        let model = TqNet::new(&f.model, 9, DType::F32).unwrap();
        let mut t = ClTrainer::new(model, settings(0.99, 24, 9)).unwrap();
        for s in 0..4 {
            t.step(&batch(&f.corpus.questions, s * 8, 8)).unwrap();
        }
        t.queues[0].hash()
    };
    assert_eq!(run(), run());
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn queue_is_fifo_and_bounded(cap in 1usize..12, batches in prop::collection::vec(1usize..6, 1..10), seed in 0u64..1000) {
        let mut q = NegativeQueue::new(cap, 3).unwrap();
        let mut all: Vec<Vec<f64>> = Vec::new();
        let mut rng = rng_from_seed(seed);
        for &b in &batches {
            let b = b.min(cap);
            let keys: Vec<Vec<f64>> = (0..b)
                .map(|_| unit((0..3).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0) + 1e-3).collect()))
                .collect();
            q.enqueue(&keys).unwrap();
            all.extend(keys);
            prop_assert!(q.len() <= cap);
            prop_assert_eq!(q.len(), all.len().min(cap));
            let expected: Vec<&[f64]> = all[all.len() - q.len()..].iter().map(|v| v.as_slice()).collect();
            prop_assert_eq!(q.entries(), expected);
            for e in q.entries() {
                let n: f64 = e.iter().map(|x| x * x).sum();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masking_only_touches_real_tokens(len in 1usize..12, p in 0.0f64..1.0, seed in 0u64..1000) {
        let toks: Vec<u32> = (0..len as u32).map(|i| 3 + i % 20).collect();
        let q = EncodedQuestion::from_tokens("x", &toks, 12, vec![]);
        let m = mask_tokens(&[&q], p, 30, &mut rng_from_seed(seed)).unwrap();
        for &(_, pos, orig) in &m.targets {
            prop_assert!(pos < len);
            prop_assert_eq!(orig, toks[pos]);
        }
        prop_assert_eq!(&m.inputs[0].token_ids[len..], &q.token_ids[len..]);
        prop_assert_eq!(&m.inputs[0].mask, &q.mask);
    }
}
