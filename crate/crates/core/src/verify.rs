//! Fast self-checks: loss oracles, momentum contraction, retrieval metric,
//! gradient checks and determinism of a tiny pipeline.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::augment::AugmentConfig;
use crate::batch::EncodedBatch;
use crate::corpus::{build_vocab, generate_synthetic_corpus, EncodedCorpus, GeneratorConfig, SimilarityGroundTruth};
use crate::error::Result;
use crate::evaluate::{embed_corpus, eval_similar_embeddings, precision_at_k, PredictionMap, Scorer, Subset};
use crate::finetune::{scl_loss, LabelMatrix};
use crate::model::{Mode, ModelConfig, ParamStore, TqNet};
use crate::pretrain::{info_nce, info_nce_batch, momentum_update, pretrain, NegativeQueue, PretrainConfig, Strategy};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Momentum coefficients exercised by the contraction check.
    pub momentum_values: Vec<f64>,
    pub seed: u64,
    /// Skip the slower gradient and pipeline checks.
    pub quick: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            momentum_values: vec![0.0, 0.5, 0.999, 1.0 - 1e-6],
            seed: 0,
            quick: false,
        }
    }
}

pub fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE written out term by term.
pub fn info_nce_direct(q: &[f64], k_pos: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    let pos = (dot(q, k_pos) / tau).exp();
    let neg: f64 = negatives.iter().map(|k| (dot(q, k) / tau).exp()).sum();
    -(pos / (pos + neg)).ln()
}

/// Supervised contrastive loss written out pair by pair.
pub fn scl_direct(emb: &[Vec<f64>], labels: &[Vec<u8>], tau: f64) -> f64 {
    let b = emb.len();
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..b {
        for j in 0..b {
            if labels[i][j] != 1 {
                continue;
            }
            let pos = (dot(&emb[i], &emb[j]) / tau).exp();
            let neg: f64 = (0..b)
                .filter(|&o| o != i && labels[i][o] == 0)
                .map(|o| (dot(&emb[i], &emb[o]) / tau).exp())
                .sum();
            total += -(pos / (pos + neg)).ln();
            n += 1;
        }
    }
    total / n as f64
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

pub fn check_info_nce(seed: u64, n: usize) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let d = rng.random_range(2..16);
        let k = rng.random_range(1..20);
        let tau = rng.random_range(0.05..2.0);
        let q = unit_vector(d, &mut rng);
        let kp = unit_vector(d, &mut rng);
        let queue = NegativeQueue::random(k, d, &mut rng)?;
        let got = info_nce(&q, &kp, &queue, tau)?;
        let want = info_nce_direct(&q, &kp, &queue.entries(), tau);
        worst = worst.max((got - want).abs());
    }
    // Uniform case: q orthogonal to k+ and to every negative.
    let mut uniform: f64 = 0.0;
    for k in [1usize, 3, 16, 255] {
        let d = k + 2;
        let mut queue = NegativeQueue::new(k, d)?;
        let negs: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i + 2] = 1.0;
                v
            })
            .collect();
        queue.enqueue(&negs)?;
        let mut q = vec![0.0; d];
        q[0] = 1.0;
        let mut kp = vec![0.0; d];
        kp[1] = 1.0;
        let l = info_nce(&q, &kp, &queue, 0.2)?;
        uniform = uniform.max((l - ((k + 1) as f64).ln()).abs());
    }
    Ok((
        worst < 1e-6 && uniform < 1e-9,
        format!("max |Δ| {worst:.2e} over {n} instances; uniform-case |Δ| {uniform:.2e}"),
    ))
}

pub fn check_momentum(seed: u64, ms: &[f64]) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for &m in ms {
        for _ in 0..5 {
            let mut k = ParamStore::new(DType::F64);
            let mut q = ParamStore::new(DType::F64);
            for (name, shape) in [("a", vec![7, 5]), ("b", vec![11]), ("c", vec![2, 3, 4])] {
                k.normal(name, shape.clone(), 1.0, &mut rng)?;
                q.normal(name, shape, 1.0, &mut rng)?;
            }
            let flat = |ps: &ParamStore| -> Result<Vec<f64>> {
                let mut out = Vec::new();
                for n in ["a", "b", "c"] {
                    out.extend(ps.values(n)?);
                }
                Ok(out)
            };
            let (k0, q0) = (flat(&k)?, flat(&q)?);
            momentum_update(&k, &q, m)?;
            let (k1, q1) = (flat(&k)?, flat(&q)?);
            if q1 != q0 {
                return Ok((false, "query parameters changed".to_string()));
            }
            let before = k0.iter().zip(&q0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let after = k1.iter().zip(&q0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rel = (after - m * before).abs() / before.max(1e-300);
            worst = worst.max(rel);
        }
    }
    Ok((worst < 1e-12, format!("max relative contraction error {worst:.2e} for m in {ms:?}")))
}

fn random_labels(b: usize, rng: &mut Rng) -> Vec<Vec<u8>> {
    loop {
        let mut m = vec![vec![0u8; b]; b];
        for i in 0..b {
            for j in i + 1..b {
                if rng.random_bool(0.3) {
                    m[i][j] = 1;
                    m[j][i] = 1;
                }
            }
        }
        if m.iter().flatten().any(|&v| v == 1) {
            return m;
        }
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows[0].len();
    Ok(Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu)?)
}

pub fn check_scl(seed: u64, n: usize) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let b = rng.random_range(2..=8);
        let d = rng.random_range(2..10);
        let tau = rng.random_range(0.05..2.0);
        let emb: Vec<Vec<f64>> = (0..b).map(|_| unit_vector(d, &mut rng)).collect();
        let labels = random_labels(b, &mut rng);
        let got = scl_loss(&rows_tensor(&emb)?, &LabelMatrix::from_rows(&labels)?, tau)?.to_scalar::<f64>()?;
        worst = worst.max((got - scl_direct(&emb, &labels, tau)).abs());
    }
    // Single positive per row, negatives = rest of batch → InfoNCE.
    let mut reduce: f64 = 0.0;
    for _ in 0..n / 4 {
        let half = rng.random_range(1..=4);
        let d = rng.random_range(2..10);
        let tau = rng.random_range(0.05..2.0);
        let emb: Vec<Vec<f64>> = (0..2 * half).map(|_| unit_vector(d, &mut rng)).collect();
        let mut labels = vec![vec![0u8; 2 * half]; 2 * half];
        for p in 0..half {
            labels[2 * p][2 * p + 1] = 1;
            labels[2 * p + 1][2 * p] = 1;
        }
        let got = scl_loss(&rows_tensor(&emb)?, &LabelMatrix::from_rows(&labels)?, tau)?.to_scalar::<f64>()?;
        let mut want = 0.0;
        for i in 0..2 * half {
            let j = i ^ 1;
            let negs: Vec<&[f64]> = (0..2 * half).filter(|&o| o != i && o != j).map(|o| emb[o].as_slice()).collect();
            want += info_nce_direct(&emb[i], &emb[j], &negs, tau);
        }
        want /= (2 * half) as f64;
        reduce = reduce.max((got - want).abs());
    }
    Ok((
        worst < 1e-6 && reduce < 1e-6,
        format!("max |Δ| {worst:.2e} vs pairwise oracle; {reduce:.2e} vs InfoNCE reduction"),
    ))
}

pub fn check_precision(seed: u64, n: usize) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let pool = rng.random_range(8..30);
        let k = rng.random_range(1..6);
        let n_queries = rng.random_range(1..6);
        let mut pairs = Vec::new();
        let mut pred = PredictionMap::new();
        let mut brute = 0.0;
        for qi in 0..n_queries {
            let q = format!("q{qi}");
            let mut gt_set = BTreeSet::new();
            while gt_set.len() < rng.random_range(1..8) {
                gt_set.insert(format!("c{}", rng.random_range(0..pool)));
            }
            for c in &gt_set {
                pairs.push((q.clone(), c.clone()));
            }
            let mut ranked: Vec<String> = (0..pool).map(|c| format!("c{c}")).collect();
            for i in (1..ranked.len()).rev() {
                ranked.swap(i, rng.random_range(0..=i));
            }
            ranked.truncate(k);
            let hits = ranked.iter().filter(|c| gt_set.contains(*c)).count();
            brute += hits as f64 / k.min(gt_set.len()) as f64;
            pred.insert(q, ranked);
        }
        let gt: SimilarityGroundTruth = pairs.into_iter().collect();
        let got = precision_at_k(&pred, &gt, k)?;
        if got != brute / n_queries as f64 {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches in {n} random instances")))
}

/// Central-difference check of `f` against its autodiff gradient on up to
/// `per_var` coordinates of each variable. Returns the worst relative error,
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(vars: &[Var], f: impl Fn() -> Result<Tensor>, per_var: usize, eps: f64, rng: &mut Rng) -> Result<f64> {
    let loss = f()?;
    let grads = loss.backward()?;
    let mut worst: f64 = 0.0;
    for var in vars {
        let Some(g) = grads.get(var.as_tensor()) else {
            continue;
        };
        let g: Vec<f64> = g.flatten_all()?.to_vec1()?;
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let n = base.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let eval_at = |v: f64| -> Result<f64> {
                let mut p = base.clone();
                p[i] = v;
                var.set(&Tensor::from_vec(p, var.shape(), &Device::Cpu)?)?;
                Ok(f()?.to_scalar::<f64>()?)
            };
            let hi = eval_at(base[i] + eps)?;
            let lo = eval_at(base[i] - eps)?;
            var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu)?)?;
            let numeric = (hi - lo) / (2.0 * eps);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Small f64 model used by the gradient check.
pub fn gradient_check_model(seed: u64) -> Result<TqNet> {
    let cfg = ModelConfig {
        d_model: 16,
        n_text_layers: 2,
        n_fusion_layers: 2,
        n_heads: 2,
        ff_mult: 2,
        vocab_size: 20,
        max_len: 8,
        max_images: 3,
        visual_channels: vec![4, 8],
        image_size: 8,
        ..ModelConfig::default()
    };
    TqNet::new(&cfg, seed, DType::F64)
}

pub fn gradient_check_batch(seed: u64) -> Result<EncodedBatch> {
    use crate::corpus::EncodedQuestion;
    use ndarray::Array3;
    let mut rng = rng_from_seed(seed);
    let mut img = || Array3::from_shape_fn((8, 8, 3), |_| rng.random_range(0.0f32..1.0));
    let items = [
        EncodedQuestion::from_tokens("a", &[3, 4, 5, 6], 8, vec![img(), img()]),
        EncodedQuestion::from_tokens("b", &[7, 8], 8, vec![]),
        EncodedQuestion::from_tokens("c", &[9, 10, 11, 12, 13, 14], 8, vec![img()]),
    ];
    let refs: Vec<&EncodedQuestion> = items.iter().collect();
    EncodedBatch::from_questions(&refs, DType::F64, true)
}

pub fn check_model_gradients(seed: u64) -> Result<(bool, String)> {
    let model = gradient_check_model(seed)?;
    let batch = gradient_check_batch(seed)?;
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let negs = rows_tensor(&(0..6).map(|_| unit_vector(16, &mut rng)).collect::<Vec<_>>())?;
    let target = rows_tensor(&(0..3).map(|_| unit_vector(16, &mut rng)).collect::<Vec<_>>())?;
    let vars: Vec<Var> = model.params().iter().map(|(_, v)| v.clone()).collect();
    let worst = gradient_check(
        &vars,
        || info_nce_batch(&model.forward(&batch, Mode::Eval)?, &target, &negs, 0.2),
        3,
        1e-5,
        &mut rng,
    )?;
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over model parameters")))
}

pub fn check_loss_gradients(seed: u64) -> Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let q = Var::from_tensor(&rows_tensor(&(0..4).map(|_| unit_vector(6, &mut rng)).collect::<Vec<_>>())?)?;
    let k = rows_tensor(&(0..4).map(|_| unit_vector(6, &mut rng)).collect::<Vec<_>>())?;
    let negs = rows_tensor(&(0..5).map(|_| unit_vector(6, &mut rng)).collect::<Vec<_>>())?;
    let a = gradient_check(&[q.clone()], || info_nce_batch(q.as_tensor(), &k, &negs, 0.3), 100, 1e-6, &mut rng)?;
    let e = Var::from_tensor(&rows_tensor(&(0..6).map(|_| unit_vector(5, &mut rng)).collect::<Vec<_>>())?)?;
    let labels = LabelMatrix::from_rows(&random_labels(6, &mut rng))?;
    let b = gradient_check(&[e.clone()], || scl_loss(e.as_tensor(), &labels, 0.3), 100, 1e-6, &mut rng)?;
    Ok((
        a < 1e-4 && b < 1e-4,
        format!("max relative error {a:.2e} (InfoNCE), {b:.2e} (supervised contrastive)"),
    ))
}

/// Tiny generate → pretrain → evaluate run; returns the metric and the
/// embedding hash.
pub fn tiny_pipeline(seed: u64) -> Result<(f64, String)> {
    let gen = GeneratorConfig {
        n_questions: 120,
        n_kp: 4,
        n_pairs_train: 100,
        n_pairs_test: 200,
        vocab_size: 200,
        max_len: 16,
        ..GeneratorConfig::default()
    };
    let bundle = generate_synthetic_corpus(&gen, seed)?;
    let vocab = build_vocab(&bundle, 1)?;
    let model_cfg = ModelConfig {
        d_model: 16,
        n_text_layers: 1,
        n_fusion_layers: 1,
        n_heads: 2,
        ff_mult: 2,
        visual_channels: vec![4, 8],
        image_size: 16,
        ..ModelConfig::default()
    }
    .resolved(vocab.len(), gen.max_len);
    let corpus = EncodedCorpus::encode(&bundle, &vocab, gen.max_len, model_cfg.image_size)?;
    let cfg = PretrainConfig {
        strategy: Strategy::Mcl,
        queue_size: 32,
        batch_size: 8,
        steps: 4,
        mlm_steps: 4,
        seed,
        ..PretrainConfig::default()
    };
    let ckpt = pretrain(&corpus, &vocab, &model_cfg, &AugmentConfig::default(), &cfg, DType::F32)?;
    let emb = embed_corpus(&ckpt, &vocab, &corpus, DType::F32)?;
    let out = eval_similar_embeddings(&emb, &Scorer::Cosine, &bundle, Subset::All, 5)?;
    Ok((out.precision, emb.hash()))
}

pub fn check_determinism(seed: u64) -> Result<(bool, String)> {
    let (a, ha) = tiny_pipeline(seed)?;
    let (b, hb) = tiny_pipeline(seed)?;
    Ok((
        a.to_bits() == b.to_bits() && ha == hb,
        format!("P@5 {a} vs {b}; embeddings {} vs {}", &ha[..12], &hb[..12]),
    ))
}

/// Runs every check; failures are reported, never raised.
pub fn run_verification(opts: &VerifyOptions) -> VerifyReport {
    let s = opts.seed;
    let mut checks = vec![
        check("info_nce_oracle", || check_info_nce(s, 1000)),
        check("momentum_contraction", || check_momentum(s, &opts.momentum_values)),
        check("scl_oracle", || check_scl(s, 200)),
        check("precision_at_k_brute_force", || check_precision(s, 1000)),
        check("loss_gradients", || check_loss_gradients(s)),
    ];
    if !opts.quick {
        checks.push(check("model_gradients", || check_model_gradients(s)));
        checks.push(check("pipeline_determinism", || check_determinism(s)));
    }
    VerifyReport { checks }
}
