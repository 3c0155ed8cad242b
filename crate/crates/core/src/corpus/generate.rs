//! Seeded synthetic question corpus.
//!
//! Every question belongs to a latent group `(kp, template)`. Its text mixes
//! knowledge-point topic tokens, template tokens, formula symbols, frequent
//! filler tokens and uniform background tokens. Questions with images carry
//! no template tokens in their text; the template is visible only in their
//! figures, which are drawn from a per-group shape/colour style.
//! Similar pairs are pairs from the same group.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CorpusBundle, ImageSource, LabeledPair, Question, QuestionType, DEFAULT_MAX_IMAGES};
use crate::error::{bail_arg, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

const FORMULA_TOKENS: [&str; 24] = [
    "x", "y", "z", "=", "+", "-", "*", "/", "^", "(", ")", "<", ">", "sqrt", "frac", "pi", "0",
    "1", "2", "3", "4", "5", "6", "7",
];
const QTYPE_MARKERS: [&str; 3] = ["choose", "fill", "solve"];
const N_FILLER: usize = 32;
const TOPIC_PER_KP: usize = 10;
const TOKENS_PER_TEMPLATE: usize = 8;
const MIN_BACKGROUND: usize = 50;
/// A test group of 6 gives every member 5 similars.
const MIN_TEST_GROUP: usize = 6;
const RENDER_SIZE: u32 = 48;
const N_SHAPES: usize = 8;
const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.3, 0.85],
    [0.95, 0.6, 0.1],
    [0.55, 0.2, 0.7],
    [0.1, 0.6, 0.65],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_questions: usize,
    pub n_kp: usize,
    /// Fraction of questions carrying at least one image.
    pub image_fraction: f64,
    pub n_pairs_train: usize,
    pub n_pairs_test: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
    pub templates_per_kp: usize,
    /// Target fraction of each group placed in the test split.
    pub test_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_questions: 2000,
            n_kp: 20,
            image_fraction: 0.30,
            n_pairs_train: 4000,
            n_pairs_test: 4000,
            vocab_size: 1000,
            max_len: 32,
            seed: 0,
            templates_per_kp: 2,
            test_fraction: 0.25,
        }
    }
}

impl GeneratorConfig {
    pub fn n_groups(&self) -> usize {
        self.n_kp * self.templates_per_kp
    }

    fn required_vocab(&self) -> usize {
        3 + FORMULA_TOKENS.len()
            + QTYPE_MARKERS.len()
            + N_FILLER
            + self.n_kp * TOPIC_PER_KP
            + self.n_groups() * TOKENS_PER_TEMPLATE
            + MIN_BACKGROUND
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_questions < 2 {
            bail_arg!("n_questions must be at least 2");
        }
        if self.n_kp == 0 || self.templates_per_kp == 0 {
            bail_arg!("n_kp and templates_per_kp must be positive");
        }
        if !(0.0..=1.0).contains(&self.image_fraction) {
            bail_arg!("image_fraction must lie in [0, 1], got {}", self.image_fraction);
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail_arg!("test_fraction must lie in (0, 1), got {}", self.test_fraction);
        }
        if self.max_len < 4 {
            bail_arg!("max_len must be at least 4");
        }
        if self.vocab_size < self.required_vocab() {
            bail_arg!(
                "vocab_size {} too small for {} knowledge points x {} templates (need {})",
                self.vocab_size,
                self.n_kp,
                self.templates_per_kp,
                self.required_vocab()
            );
        }
        Ok(())
    }
}

struct Inventory {
    topic: Vec<Vec<String>>,
    template: Vec<Vec<String>>,
    filler: Vec<String>,
    background: Vec<String>,
}

impl Inventory {
    fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Self {
        let n_words = cfg.vocab_size - 3 - FORMULA_TOKENS.len() - QTYPE_MARKERS.len();
        let mut names: Vec<String> = (0..n_words).map(|i| format!("w{i:04}")).collect();
        names.shuffle(rng);
        let mut it = names.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<_>>();
        let filler = take(N_FILLER);
        let topic = (0..cfg.n_kp).map(|_| take(TOPIC_PER_KP)).collect();
        let template = (0..cfg.n_groups()).map(|_| take(TOKENS_PER_TEMPLATE)).collect();
        let background = take(usize::MAX);
        Self {
            topic,
            template,
            filler,
            background,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FigureStyle {
    shape: usize,
    color: [f32; 3],
    count: usize,
}

fn group_styles(n_groups: usize, rng: &mut Rng) -> Vec<FigureStyle> {
    let n_combos = N_SHAPES * PALETTE.len();
    let mut combos: Vec<usize> = (0..n_combos).collect();
    combos.shuffle(rng);
    (0..n_groups)
        .map(|g| {
            let c = combos[g % n_combos];
            FigureStyle {
                shape: c % N_SHAPES,
                color: PALETTE[c / N_SHAPES],
                count: 1 + (g / n_combos) % 3,
            }
        })
        .collect()
}

/// Zipf-like pick: index `j` with weight `1/(j+1)`.
fn zipf_pick<'a>(items: &'a [String], rng: &mut Rng) -> &'a str {
    let total: f64 = (1..=items.len()).map(|j| 1.0 / j as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (j, item) in items.iter().enumerate() {
        u -= 1.0 / (j + 1) as f64;
        if u <= 0.0 {
            return item;
        }
    }
    &items[items.len() - 1]
}

fn sample_text(
    inv: &Inventory,
    kp: usize,
    group: usize,
    qtype: QuestionType,
    with_images: bool,
    max_len: usize,
    rng: &mut Rng,
) -> Vec<String> {
    let len = rng.random_range((max_len / 2).max(4)..=max_len);
    let marker = match qtype {
        QuestionType::Choice => QTYPE_MARKERS[0],
        QuestionType::Blank => QTYPE_MARKERS[1],
        QuestionType::Calc => QTYPE_MARKERS[2],
    };
    // template, topic, formula, filler; remainder is background
    let probs: [f64; 4] = if with_images {
        [0.0, 0.17, 0.15, 0.42]
    } else {
        [0.18, 0.17, 0.15, 0.30]
    };
    let mut text = Vec::with_capacity(len);
    text.push(marker.to_string());
    while text.len() < len {
        let u: f64 = rng.random();
        let tok = if u < probs[0] {
            inv.template[group].choose(rng).unwrap().as_str()
        } else if u < probs[0] + probs[1] {
            zipf_pick(&inv.topic[kp], rng)
        } else if u < probs[0] + probs[1] + probs[2] {
            FORMULA_TOKENS.choose(rng).unwrap()
        } else if u < probs.iter().sum::<f64>() {
            zipf_pick(&inv.filler, rng)
        } else {
            inv.background.choose(rng).unwrap().as_str()
        };
        text.push(tok.to_string());
    }
    text
}

fn render_figure(style: FigureStyle, rng: &mut Rng) -> RgbImage {
    let size = RENDER_SIZE as f32;
    let mut canvas = vec![[0.96f32, 0.96, 0.96]; (RENDER_SIZE * RENDER_SIZE) as usize];
    let radius_base = if style.count == 1 { 11.0 } else { 7.0 };
    for _ in 0..style.count {
        let r = radius_base + rng.random_range(-2.0f32..2.0);
        let cx = rng.random_range(r + 1.0..size - r - 1.0);
        let cy = rng.random_range(r + 1.0..size - r - 1.0);
        for py in 0..RENDER_SIZE {
            for px in 0..RENDER_SIZE {
                let dx = px as f32 + 0.5 - cx;
                let dy = py as f32 + 0.5 - cy;
                let inside = match style.shape {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                    2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
                    3 => {
                        let d = (dx * dx + dy * dy).sqrt();
                        d <= r && d >= r * 0.6
                    }
                    4 => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
                    5 => dx.abs() <= r && dy.abs() <= r && ((dy + r) / (r * 0.5)) as i32 % 2 == 0,
                    6 => dx.abs() + dy.abs() <= r,
                    _ => (dx - dy).abs() <= r * 0.25 && dx.abs() <= r || (dx + dy).abs() <= r * 0.25 && dx.abs() <= r,
                };
                if inside {
                    canvas[(py * RENDER_SIZE + px) as usize] = style.color;
                }
            }
        }
    }
    RgbImage::from_fn(RENDER_SIZE, RENDER_SIZE, |x, y| {
        let c = canvas[(y * RENDER_SIZE + x) as usize];
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn n_images(rng: &mut Rng) -> usize {
    // mean ≈ 1.6 images per illustrated question
    const WEIGHTS: [f64; 5] = [0.6, 0.22, 0.1, 0.05, 0.03];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return (i + 1).min(DEFAULT_MAX_IMAGES);
        }
    }
    WEIGHTS.len()
}

fn sample_qtype(rng: &mut Rng) -> QuestionType {
    // choice : blank filling : calculation proportions of the reference dataset
    let u: f64 = rng.random::<f64>() * (86753.0 + 42892.0 + 49225.0);
    if u < 86753.0 {
        QuestionType::Choice
    } else if u < 86753.0 + 42892.0 {
        QuestionType::Blank
    } else {
        QuestionType::Calc
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Samples `n` distinct cross-group pairs from `ids`.
fn sample_negatives(
    ids: &[(String, usize)],
    n: usize,
    rng: &mut Rng,
    what: &str,
) -> Result<Vec<LabeledPair>> {
    let mut per_group: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, g) in ids {
        *per_group.entry(*g).or_default() += 1;
    }
    let total = ids.len() * ids.len().saturating_sub(1) / 2;
    let same: usize = per_group.values().map(|c| c * (c - 1) / 2).sum();
    if n > total - same {
        bail_arg!("cannot draw {n} {what} negative pairs: only {} cross-group pairs exist", total - same);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, ga) = ids.choose(rng).unwrap();
        let (b, gb) = ids.choose(rng).unwrap();
        if ga == gb || a == b {
            continue;
        }
        let key = ordered(a, b);
        if seen.insert(key.clone()) {
            out.push(LabeledPair::new(key.0, key.1, 0));
        }
    }
    Ok(out)
}

/// Generates a corpus that is a pure function of `cfg` and `seed`.
///
/// `seed` overrides `cfg.seed`; the echoed config records the seed used.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<CorpusBundle> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let mut rng = rng_from_seed(derive_seed(seed, "generator"));
    let inv = Inventory::new(&cfg, &mut rng);
    let n_groups = cfg.n_groups();
    let styles = group_styles(n_groups, &mut rng);

    let mut groups: Vec<usize> = (0..cfg.n_questions).map(|i| i % n_groups).collect();
    groups.shuffle(&mut rng);
    let n_illustrated = (cfg.image_fraction * cfg.n_questions as f64).round() as usize;
    let mut illustrated = vec![false; cfg.n_questions];
    let mut order: Vec<usize> = (0..cfg.n_questions).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_illustrated] {
        illustrated[i] = true;
    }

    let mut questions = Vec::with_capacity(cfg.n_questions);
    let mut store = BTreeMap::new();
    for (i, &group) in groups.iter().enumerate() {
        let kp = group / cfg.templates_per_kp;
        let id = format!("q{i:05}");
        let qtype = sample_qtype(&mut rng);
        let text = sample_text(&inv, kp, group, qtype, illustrated[i], cfg.max_len, &mut rng);
        let mut images = Vec::new();
        if illustrated[i] {
            for j in 0..n_images(&mut rng) {
                let reference = format!("images/{id}_{j}.png");
                store.insert(reference.clone(), render_figure(styles[group], &mut rng));
                images.push(reference);
            }
        }
        questions.push(Question {
            id,
            text,
            images,
            kp: Some(kp as u32),
            qtype,
        });
    }

    // split each group into test / train members
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut test_groups: Vec<Vec<usize>> = Vec::new();
    let mut train: Vec<(String, usize)> = Vec::new();
    for (g, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        let mut n_test = (cfg.test_fraction * m.len() as f64).round() as usize;
        if n_test < MIN_TEST_GROUP {
            n_test = if m.len() >= MIN_TEST_GROUP { MIN_TEST_GROUP } else { 0 };
        }
        let (test_part, train_part) = m.split_at(n_test);
        if !test_part.is_empty() {
            let mut t = test_part.to_vec();
            t.sort_unstable();
            test_groups.push(t);
        }
        train.extend(train_part.iter().map(|&i| (questions[i].id.clone(), g)));
    }
    if test_groups.is_empty() {
        bail_arg!(
            "infeasible config: no group has {MIN_TEST_GROUP} members, so no test question can have 5 similar questions"
        );
    }
    train.sort();

    let mut pairs_test = Vec::new();
    let mut test_ids: Vec<(String, usize)> = Vec::new();
    for (g, t) in test_groups.iter().enumerate() {
        for (x, &a) in t.iter().enumerate() {
            test_ids.push((questions[a].id.clone(), g));
            for &b in &t[x + 1..] {
                pairs_test.push(LabeledPair::new(questions[a].id.clone(), questions[b].id.clone(), 1));
            }
        }
    }
    if cfg.n_pairs_test < pairs_test.len() {
        bail_arg!(
            "infeasible config: n_pairs_test = {} but the test groups need {} positive pairs",
            cfg.n_pairs_test,
            pairs_test.len()
        );
    }
    pairs_test.extend(sample_negatives(&test_ids, cfg.n_pairs_test - pairs_test.len(), &mut rng, "test")?);

    let n_pos = cfg.n_pairs_train.div_ceil(2);
    let mut train_groups: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, g) in &train {
        train_groups.entry(*g).or_default().push(id);
    }
    let mut candidates: Vec<(String, String)> = Vec::new();
    for ids in train_groups.values() {
        for (x, a) in ids.iter().enumerate() {
            for b in &ids[x + 1..] {
                candidates.push(ordered(a, b));
            }
        }
    }
    if candidates.len() < n_pos {
        bail_arg!(
            "infeasible config: n_pairs_train needs {n_pos} positive pairs but only {} exist",
            candidates.len()
        );
    }
    candidates.shuffle(&mut rng);
    let mut pairs_train: Vec<LabeledPair> = candidates
        .into_iter()
        .take(n_pos)
        .map(|(a, b)| LabeledPair::new(a, b, 1))
        .collect();
    pairs_train.extend(sample_negatives(&train, cfg.n_pairs_train - n_pos, &mut rng, "train")?);

    CorpusBundle::new(
        questions,
        pairs_train,
        pairs_test,
        Some(cfg),
        ImageSource::Memory(Arc::new(store)),
        DEFAULT_MAX_IMAGES,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TqError;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_questions: 200,
            n_kp: 10,
            n_pairs_train: 200,
            n_pairs_test: 600,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_identical_corpus() {
        let a = generate_synthetic_corpus(&small(), 42).unwrap();
        let b = generate_synthetic_corpus(&small(), 42).unwrap();
        assert_eq!(a, b);
        let ImageSource::Memory(ia) = &a.images else { panic!() };
        let ImageSource::Memory(ib) = &b.images else { panic!() };
        assert_eq!(ia, ib);
    }

    #[test]
    fn different_seed_differs() {
        let a = generate_synthetic_corpus(&small(), 1).unwrap();
        let b = generate_synthetic_corpus(&small(), 2).unwrap();
        assert_ne!(a.questions, b.questions);
    }

    #[test]
    fn zero_image_fraction_is_text_only() {
        let cfg = GeneratorConfig {
            image_fraction: 0.0,
            ..small()
        };
        let c = generate_synthetic_corpus(&cfg, 3).unwrap();
        assert!(c.questions.iter().all(|q| q.images.is_empty()));
    }

    #[test]
    fn every_test_question_has_five_similars() {
        let c = generate_synthetic_corpus(&small(), 5).unwrap();
        let gt = c.test_ground_truth().unwrap();
        assert!(!gt.is_empty());
        for (_, set) in gt.iter() {
            assert!(set.len() >= 5);
        }
        let train_gt = c.train_ground_truth().unwrap();
        let test = c.test_ids();
        assert!(train_gt.ids().all(|id| !test.contains(id)));
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = GeneratorConfig {
            n_questions: 20,
            n_kp: 10,
            ..small()
        };
        assert!(matches!(generate_synthetic_corpus(&cfg, 0), Err(TqError::Argument(_))));
        let cfg = GeneratorConfig {
            n_pairs_test: 10,
            ..small()
        };
        assert!(matches!(generate_synthetic_corpus(&cfg, 0), Err(TqError::Argument(_))));
    }

    #[test]
    fn small_vocab_rejected() {
        let cfg = GeneratorConfig {
            vocab_size: 100,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(TqError::Argument(_))));
    }
}
