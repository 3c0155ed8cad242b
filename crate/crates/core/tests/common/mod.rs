#![allow(dead_code)]

use tqnet::corpus::{build_vocab, generate_synthetic_corpus, CorpusBundle, EncodedCorpus, GeneratorConfig, TokenVocab};
use tqnet::model::ModelConfig;

pub struct Fixture {
    pub bundle: CorpusBundle,
    pub vocab: TokenVocab,
    pub corpus: EncodedCorpus,
    pub model: ModelConfig,
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_questions: 160,
        n_kp: 4,
        n_pairs_train: 200,
        n_pairs_test: 300,
        vocab_size: 300,
        max_len: 16,
        image_fraction: 0.5,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_text_layers: 1,
        n_fusion_layers: 1,
        n_heads: 2,
        ff_mult: 2,
        visual_channels: vec![4, 8],
        image_size: 16,
        ..ModelConfig::default()
    }
}

pub fn fixture(gen: &GeneratorConfig, model: &ModelConfig, seed: u64) -> Fixture {
    let bundle = generate_synthetic_corpus(gen, seed).unwrap();
    let vocab = build_vocab(&bundle, 1).unwrap();
    let model = model.resolved(vocab.len(), gen.max_len);
    let corpus = EncodedCorpus::encode(&bundle, &vocab, gen.max_len, model.image_size).unwrap();
    Fixture {
        bundle,
        vocab,
        corpus,
        model,
    }
}

pub fn tiny(seed: u64) -> Fixture {
    fixture(&tiny_generator(), &tiny_model(), seed)
}
