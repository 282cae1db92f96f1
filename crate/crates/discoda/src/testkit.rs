//! Shared unit-test fixtures: a small two-domain corpus and a training
//! config sized so an end-to-end run finishes in well under a second.

use crate::data::{generate, Corpus, EmbeddingTable, SynthConfig};
use crate::train::TrainConfig;

pub(crate) fn tiny_corpus_config(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        classes: 3,
        markers_per_class: 1,
        content_tokens_per_class: 6,
        shared_tokens: 8,
        arg_len_min: 3,
        arg_len_max: 5,
        source_train: 48,
        source_dev: 12,
        target_train: 48,
        target_dev: 12,
        target_test: 12,
        ..SynthConfig::default()
    }
}

pub(crate) fn tiny_corpus(seed: u64) -> Corpus {
    generate(&tiny_corpus_config(seed)).expect("synthetic corpus")
}

pub(crate) fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 3,
        embedding_dim: 4,
        disc_h1: 6,
        disc_h2: 5,
        recon_h1: 6,
        recon_bottleneck: 3,
        recon_h2: 6,
        batch_size: 8,
        pretrain_epochs: 2,
        adapt_epochs: 2,
        ..TrainConfig::desk(seed)
    }
}

pub(crate) fn embed_for(corpus: &Corpus, cfg: &TrainConfig) -> EmbeddingTable<f64> {
    crate::pipeline::embedding_for(corpus, cfg)
}
