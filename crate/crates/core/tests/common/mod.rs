#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statute_core::corpus::{ArticleRecord, CorpusStore, IngestConfig, Query, QueryRecord};
use statute_core::encoders::{ModelConfig, ModelKind, ModelParams};
use statute_core::tensor::Differentiable;

pub fn record(law: &str, art: &str, text: &str) -> ArticleRecord {
    ArticleRecord {
        law_id: law.into(),
        article_id: art.into(),
        title: String::new(),
        text: text.into(),
    }
}

pub fn query_record(id: &str, text: &str, law: &str, art: &str) -> QueryRecord {
    QueryRecord {
        query_id: id.into(),
        text: text.into(),
        relevant: vec![(law.into(), art.into())],
    }
}

/// Four two-sentence articles over a small vocabulary, min frequency 1.
pub fn tiny_store() -> CorpusStore {
    let records = vec![
        record("L", "1", "the owner shall repair the wall. a fee applies"),
        record("L", "2", "the tenant may leave early. notice is required"),
        record("L", "3", "a building permit is needed. the owner pays a fee"),
        record("L", "4", "the court may order repair. the tenant pays"),
    ];
    CorpusStore::from_records(
        records,
        IngestConfig {
            min_frequency: 1,
            ..IngestConfig::default()
        },
    )
    .unwrap()
}

pub fn tiny_query(store: &CorpusStore) -> Query {
    store
        .make_query(query_record("q1", "who must repair the wall", "L", "1"))
        .unwrap()
}

/// Tiny model with every tensor (including the attention query) randomized so
/// that no gradient path is trivially zero.
pub fn tiny_params(kind: ModelKind, vocab: usize, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        embedding_dim: 4,
        filters: 4,
        attention_dim: 3,
        dropout: 0.0,
        ..ModelConfig::new(kind, vocab)
    };
    let mut params = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in params.params_mut() {
        for v in p.tensor.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    params
}
