//! Statute retrieval in two stages: an Okapi BM25 filter over an inverted
//! index, then reranking with hierarchical attentive encoders trained by
//! negative sampling, with linear score fusion and macro-averaged metrics.

pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod lexical;
pub mod metrics;
pub mod pipeline;
pub mod runfile;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use corpus::{Article, ArticleRef, CorpusStore, IngestConfig, LanguageProfile, Query, Vocabulary};
pub use encoders::{ModelConfig, ModelKind, ModelParams};
pub use error::{Error, Result};
pub use lexical::{Bm25Params, InvertedIndex};
pub use pipeline::{Normalization, PipelineConfig, Reranker};
pub use trainer::{OptimConfig, SamplingConfig, TrainingInstance};
