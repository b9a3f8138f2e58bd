use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate article ({law_id}, {article_id}) with conflicting content")]
    DuplicateArticle { law_id: String, article_id: String },
    #[error("empty article ({law_id}, {article_id})")]
    EmptyArticle { law_id: String, article_id: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("query {query_id}: relevant article {law_id}:{article_id} not in corpus")]
    UnresolvedJudgment {
        query_id: String,
        law_id: String,
        article_id: String,
    },
    #[error("unknown article {0}")]
    UnknownArticle(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, store {store}")]
    VocabMismatch { checkpoint: String, store: String },
    #[error("unsupported format version {found} in {what} (expected {expected})")]
    FormatVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors are caused by user input; everything else is internal.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Divergence { .. } | Error::Shape(_))
    }
}
