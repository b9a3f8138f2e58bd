use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, CorpusStore};
use crate::encoders::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Differentiable, ParamTensor};
use crate::trainer::{EpochLog, OptimConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Named tensors plus everything needed to reuse them safely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<ParamTensor>,
    pub optim: Option<OptimConfig>,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, vocab_hash: String) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: params.config,
            vocab_hash,
            tensors: params.params().into_iter().cloned().collect(),
            optim: None,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_tensors(self.model, self.tensors.clone())
    }

    /// Fails unless the checkpoint was trained on this store's vocabulary.
    pub fn check_vocabulary(&self, store: &CorpusStore) -> Result<()> {
        let store_hash = store.vocabulary.hash();
        if store_hash != self.vocab_hash {
            return Err(Error::VocabMismatch {
                checkpoint: self.vocab_hash.clone(),
                store: store_hash,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = read_json(path)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "checkpoint",
                found: ckpt.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ModelKind;

    #[test]
    fn save_load_is_exact() {
        let cfg = ModelConfig {
            embedding_dim: 3,
            filters: 2,
            attention_dim: 2,
            ..ModelConfig::new(ModelKind::GeneralAttnHead, 7)
        };
        let params = ModelParams::init(cfg, 5).unwrap();
        let ckpt = Checkpoint::new(&params, "abc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.params().unwrap(), params);
    }
}
