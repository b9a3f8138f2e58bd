//! Negative-sampled training sets, ranking losses, and the Adam training loop
//! with validation-driven early stopping.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ArticleRef, CorpusStore, Query};
use crate::encoders::{
    article_backward, classify_backward, classify_relevance, encode_paragraph_general_attn,
    encode_paragraph_sparse_avg, encode_sentence_cnn, encode_sentences, sentence_backward,
    similarity_dot, ModelConfig, ModelKind, ModelParams,
};
use crate::error::{Error, Result};
use crate::lexical::InvertedIndex;
use crate::pipeline::{macro_f2_at_1, PipelineConfig, Reranker};
use crate::tensor::{binary_cross_entropy_with_logit, cross_entropy, Differentiable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Lexical,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub query: Query,
    pub positive: ArticleRef,
    pub negatives: Vec<ArticleRef>,
    pub provenance: Vec<NegativeSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_neg: usize,
    /// Fraction of negatives drawn from BM25 ranks; the rest are uniform.
    pub lexical_random_mix: f64,
    /// Depth of the BM25 list lexical negatives are drawn from.
    pub lexical_depth: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            n_neg: 4,
            lexical_random_mix: match kind {
                ModelKind::CnnDot => 0.5,
                ModelKind::GeneralAttnHead => 1.0,
            },
            lexical_depth: 150,
            seed: 0,
        }
    }
}

/// One instance per (query, positive article). Lexical negatives follow BM25
/// rank order skipping positives; random negatives are uniform over the rest
/// of the corpus.
pub fn build_training_set(
    queries: &[Query],
    store: &CorpusStore,
    index: &InvertedIndex,
    cfg: &SamplingConfig,
) -> Result<Vec<TrainingInstance>> {
    if !(0.0..=1.0).contains(&cfg.lexical_random_mix) {
        return Err(Error::Config(format!(
            "lexical_random_mix {} outside [0, 1]",
            cfg.lexical_random_mix
        )));
    }
    if store.len() < cfg.n_neg + 1 {
        return Err(Error::InvalidInput(format!(
            "corpus of {} articles cannot supply {} negatives plus a positive",
            store.len(),
            cfg.n_neg
        )));
    }
    let n_lexical = (cfg.lexical_random_mix * cfg.n_neg as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for query in queries {
        let positives = store.positives(query);
        if positives.is_empty() {
            return Err(Error::InvalidInput(format!(
                "query '{}' has no resolvable positive",
                query.query_id
            )));
        }
        let pos_set: HashSet<ArticleRef> = positives.iter().copied().collect();
        if store.len() - pos_set.len() < cfg.n_neg {
            return Err(Error::InvalidInput(format!(
                "query '{}': not enough non-relevant articles for {} negatives",
                query.query_id, cfg.n_neg
            )));
        }
        let lexical_pool: Vec<ArticleRef> = if n_lexical > 0 {
            index
                .top_n(&query.tokens, cfg.lexical_depth.max(cfg.n_neg + pos_set.len()))
                .candidates
                .into_iter()
                .map(|c| c.article)
                .filter(|a| !pos_set.contains(a))
                .take(n_lexical)
                .collect()
        } else {
            Vec::new()
        };
        for &positive in &positives {
            let mut negatives = lexical_pool.clone();
            let mut provenance = vec![NegativeSource::Lexical; negatives.len()];
            let mut taken: HashSet<ArticleRef> = negatives.iter().copied().collect();
            while negatives.len() < cfg.n_neg {
                let cand = ArticleRef(rng.gen_range(0..store.len() as u32));
                if pos_set.contains(&cand) || !taken.insert(cand) {
                    continue;
                }
                negatives.push(cand);
                provenance.push(NegativeSource::Random);
            }
            out.push(TrainingInstance {
                query: query.clone(),
                positive,
                negatives,
                provenance,
            });
        }
    }
    Ok(out)
}

/// `-ln(e^{s+} / (e^{s+} + Σ e^{s-}))` with its gradient on every score
/// (positive first).
pub fn loss_similarity_softmax(positive: f64, negatives: &[f64]) -> Result<(f64, Vec<f64>)> {
    if negatives.is_empty() {
        return Err(Error::InvalidInput("need at least one negative score".into()));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(positive);
    logits.extend_from_slice(negatives);
    cross_entropy(&logits, 0)
}

/// Binary cross-entropy on the relevance logit; returns `(loss, d_logit)`.
pub fn loss_binary_head(logit: f64, label: bool) -> (f64, f64) {
    binary_cross_entropy_with_logit(logit, if label { 1.0 } else { 0.0 })
}

fn article_sentences(store: &CorpusStore, r: ArticleRef) -> Result<Vec<&[u32]>> {
    Ok(store
        .article(r)?
        .sentences
        .iter()
        .map(|s| s.token_ids.as_slice())
        .collect())
}

/// Loss of one instance under the model's objective. With `grad_scale`,
/// gradients of `grad_scale * loss` are accumulated into `params`.
pub fn instance_loss(
    params: &mut ModelParams,
    store: &CorpusStore,
    inst: &TrainingInstance,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    grad_scale: Option<f64>,
) -> Result<f64> {
    let query = encode_sentence_cnn(params, &inst.query.token_ids, dropout_rng.as_deref_mut())?;
    let articles: Vec<ArticleRef> = std::iter::once(inst.positive)
        .chain(inst.negatives.iter().copied())
        .collect();
    match params.config.kind {
        ModelKind::CnnDot => {
            let mut encodings = Vec::with_capacity(articles.len());
            for &a in &articles {
                let sents =
                    encode_sentences(params, &article_sentences(store, a)?, dropout_rng.as_deref_mut())?;
                encodings.push(encode_paragraph_sparse_avg(sents, params.config.word_score_mode)?);
            }
            let scores = encodings
                .iter()
                .map(|e| similarity_dot(&query.vector, e.vector()))
                .collect::<Result<Vec<_>>>()?;
            let (loss, d_scores) = loss_similarity_softmax(scores[0], &scores[1..])?;
            if let Some(scale) = grad_scale {
                let mut d_query = vec![0.0; query.vector.len()];
                for (enc, &ds) in encodings.iter().zip(&d_scores) {
                    let ds = ds * scale;
                    crate::tensor::axpy(ds, enc.vector(), &mut d_query);
                    let d_article: Vec<f64> = query.vector.iter().map(|q| ds * q).collect();
                    article_backward(params, enc, &d_article, None)?;
                }
                sentence_backward(params, &query, &d_query, None, None);
            }
            Ok(loss)
        }
        ModelKind::GeneralAttnHead => {
            let mut total = 0.0;
            let mut d_query = vec![0.0; query.vector.len()];
            for (i, &a) in articles.iter().enumerate() {
                let sents =
                    encode_sentences(params, &article_sentences(store, a)?, dropout_rng.as_deref_mut())?;
                let enc = encode_paragraph_general_attn(params, &query.vector, sents)?;
                let logit = classify_relevance(params, &query.vector, enc.vector())?;
                let (loss, d_logit) = loss_binary_head(logit, i == 0);
                total += loss;
                if let Some(scale) = grad_scale {
                    let (dq_head, d_article) =
                        classify_backward(params, &query.vector, enc.vector(), d_logit * scale);
                    crate::tensor::axpy(1.0, &dq_head, &mut d_query);
                    let dq_attn = article_backward(params, &enc, &d_article, Some(&query.vector))?;
                    crate::tensor::axpy(1.0, &dq_attn, &mut d_query);
                }
            }
            if grad_scale.is_some() {
                sentence_backward(params, &query, &d_query, None, None);
            }
            Ok(total)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Redraw random-provenance negatives at the start of every epoch after the first.
    #[serde(default = "default_true")]
    pub resample_negatives: bool,
    /// Probability that a redrawn negative is another training instance's positive
    /// rather than a uniform corpus draw.
    #[serde(default)]
    pub in_batch_rate: f64,
}

fn default_true() -> bool {
    true
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            resample_negatives: true,
            in_batch_rate: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.in_batch_rate) {
            return Err(Error::Config(format!(
                "in_batch_rate {} outside [0, 1]",
                self.in_batch_rate
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(format!(
                "need learning_rate > 0, batch_size >= 1, patience >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction. Frozen tensors are skipped.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn step<P: Differentiable>(&mut self, params: &mut P, cfg: &OptimConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut tensors = params.params_mut();
        if self.first.len() != tensors.len() {
            self.first = tensors.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.second = self.first.clone();
        }
        for (k, p) in tensors.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                if g == 0.0 && m[i] == 0.0 && v[i] == 0.0 {
                    continue;
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_macro_f2_at_1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without validation).
    pub params: ModelParams,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub struct TrainData<'a> {
    pub store: &'a CorpusStore,
    pub index: &'a InvertedIndex,
    pub training: &'a [TrainingInstance],
    pub validation: &'a [Query],
}

fn redraw_random_negatives(
    inst: &mut TrainingInstance,
    store: &CorpusStore,
    pool: &[ArticleRef],
    in_batch_rate: f64,
    rng: &mut ChaCha8Rng,
) {
    let positives: HashSet<ArticleRef> = store.positives(&inst.query).into_iter().collect();
    let mut taken: HashSet<ArticleRef> = inst
        .negatives
        .iter()
        .zip(&inst.provenance)
        .filter(|(_, p)| **p == NegativeSource::Lexical)
        .map(|(n, _)| *n)
        .collect();
    for (neg, prov) in inst.negatives.iter_mut().zip(&inst.provenance) {
        if *prov != NegativeSource::Random {
            continue;
        }
        // Falls back to uniform draws once the pool looks exhausted for this instance.
        for attempt in 0usize.. {
            let use_pool = !pool.is_empty() && attempt < 64 && rng.gen_bool(in_batch_rate);
            let cand = if use_pool {
                pool[rng.gen_range(0..pool.len())]
            } else {
                ArticleRef(rng.gen_range(0..store.len() as u32))
            };
            if !positives.contains(&cand) && taken.insert(cand) {
                *neg = cand;
                break;
            }
        }
    }
}

pub fn train(
    model: ModelConfig,
    data: &TrainData<'_>,
    optim: &OptimConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let params = ModelParams::init(model, optim.seed)?;
    train_from(params, data, optim, on_epoch)
}

/// Validation Macro-F2@1 of the full pipeline with deep scores only.
pub fn validation_f2(
    params: &ModelParams,
    store: &CorpusStore,
    index: &InvertedIndex,
    queries: &[Query],
) -> Result<f64> {
    let reranker = Reranker::new(params, store)?;
    let cfg = PipelineConfig::for_kind(params.config.kind);
    let scored = reranker.score_all(index, queries, cfg.n_filter)?;
    macro_f2_at_1(store, queries, &scored, 1.0, cfg.normalization)
}

pub fn train_from(
    mut params: ModelParams,
    data: &TrainData<'_>,
    optim: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    optim.validate()?;
    if data.training.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let train_ids: HashSet<&str> = data
        .training
        .iter()
        .map(|i| i.query.query_id.as_str())
        .collect();
    if let Some(q) = data
        .validation
        .iter()
        .find(|q| train_ids.contains(q.query_id.as_str()))
    {
        return Err(Error::InvalidInput(format!(
            "validation query '{}' also appears in training",
            q.query_id
        )));
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(optim.seed.wrapping_add(0x5eed));
    let mut adam = Adam::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    let mut resample_rng = ChaCha8Rng::seed_from_u64(optim.seed.wrapping_add(0x5a3e));
    let mut training = data.training.to_vec();
    let pool: Vec<ArticleRef> = training.iter().map(|i| i.positive).collect();
    let mut order: Vec<usize> = (0..training.len()).collect();

    for epoch in 1..=optim.max_epochs {
        if epoch > 1 && optim.resample_negatives {
            for inst in &mut training {
                redraw_random_negatives(inst, data.store, &pool, optim.in_batch_rate, &mut resample_rng);
            }
        }
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(optim.batch_size).enumerate() {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let loss = instance_loss(
                    &mut params,
                    data.store,
                    &training[i],
                    Some(&mut dropout_rng),
                    Some(scale),
                )?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss,
                    });
                }
                epoch_loss += loss;
            }
            adam.step(&mut params, optim);
        }
        let loss = epoch_loss / training.len() as f64;

        let val = if data.validation.is_empty() {
            None
        } else {
            Some(validation_f2(&params, data.store, data.index, data.validation)?)
        };
        let log = EpochLog {
            epoch,
            loss,
            val_macro_f2_at_1: val,
        };
        log::info!("epoch {epoch}: loss {loss:.6} val Macro-F2@1 {val:?}");
        on_epoch(&log);
        history.push(log);

        match val {
            Some(v) => {
                if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                    best = Some((v, epoch, params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= optim.patience {
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, params.clone())),
        }
    }
    let (_, best_epoch, mut params) =
        best.ok_or_else(|| Error::Config("max_epochs is 0".into()))?;
    params.zero_grads();
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_loss_cases() {
        let (l, _) = loss_similarity_softmax(1.0, &[0.0]).unwrap();
        let p = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p - 0.7311).abs() < 1e-4);
        assert!((l - 0.3133).abs() < 1e-4);
        assert!((l + p.ln()).abs() < 1e-12);

        let (l, _) = loss_similarity_softmax(0.3, &[0.3]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let (l, _) = loss_similarity_softmax(1e4, &[0.0, 1.0]).unwrap();
        assert!(l < 1e-300);

        assert!(loss_similarity_softmax(1.0, &[]).is_err());
    }

    #[test]
    fn similarity_loss_shift_invariant() {
        let (a, _) = loss_similarity_softmax(0.7, &[0.1, -0.4, 1.2]).unwrap();
        let (b, _) = loss_similarity_softmax(100.7, &[100.1, 99.6, 101.2]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn binary_loss_cases() {
        assert!((loss_binary_head(0.0, true).0 - 2f64.ln()).abs() < 1e-15);
        assert!((loss_binary_head(0.0, false).0 - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_binary_head(f64::MAX, true).0, 0.0);
        let (l, _) = loss_binary_head(1.0, false);
        assert!((l - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::tensor::{ParamSet, ParamTensor, Tensor};
        let mut p = ParamSet(vec![ParamTensor::new("w", Tensor::vector(vec![1.0, -1.0]))]);
        p.0[0].tensor.accumulate(&[2.0, -0.5]);
        let cfg = OptimConfig::default();
        Adam::default().step(&mut p, &cfg);
        let v = p.0[0].tensor.values();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
