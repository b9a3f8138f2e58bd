//! Hierarchical attentive encoders.
//!
//! A sentence is embedded, passed through a windowed convolution and pooled
//! by softmax word attention. An article is pooled from its sentence vectors
//! with sparsemax, either from averaged word scores (query independent) or
//! from general attention against a query vector (query conditioned).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    axpy, conv_context, conv_context_backward, dot, embedding_backward, embedding_lookup,
    masked_softmax, masked_softmax_backward, sparsemax, sparsemax_backward, tanh_backward,
    ConvForward, Differentiable, DropoutMask, ParamTensor, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Query sentence vector dotted with a sparsemax-averaged article vector.
    CnnDot,
    /// General-attention article encoder with a one-logit classification head.
    GeneralAttnHead,
}

impl ModelKind {
    pub fn paragraph_mode(self) -> ParagraphMode {
        match self {
            Self::CnnDot => ParagraphMode::SparseAvg,
            Self::GeneralAttnHead => ParagraphMode::GeneralAttn,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn_dot" | "cnn-dot" => Ok(Self::CnnDot),
            "general_attn_head" | "general-attn-head" => Ok(Self::GeneralAttnHead),
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParagraphMode {
    SparseAvg,
    GeneralAttn,
}

/// Which word attention values are averaged into a sentence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordScoreMode {
    /// Pre-softmax scores `a_i`.
    #[default]
    Raw,
    /// Softmax-normalized weights `α_i`.
    Normalized,
}

/// Input of the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    #[default]
    Article,
    QueryAndArticle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub filters: usize,
    /// Convolution window is `2 * half_window + 1` tokens.
    pub half_window: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub word_score_mode: WordScoreMode,
    #[serde(default)]
    pub head_input: HeadInput,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            kind,
            vocab_size,
            embedding_dim: 64,
            filters: 64,
            half_window: 1,
            attention_dim: 32,
            dropout: 0.2,
            word_score_mode: WordScoreMode::Raw,
            head_input: HeadInput::Article,
        }
    }

    /// Embedding 512, 512 filters, attention query 200, dropout 0.2.
    pub fn full_profile(kind: ModelKind, vocab_size: usize) -> Self {
        Self {
            embedding_dim: 512,
            filters: 512,
            attention_dim: 200,
            dropout: 0.2,
            ..Self::new(kind, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2
            || self.embedding_dim == 0
            || self.filters == 0
            || self.attention_dim == 0
        {
            return Err(Error::Config(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn window_width(&self) -> usize {
        (2 * self.half_window + 1) * self.embedding_dim
    }
}

/// Settings of the pretrained sentence-transformer variant. Recorded for
/// configuration files and reports only; no transformer is built from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerProfile {
    pub max_position_embeddings: usize,
    pub hidden_size: usize,
    pub hidden_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
}

impl TransformerProfile {
    pub fn reference() -> Self {
        Self {
            max_position_embeddings: 514,
            hidden_size: 768,
            hidden_layers: 12,
            attention_heads: 12,
            dropout: 0.1,
        }
    }
}

/// Learnable tensors of either model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: ParamTensor,
    pub conv_filters: ParamTensor,
    pub conv_bias: ParamTensor,
    pub word_attn_weight: ParamTensor,
    pub word_attn_bias: ParamTensor,
    pub word_attn_query: ParamTensor,
    /// `A` and scalar `b` of the general attention; general_attn_head only.
    pub sent_attn_weight: Option<ParamTensor>,
    pub sent_attn_bias: Option<ParamTensor>,
    pub head_weight: Option<ParamTensor>,
    pub head_bias: Option<ParamTensor>,
}

fn uniform(shape: Vec<usize>, limit: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, values).expect("shape and length agree")
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    uniform(vec![rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

impl ModelParams {
    /// Xavier-uniform matrices, zero biases, embeddings with variance `1/D`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embedding_dim;
        let nf = config.filters;
        let da = config.attention_dim;
        let embedding = uniform(
            vec![config.vocab_size, d],
            (3.0 / d as f64).sqrt(),
            &mut rng,
        );
        let filters = xavier(nf, config.window_width(), &mut rng);
        let attn_w = xavier(da, nf, &mut rng);
        // Zero query: word attention starts uniform and cannot saturate on init noise.
        let attn_q = Tensor::zeros(vec![da]);
        let general = config.kind == ModelKind::GeneralAttnHead;
        let (sent_w, sent_b, head_w, head_b) = if general {
            let head_in = match config.head_input {
                HeadInput::Article => nf,
                HeadInput::QueryAndArticle => 2 * nf,
            };
            (
                Some(ParamTensor::new("sent_attn.weight", xavier(nf, nf, &mut rng))),
                Some(ParamTensor::new("sent_attn.bias", Tensor::zeros(vec![1]))),
                Some(ParamTensor::new("head.weight", xavier(1, head_in, &mut rng))),
                Some(ParamTensor::new("head.bias", Tensor::zeros(vec![1]))),
            )
        } else {
            (None, None, None, None)
        };
        Ok(Self {
            config,
            embedding: ParamTensor::new("embedding", embedding),
            conv_filters: ParamTensor::new("conv.filters", filters),
            conv_bias: ParamTensor::new("conv.bias", Tensor::zeros(vec![nf])),
            word_attn_weight: ParamTensor::new("word_attn.weight", attn_w),
            word_attn_bias: ParamTensor::new("word_attn.bias", Tensor::zeros(vec![da])),
            word_attn_query: ParamTensor::new("word_attn.query", attn_q),
            sent_attn_weight: sent_w,
            sent_attn_bias: sent_b,
            head_weight: head_w,
            head_bias: head_b,
        })
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let mut slots = params.params_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for incoming in tensors {
            let slot = slots
                .iter_mut()
                .find(|p| p.name == incoming.name)
                .ok_or_else(|| Error::Shape(format!("unexpected tensor '{}'", incoming.name)))?;
            if slot.tensor.shape() != incoming.tensor.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    incoming.name,
                    incoming.tensor.shape(),
                    slot.tensor.shape()
                )));
            }
            **slot = incoming;
        }
        Ok(params)
    }

    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    fn general_parts(&self) -> Result<(&Tensor, f64)> {
        match (&self.sent_attn_weight, &self.sent_attn_bias) {
            (Some(w), Some(b)) => Ok((&w.tensor, b.tensor.values()[0])),
            _ => Err(Error::Config("model has no general attention parameters".into())),
        }
    }
}

impl Differentiable for ModelParams {
    fn params(&self) -> Vec<&ParamTensor> {
        let mut v = vec![
            &self.embedding,
            &self.conv_filters,
            &self.conv_bias,
            &self.word_attn_weight,
            &self.word_attn_bias,
            &self.word_attn_query,
        ];
        v.extend(
            [
                &self.sent_attn_weight,
                &self.sent_attn_bias,
                &self.head_weight,
                &self.head_bias,
            ]
            .into_iter()
            .flatten(),
        );
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![
            &mut self.embedding,
            &mut self.conv_filters,
            &mut self.conv_bias,
            &mut self.word_attn_weight,
            &mut self.word_attn_bias,
            &mut self.word_attn_query,
        ];
        v.extend(
            [
                &mut self.sent_attn_weight,
                &mut self.sent_attn_bias,
                &mut self.head_weight,
                &mut self.head_bias,
            ]
            .into_iter()
            .flatten(),
        );
        v
    }
}

/// Output of the sentence encoder, with the intermediates its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoding {
    /// `r = Σ α_i c_i`.
    pub vector: Vec<f64>,
    /// Raw attention scores `a_i`.
    pub word_scores: Vec<f64>,
    /// `α = softmax(a)`.
    pub word_weights: Vec<f64>,
    token_ids: Vec<u32>,
    dropout: Option<DropoutMask>,
    conv: ConvForward,
    /// `tanh(V c_i + v)` per word.
    hidden: Vec<Vec<f64>>,
}

impl SentenceEncoding {
    pub fn len(&self) -> usize {
        self.word_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_scores.is_empty()
    }

    /// Context vectors `c_i`, one row per word.
    pub fn contexts(&self) -> &Tensor {
        &self.conv.output
    }
}

/// Attentive CNN sentence encoder. Dropout on embeddings applies only when
/// an RNG is supplied.
pub fn encode_sentence_cnn(
    params: &ModelParams,
    token_ids: &[u32],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<SentenceEncoding> {
    if token_ids.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty sentence".into()));
    }
    let cfg = &params.config;
    let mut e = embedding_lookup(&params.embedding.tensor, token_ids)?;
    let dropout = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let mask = DropoutMask::sample(e.len(), cfg.dropout, rng);
            mask.apply(e.values_mut());
            Some(mask)
        }
        _ => None,
    };
    let conv = conv_context(
        &e,
        &params.conv_filters.tensor,
        &params.conv_bias.tensor,
        cfg.half_window,
    )?;
    let v = &params.word_attn_weight.tensor;
    let v_bias = params.word_attn_bias.tensor.values();
    let q = params.word_attn_query.tensor.values();
    let m = token_ids.len();
    let mut hidden = Vec::with_capacity(m);
    let mut word_scores = Vec::with_capacity(m);
    for i in 0..m {
        let mut u = v.matvec(conv.output.row(i));
        axpy(1.0, v_bias, &mut u);
        u.iter_mut().for_each(|x| *x = x.tanh());
        word_scores.push(dot(q, &u)?);
        hidden.push(u);
    }
    let word_weights = masked_softmax(&word_scores, None)?;
    let mut vector = vec![0.0; cfg.filters];
    for (i, &w) in word_weights.iter().enumerate() {
        axpy(w, conv.output.row(i), &mut vector);
    }
    Ok(SentenceEncoding {
        vector,
        word_scores,
        word_weights,
        token_ids: token_ids.to_vec(),
        dropout,
        conv,
        hidden,
    })
}

/// Backpropagates into the sentence encoder. Besides the gradient on `r`,
/// callers may inject gradients on the raw word scores or the word weights.
pub fn sentence_backward(
    params: &mut ModelParams,
    enc: &SentenceEncoding,
    d_vector: &[f64],
    d_word_scores: Option<&[f64]>,
    d_word_weights: Option<&[f64]>,
) {
    let m = enc.len();
    let nf = params.config.filters;
    let contexts = &enc.conv.output;

    let mut d_weights: Vec<f64> = (0..m)
        .map(|i| contexts.row(i).iter().zip(d_vector).map(|(c, g)| c * g).sum())
        .collect();
    if let Some(extra) = d_word_weights {
        axpy(1.0, extra, &mut d_weights);
    }
    let mut d_scores = masked_softmax_backward(&enc.word_weights, &d_weights);
    if let Some(extra) = d_word_scores {
        axpy(1.0, extra, &mut d_scores);
    }

    let mut d_context = Tensor::zeros(vec![m, nf]);
    for i in 0..m {
        let row = d_context.row_mut(i);
        axpy(enc.word_weights[i], d_vector, row);
    }
    let q = params.word_attn_query.tensor.values().to_vec();
    for i in 0..m {
        let ds = d_scores[i];
        if ds == 0.0 {
            continue;
        }
        params.word_attn_query.tensor.accumulate(
            &enc.hidden[i].iter().map(|t| ds * t).collect::<Vec<_>>(),
        );
        let dt: Vec<f64> = q.iter().map(|qk| ds * qk).collect();
        let du = tanh_backward(&enc.hidden[i], &dt);
        params.word_attn_bias.tensor.accumulate(&du);
        params
            .word_attn_weight
            .tensor
            .accumulate_outer(&du, contexts.row(i));
        let dc = params.word_attn_weight.tensor.matvec_t(&du);
        axpy(1.0, &dc, d_context.row_mut(i));
    }

    let mut de = conv_context_backward(
        &mut params.conv_filters.tensor,
        &mut params.conv_bias.tensor,
        &enc.conv,
        &d_context,
        params.config.half_window,
    );
    if let Some(mask) = &enc.dropout {
        mask.backward(de.values_mut());
    }
    embedding_backward(&mut params.embedding.tensor, &enc.token_ids, &de);
}

/// Sparsemax pooling of sentence vectors, shared by both paragraph encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    /// Pre-sparsemax sentence scores (`ω^s` or `a^s`).
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub vector: Vec<f64>,
    /// `tanh(A r_i + b)` per sentence; empty for the averaging encoder.
    hidden: Vec<Vec<f64>>,
}

fn weighted_sum(weights: &[f64], vectors: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (w, v) in weights.iter().zip(vectors) {
        if *w != 0.0 {
            axpy(*w, v, &mut out);
        }
    }
    out
}

fn check_vectors(vectors: &[&[f64]]) -> Result<usize> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("article has no sentences".into()))?;
    let dim = first.len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("sentence vectors of unequal length".into()));
    }
    Ok(dim)
}

/// `ω_j = mean(word scores of j)`, `α = sparsemax(ω)`, `r = Σ α_j r_j`.
pub fn sparse_avg_pool(word_scores: &[&[f64]], vectors: &[&[f64]]) -> Result<Pooled> {
    check_vectors(vectors)?;
    if word_scores.len() != vectors.len() || word_scores.iter().any(|s| s.is_empty()) {
        return Err(Error::Shape("one non-empty score list per sentence".into()));
    }
    let scores: Vec<f64> = word_scores
        .iter()
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect();
    let weights = sparsemax(&scores, None)?;
    let vector = weighted_sum(&weights, vectors);
    Ok(Pooled {
        scores,
        weights,
        vector,
        hidden: Vec::new(),
    })
}

/// `a_i = qᵀ tanh(A r_i + b)`, `α = sparsemax(a)`, `r = Σ α_i r_i`.
pub fn general_attn_pool(
    query: &[f64],
    vectors: &[&[f64]],
    weight: &Tensor,
    bias: f64,
) -> Result<Pooled> {
    let dim = check_vectors(vectors)?;
    if query.len() != dim || weight.rows() != dim || weight.cols() != dim {
        return Err(Error::Shape(format!(
            "general attention: query {}, sentences {dim}, A {:?}",
            query.len(),
            weight.shape()
        )));
    }
    let mut hidden = Vec::with_capacity(vectors.len());
    let mut scores = Vec::with_capacity(vectors.len());
    for v in vectors {
        let t: Vec<f64> = weight.matvec(v).into_iter().map(|x| (x + bias).tanh()).collect();
        scores.push(dot(query, &t)?);
        hidden.push(t);
    }
    let weights = sparsemax(&scores, None)?;
    let vector = weighted_sum(&weights, vectors);
    Ok(Pooled {
        scores,
        weights,
        vector,
        hidden,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticleEncoding {
    pub mode: ParagraphMode,
    pub pooled: Pooled,
    pub sentences: Vec<SentenceEncoding>,
}

impl ArticleEncoding {
    pub fn vector(&self) -> &[f64] {
        &self.pooled.vector
    }

    pub fn sentence_weights(&self) -> &[f64] {
        &self.pooled.weights
    }
}

pub fn encode_sentences(
    params: &ModelParams,
    sentences: &[&[u32]],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<SentenceEncoding>> {
    sentences
        .iter()
        .map(|ids| encode_sentence_cnn(params, ids, dropout_rng.as_deref_mut()))
        .collect()
}

/// Query-independent article encoder.
pub fn encode_paragraph_sparse_avg(
    sentences: Vec<SentenceEncoding>,
    mode: WordScoreMode,
) -> Result<ArticleEncoding> {
    let vectors: Vec<&[f64]> = sentences.iter().map(|s| s.vector.as_slice()).collect();
    let scores: Vec<&[f64]> = sentences
        .iter()
        .map(|s| match mode {
            WordScoreMode::Raw => s.word_scores.as_slice(),
            WordScoreMode::Normalized => s.word_weights.as_slice(),
        })
        .collect();
    let pooled = sparse_avg_pool(&scores, &vectors)?;
    Ok(ArticleEncoding {
        mode: ParagraphMode::SparseAvg,
        pooled,
        sentences,
    })
}

/// Query-conditioned article encoder.
pub fn encode_paragraph_general_attn(
    params: &ModelParams,
    query: &[f64],
    sentences: Vec<SentenceEncoding>,
) -> Result<ArticleEncoding> {
    let (weight, bias) = params.general_parts()?;
    let vectors: Vec<&[f64]> = sentences.iter().map(|s| s.vector.as_slice()).collect();
    let pooled = general_attn_pool(query, &vectors, weight, bias)?;
    Ok(ArticleEncoding {
        mode: ParagraphMode::GeneralAttn,
        pooled,
        sentences,
    })
}

/// Backpropagates `d_vector` through an article encoding and its sentences.
/// Returns the gradient on the query vector (zero for the averaging encoder).
pub fn article_backward(
    params: &mut ModelParams,
    enc: &ArticleEncoding,
    d_vector: &[f64],
    query: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = enc.sentences.len();
    let weights = &enc.pooled.weights;
    let d_weights: Vec<f64> = enc
        .sentences
        .iter()
        .map(|s| s.vector.iter().zip(d_vector).map(|(r, g)| r * g).sum())
        .collect();
    let d_scores = sparsemax_backward(weights, &d_weights);
    let dim = d_vector.len();
    let mut d_query = vec![0.0; dim];

    // Extra gradient on each sentence vector from the attention scores.
    let mut d_sentence: Vec<Vec<f64>> = (0..n)
        .map(|j| d_vector.iter().map(|g| weights[j] * g).collect())
        .collect();

    match enc.mode {
        ParagraphMode::SparseAvg => {
            let mode = params.config.word_score_mode;
            for (j, s) in enc.sentences.iter().enumerate() {
                if weights[j] == 0.0 && d_scores[j] == 0.0 {
                    continue;
                }
                let per_word = vec![d_scores[j] / s.len() as f64; s.len()];
                let (ds, dw) = match mode {
                    WordScoreMode::Raw => (Some(per_word.as_slice()), None),
                    WordScoreMode::Normalized => (None, Some(per_word.as_slice())),
                };
                sentence_backward(params, s, &d_sentence[j], ds, dw);
            }
        }
        ParagraphMode::GeneralAttn => {
            let query = query.ok_or_else(|| {
                Error::InvalidInput("general attention backward needs the query vector".into())
            })?;
            for j in 0..n {
                let da = d_scores[j];
                if da == 0.0 {
                    continue;
                }
                let t = &enc.pooled.hidden[j];
                axpy(da, t, &mut d_query);
                let dt: Vec<f64> = query.iter().map(|q| da * q).collect();
                let du = tanh_backward(t, &dt);
                let a = params
                    .sent_attn_weight
                    .as_mut()
                    .expect("general attention params present");
                a.tensor.accumulate_outer(&du, &enc.sentences[j].vector);
                let back = a.tensor.matvec_t(&du);
                axpy(1.0, &back, &mut d_sentence[j]);
                let db: f64 = du.iter().sum();
                params
                    .sent_attn_bias
                    .as_mut()
                    .expect("general attention params present")
                    .tensor
                    .accumulate(&[db]);
            }
            for (j, s) in enc.sentences.iter().enumerate() {
                if d_sentence[j].iter().all(|&g| g == 0.0) {
                    continue;
                }
                sentence_backward(params, s, &d_sentence[j], None, None);
            }
        }
    }
    Ok(d_query)
}

pub fn similarity_dot(query: &[f64], article: &[f64]) -> Result<f64> {
    dot(query, article)
}

/// One affine map to a scalar logit. `query` is used only by the
/// query-and-article head variant.
pub fn classify_relevance(params: &ModelParams, query: &[f64], article: &[f64]) -> Result<f64> {
    let (w, b) = head_parts(params)?;
    let input = head_input(params.config.head_input, query, article);
    Ok(dot(w.values(), &input)? + b)
}

fn head_parts(params: &ModelParams) -> Result<(&Tensor, f64)> {
    match (&params.head_weight, &params.head_bias) {
        (Some(w), Some(b)) => Ok((&w.tensor, b.tensor.values()[0])),
        _ => Err(Error::Config("model has no classification head".into())),
    }
}

fn head_input(kind: HeadInput, query: &[f64], article: &[f64]) -> Vec<f64> {
    match kind {
        HeadInput::Article => article.to_vec(),
        HeadInput::QueryAndArticle => query.iter().chain(article).copied().collect(),
    }
}

/// Accumulates head gradients; returns `(d_query, d_article)`.
pub fn classify_backward(
    params: &mut ModelParams,
    query: &[f64],
    article: &[f64],
    d_logit: f64,
) -> (Vec<f64>, Vec<f64>) {
    let kind = params.config.head_input;
    let input = head_input(kind, query, article);
    let w = params.head_weight.as_mut().expect("head present");
    w.tensor
        .accumulate(&input.iter().map(|x| d_logit * x).collect::<Vec<_>>());
    let d_input: Vec<f64> = w.tensor.values().iter().map(|x| d_logit * x).collect();
    params
        .head_bias
        .as_mut()
        .expect("head present")
        .tensor
        .accumulate(&[d_logit]);
    match kind {
        HeadInput::Article => (vec![0.0; query.len()], d_input),
        HeadInput::QueryAndArticle => {
            let (dq, da) = d_input.split_at(query.len());
            (dq.to_vec(), da.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(kind: ModelKind) -> ModelParams {
        let cfg = ModelConfig {
            embedding_dim: 4,
            filters: 4,
            attention_dim: 3,
            half_window: 1,
            dropout: 0.0,
            ..ModelConfig::new(kind, 12)
        };
        ModelParams::init(cfg, 11).unwrap()
    }

    fn set(p: &mut ParamTensor, values: &[f64]) {
        p.tensor.values_mut().copy_from_slice(values);
    }

    #[test]
    fn empty_sentence_is_error() {
        let p = tiny_params(ModelKind::CnnDot);
        assert!(encode_sentence_cnn(&p, &[], None).is_err());
    }

    #[test]
    fn single_token_sentence_is_its_context() {
        let p = tiny_params(ModelKind::CnnDot);
        let enc = encode_sentence_cnn(&p, &[5], None).unwrap();
        assert_eq!(enc.word_weights, vec![1.0]);
        assert_eq!(enc.vector, enc.contexts().row(0));
    }

    #[test]
    fn identical_tokens_get_uniform_weights_without_window() {
        let mut cfg = tiny_params(ModelKind::CnnDot).config;
        cfg.half_window = 0;
        let p = ModelParams::init(cfg, 3).unwrap();
        let enc = encode_sentence_cnn(&p, &[4, 4, 4], None).unwrap();
        for w in &enc.word_weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_traced_sentence() {
        // D = N_f = d_a = 1, K = 0, two tokens with embeddings 1 and -2.
        let cfg = ModelConfig {
            embedding_dim: 1,
            filters: 1,
            attention_dim: 1,
            half_window: 0,
            dropout: 0.0,
            ..ModelConfig::new(ModelKind::CnnDot, 4)
        };
        let mut p = ModelParams::init(cfg, 0).unwrap();
        set(&mut p.embedding, &[0.0, 0.0, 1.0, -2.0]);
        set(&mut p.conv_filters, &[2.0]);
        set(&mut p.conv_bias, &[0.5]);
        set(&mut p.word_attn_weight, &[1.0]);
        set(&mut p.word_attn_bias, &[0.0]);
        set(&mut p.word_attn_query, &[1.0]);
        let enc = encode_sentence_cnn(&p, &[2, 3], None).unwrap();
        // c = [relu(2)+0.5, relu(-4)+0.5] = [2.5, 0.5]; a = tanh(c).
        let a1 = 2.5f64.tanh();
        let a2 = 0.5f64.tanh();
        let w1 = a1.exp() / (a1.exp() + a2.exp());
        let r = w1 * 2.5 + (1.0 - w1) * 0.5;
        assert!((enc.word_scores[0] - a1).abs() < 1e-15);
        assert!((enc.word_scores[1] - a2).abs() < 1e-15);
        assert!((enc.vector[0] - r).abs() < 1e-12);
    }

    #[test]
    fn sparse_avg_single_sentence() {
        let pooled = sparse_avg_pool(&[&[0.3, 0.9]], &[&[1.0, 2.0]]).unwrap();
        assert_eq!(pooled.weights, vec![1.0]);
        assert_eq!(pooled.vector, vec![1.0, 2.0]);
    }

    #[test]
    fn sparse_avg_large_gap_is_one_hot() {
        let pooled =
            sparse_avg_pool(&[&[3.0, 2.0], &[0.5]], &[&[1.0, -1.0], &[4.0, 4.0]]).unwrap();
        assert_eq!(pooled.scores, vec![2.5, 0.5]);
        assert_eq!(pooled.weights, vec![1.0, 0.0]);
        assert_eq!(pooled.vector, vec![1.0, -1.0]);
    }

    #[test]
    fn sparse_avg_identical_sentences() {
        let v = [0.25, -3.0];
        let pooled = sparse_avg_pool(&[&[0.1], &[0.1]], &[&v, &v]).unwrap();
        assert_eq!(pooled.weights, vec![0.5, 0.5]);
        assert_eq!(pooled.vector, v.to_vec());
    }

    #[test]
    fn general_attn_single_sentence_ignores_query() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        for q in [[1.0, 0.0], [-3.0, 2.0]] {
            let pooled = general_attn_pool(&q, &[&[0.4, 0.7]], &a, 0.1).unwrap();
            assert_eq!(pooled.vector, vec![0.4, 0.7]);
        }
    }

    #[test]
    fn general_attn_zero_matrix_gives_mean() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = 0.3;
        let pooled =
            general_attn_pool(&[1.0, 2.0], &[&[1.0, 0.0], &[0.0, 3.0]], &a, b).unwrap();
        let expected_score = 3.0 * b.tanh();
        assert!(pooled.scores.iter().all(|s| (s - expected_score).abs() < 1e-15));
        assert_eq!(pooled.weights, vec![0.5, 0.5]);
        assert_eq!(pooled.vector, vec![0.5, 1.5]);
    }

    #[test]
    fn general_attn_depends_on_query() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = [[2.0, 0.0], [0.0, 2.0]];
        let vs: Vec<&[f64]> = s.iter().map(|v| v.as_slice()).collect();
        let p1 = general_attn_pool(&[3.0, 0.0], &vs, &a, 0.0).unwrap();
        let p2 = general_attn_pool(&[0.0, 3.0], &vs, &a, 0.0).unwrap();
        assert_eq!(p1.weights, vec![1.0, 0.0]);
        assert_eq!(p2.weights, vec![0.0, 1.0]);
        assert!(general_attn_pool(&[1.0], &vs, &a, 0.0).is_err());
    }

    #[test]
    fn similarity_dot_cases() {
        assert_eq!(similarity_dot(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert_eq!(similarity_dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let v = [0.5, -2.0, 3.0];
        assert_eq!(similarity_dot(&v, &v).unwrap(), 0.25 + 4.0 + 9.0);
        assert!(similarity_dot(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classification_head_cases() {
        let mut p = tiny_params(ModelKind::GeneralAttnHead);
        let q = [0.0; 4];
        let r = [1.0, -2.0, 0.5, 3.0];
        set(p.head_weight.as_mut().unwrap(), &[0.0; 4]);
        set(p.head_bias.as_mut().unwrap(), &[0.7]);
        assert_eq!(classify_relevance(&p, &q, &r).unwrap(), 0.7);

        set(p.head_weight.as_mut().unwrap(), &[2.0, 1.0, 0.0, 0.0]);
        set(p.head_bias.as_mut().unwrap(), &[-0.5]);
        assert_eq!(classify_relevance(&p, &q, &r).unwrap(), 2.0 - 2.0 - 0.5);
        assert_eq!(
            classify_relevance(&p, &q, &r).unwrap(),
            classify_relevance(&p, &[9.0; 4], &r).unwrap()
        );

        let cnn = tiny_params(ModelKind::CnnDot);
        assert!(classify_relevance(&cnn, &q, &r).is_err());
    }

    #[test]
    fn from_tensors_round_trip_and_shape_check() {
        let p = tiny_params(ModelKind::GeneralAttnHead);
        let tensors: Vec<ParamTensor> = p.params().into_iter().cloned().collect();
        let back = ModelParams::from_tensors(p.config, tensors.clone()).unwrap();
        assert_eq!(back, p);

        let mut bad = tensors;
        bad[1].tensor = Tensor::zeros(vec![2, 2]);
        assert!(ModelParams::from_tensors(p.config, bad).is_err());
    }
}
