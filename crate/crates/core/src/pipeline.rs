//! Two-stage retrieval: BM25 candidates, neural rescoring, linear fusion.

use std::collections::HashSet;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, ArticleRef, CorpusStore, Query};
use crate::encoders::{
    classify_relevance, encode_paragraph_sparse_avg, encode_sentence_cnn, encode_sentences,
    general_attn_pool, similarity_dot, ModelKind, ModelParams, ParagraphMode,
};
use crate::error::{Error, Result};
use crate::lexical::InvertedIndex;
use crate::metrics::{macro_metrics, query_metrics};
use crate::runfile::RunEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Minmax,
    Zscore,
    None,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Self::Minmax),
            "zscore" => Ok(Self::Zscore),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Default candidate count per model kind.
pub fn default_n_filter(kind: ModelKind) -> usize {
    match kind {
        ModelKind::CnnDot => 1000,
        ModelKind::GeneralAttnHead => 150,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_filter: usize,
    pub alpha_fuse: f64,
    pub top_k: usize,
    pub normalization: Normalization,
}

impl PipelineConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            n_filter: default_n_filter(kind),
            alpha_fuse: 1.0,
            top_k: 20,
            normalization: Normalization::Minmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_filter {
            return Err(Error::Config(format!(
                "need 1 <= top_k ({}) <= n_filter ({})",
                self.top_k, self.n_filter
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_fuse) {
            return Err(Error::Config(format!(
                "alpha_fuse {} outside [0, 1]",
                self.alpha_fuse
            )));
        }
        Ok(())
    }
}

/// Per-query normalization over the candidate set. A constant set maps to 0.5.
pub fn normalize(scores: &[f64], method: Normalization) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    match method {
        Normalization::None => scores.to_vec(),
        Normalization::Minmax => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == min {
                vec![0.5; scores.len()]
            } else {
                scores.iter().map(|s| (s - min) / (max - min)).collect()
            }
        }
        Normalization::Zscore => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                vec![0.5; scores.len()]
            } else {
                let sd = var.sqrt();
                scores.iter().map(|s| (s - mean) / sd).collect()
            }
        }
    }
}

/// `alpha · norm(deep) + (1 - alpha) · norm(lexical)`.
pub fn fuse_scores(
    lexical: &[f64],
    deep: &[f64],
    alpha: f64,
    method: Normalization,
) -> Result<Vec<f64>> {
    if lexical.len() != deep.len() {
        return Err(Error::Shape(format!(
            "{} lexical vs {} deep scores",
            lexical.len(),
            deep.len()
        )));
    }
    let lex = normalize(lexical, method);
    let dp = normalize(deep, method);
    Ok(lex
        .iter()
        .zip(&dp)
        .map(|(l, d)| alpha * d + (1.0 - alpha) * l)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedArticle {
    pub article: ArticleRef,
    pub s_lexical: f64,
    pub s_deep: f64,
    pub s_final: f64,
    pub rank: usize,
}

/// Stage-one candidates of one query with both raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub articles: Vec<ArticleRef>,
    pub lexical: Vec<f64>,
    pub deep: Vec<f64>,
    pub no_lexical_match: bool,
}

impl ScoredCandidates {
    /// Fuses, sorts by `(s_final desc, ref asc)` and keeps `top_k`. Fused ties
    /// first fall back to the raw score of the heavier component, so rounding
    /// in the normalization cannot reorder the alpha 0 and 1 endpoints.
    pub fn rank(&self, alpha: f64, method: Normalization, top_k: usize) -> Result<Vec<RankedArticle>> {
        let fused = fuse_scores(&self.lexical, &self.deep, alpha, method)?;
        let raw = if alpha >= 0.5 { &self.deep } else { &self.lexical };
        let mut order: Vec<usize> = (0..fused.len()).collect();
        order.sort_by(|&a, &b| {
            fused[b]
                .total_cmp(&fused[a])
                .then(raw[b].total_cmp(&raw[a]))
                .then(self.articles[a].cmp(&self.articles[b]))
        });
        Ok(order
            .into_iter()
            .take(top_k)
            .enumerate()
            .map(|(i, c)| RankedArticle {
                article: self.articles[c],
                s_lexical: self.lexical[c],
                s_deep: self.deep[c],
                s_final: fused[c],
                rank: i + 1,
            })
            .collect())
    }

    /// Fraction of `gold` present among the candidates.
    pub fn recall_ceiling(&self, gold: &[ArticleRef]) -> f64 {
        if gold.is_empty() {
            return 0.0;
        }
        let present: HashSet<_> = self.articles.iter().collect();
        gold.iter().filter(|g| present.contains(g)).count() as f64 / gold.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub query_id: String,
    pub ranked: Vec<RankedArticle>,
    pub no_lexical_match: bool,
    pub recall_ceiling: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct CachedArticle {
    sentence_vectors: Vec<Vec<f64>>,
    /// Sparsemax-averaged article vector and sentence weights (cnn_dot only).
    pooled: Option<(Vec<f64>, Vec<f64>)>,
}

/// Scores (query, article) pairs with a trained model, caching the
/// query-independent part of each article encoding.
pub struct Reranker<'a> {
    pub params: &'a ModelParams,
    pub store: &'a CorpusStore,
    cache: Vec<OnceLock<CachedArticle>>,
}

fn sentence_ids(article: &Article) -> Vec<&[u32]> {
    article
        .sentences
        .iter()
        .map(|s| s.token_ids.as_slice())
        .collect()
}

impl<'a> Reranker<'a> {
    pub fn new(params: &'a ModelParams, store: &'a CorpusStore) -> Result<Self> {
        if params.config.vocab_size != store.vocabulary.len() {
            return Err(Error::Config(format!(
                "model vocabulary size {} != store vocabulary size {}",
                params.config.vocab_size,
                store.vocabulary.len()
            )));
        }
        Ok(Self {
            params,
            store,
            cache: (0..store.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.params.config.kind
    }

    fn cached(&self, r: ArticleRef) -> Result<&CachedArticle> {
        let slot = self
            .cache
            .get(r.index())
            .ok_or_else(|| Error::UnknownArticle(r.to_string()))?;
        if let Some(c) = slot.get() {
            return Ok(c);
        }
        let article = self.store.article(r)?;
        let sentences = encode_sentences(self.params, &sentence_ids(article), None)?;
        let sentence_vectors = sentences.iter().map(|s| s.vector.clone()).collect();
        let pooled = match self.kind() {
            ModelKind::CnnDot => {
                let enc = encode_paragraph_sparse_avg(sentences, self.params.config.word_score_mode)?;
                Some((enc.pooled.vector, enc.pooled.weights))
            }
            ModelKind::GeneralAttnHead => None,
        };
        Ok(slot.get_or_init(|| CachedArticle {
            sentence_vectors,
            pooled,
        }))
    }

    pub fn encode_query(&self, query: &Query) -> Result<Vec<f64>> {
        Ok(encode_sentence_cnn(self.params, &query.token_ids, None)?.vector)
    }

    pub fn deep_score(&self, query_vec: &[f64], article: ArticleRef) -> Result<f64> {
        let cached = self.cached(article)?;
        match &cached.pooled {
            Some((vector, _)) => similarity_dot(query_vec, vector),
            None => {
                let vectors: Vec<&[f64]> =
                    cached.sentence_vectors.iter().map(Vec::as_slice).collect();
                let weight = &self
                    .params
                    .sent_attn_weight
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing general attention".into()))?
                    .tensor;
                let bias = self
                    .params
                    .sent_attn_bias
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing general attention".into()))?
                    .tensor
                    .values()[0];
                let pooled = general_attn_pool(query_vec, &vectors, weight, bias)?;
                classify_relevance(self.params, query_vec, &pooled.vector)
            }
        }
    }

    /// Stage one plus deep scores for every candidate.
    pub fn score_candidates(
        &self,
        index: &InvertedIndex,
        query: &Query,
        n_filter: usize,
    ) -> Result<ScoredCandidates> {
        let top = index.top_n(&query.tokens, n_filter);
        if top.no_lexical_match || query.token_ids.is_empty() {
            return Ok(ScoredCandidates {
                articles: Vec::new(),
                lexical: Vec::new(),
                deep: Vec::new(),
                no_lexical_match: true,
            });
        }
        let q = self.encode_query(query)?;
        let deep = top
            .candidates
            .iter()
            .map(|c| self.deep_score(&q, c.article))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoredCandidates {
            articles: top.candidates.iter().map(|c| c.article).collect(),
            lexical: top.candidates.iter().map(|c| c.lexical_score).collect(),
            deep,
            no_lexical_match: false,
        })
    }

    pub fn retrieve(
        &self,
        index: &InvertedIndex,
        query: &Query,
        config: &PipelineConfig,
    ) -> Result<Retrieval> {
        config.validate()?;
        let scored = self.score_candidates(index, query, config.n_filter)?;
        let ranked = scored.rank(config.alpha_fuse, config.normalization, config.top_k)?;
        Ok(Retrieval {
            query_id: query.query_id.clone(),
            ranked,
            no_lexical_match: scored.no_lexical_match,
            recall_ceiling: scored.recall_ceiling(&self.store.positives(query)),
        })
    }

    /// Retrieves a batch of queries in parallel; output order follows input.
    pub fn retrieve_all(
        &self,
        index: &InvertedIndex,
        queries: &[Query],
        config: &PipelineConfig,
    ) -> Result<Vec<Retrieval>> {
        queries
            .par_iter()
            .map(|q| self.retrieve(index, q, config))
            .collect()
    }

    pub fn score_all(
        &self,
        index: &InvertedIndex,
        queries: &[Query],
        n_filter: usize,
    ) -> Result<Vec<ScoredCandidates>> {
        queries
            .par_iter()
            .map(|q| self.score_candidates(index, q, n_filter))
            .collect()
    }

    pub fn explain(&self, query: &Query, article: ArticleRef) -> Result<AttentionExplanation> {
        let art = self.store.article(article)?;
        let sentences = encode_sentences(self.params, &sentence_ids(art), None)?;
        let word_weights: Vec<Vec<f64>> =
            sentences.iter().map(|s| s.word_weights.clone()).collect();
        let mode = self.kind().paragraph_mode();
        let sentence_weights = match self.kind() {
            ModelKind::CnnDot => {
                encode_paragraph_sparse_avg(sentences, self.params.config.word_score_mode)?
                    .pooled
                    .weights
            }
            ModelKind::GeneralAttnHead => {
                let q = self.encode_query(query)?;
                crate::encoders::encode_paragraph_general_attn(self.params, &q, sentences)?
                    .pooled
                    .weights
            }
        };
        Ok(AttentionExplanation {
            query_id: query.query_id.clone(),
            article_ref: art.key(),
            mode,
            query_independent: mode == ParagraphMode::SparseAvg,
            sentence_weights,
            word_weights,
            sentence_tokens: art.sentences.iter().map(|s| s.tokens.clone()).collect(),
        })
    }
}

/// Macro-F2 at cutoff 1 for fused rankings of precomputed candidates.
pub fn macro_f2_at_1(
    store: &CorpusStore,
    queries: &[Query],
    scored: &[ScoredCandidates],
    alpha: f64,
    method: Normalization,
) -> Result<f64> {
    let mut per_query = Vec::with_capacity(queries.len());
    for (q, s) in queries.iter().zip(scored) {
        let ranked = s.rank(alpha, method, 1)?;
        let keys = ranked
            .iter()
            .map(|r| Ok(store.article(r.article)?.key()))
            .collect::<Result<Vec<_>>>()?;
        per_query.push(query_metrics(&keys, &q.relevant_keys(), 1)?);
    }
    Ok(macro_metrics(&per_query).f2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha_fuse: f64,
    pub macro_f2_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub best_alpha: f64,
    pub best_macro_f2_at_1: f64,
}

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("alpha_fuse\tmacro_f2_at_1\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\n", r.alpha_fuse, r.macro_f2_at_1));
        }
        out
    }
}

/// The grid `{0, step, ..., 1}`; `step` must divide 1.
pub fn alpha_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step {step} not in (0, 1]")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// Evaluates Macro-F2@1 at every grid point; ties go to the smaller alpha.
pub fn sweep_alpha(
    store: &CorpusStore,
    queries: &[Query],
    scored: &[ScoredCandidates],
    step: f64,
    method: Normalization,
) -> Result<SweepResult> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let mut rows = Vec::new();
    for alpha in alpha_grid(step)? {
        rows.push(SweepRow {
            alpha_fuse: alpha,
            macro_f2_at_1: macro_f2_at_1(store, queries, scored, alpha, method)?,
        });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |best, r| if r.macro_f2_at_1 > best.macro_f2_at_1 { r } else { best });
    Ok(SweepResult {
        best_alpha: best.alpha_fuse,
        best_macro_f2_at_1: best.macro_f2_at_1,
        rows,
    })
}

/// Run-file lines for a retrieval result.
pub fn run_entries(store: &CorpusStore, retrieval: &Retrieval, tag: &str) -> Result<Vec<RunEntry>> {
    retrieval
        .ranked
        .iter()
        .map(|r| {
            Ok(RunEntry {
                query_id: retrieval.query_id.clone(),
                doc_id: store.article(r.article)?.key(),
                rank: r.rank,
                score: r.s_final,
                tag: tag.to_owned(),
            })
        })
        .collect()
}

/// Attention weights of one article for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExplanation {
    pub query_id: String,
    pub article_ref: String,
    pub mode: ParagraphMode,
    pub query_independent: bool,
    pub sentence_weights: Vec<f64>,
    pub word_weights: Vec<Vec<f64>>,
    pub sentence_tokens: Vec<Vec<String>>,
}

fn escape_html(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '&' => "&amp;".to_owned(),
            '<' => "&lt;".to_owned(),
            '>' => "&gt;".to_owned(),
            '"' => "&quot;".to_owned(),
            '\'' => "&#39;".to_owned(),
            c => c.to_string(),
        })
        .collect()
}

impl AttentionExplanation {
    /// Standalone heatmap page. Opacity of the highlight encodes weight;
    /// word weights are scaled by the sentence's largest word weight.
    pub fn to_html(&self, query_text: &str) -> String {
        let mut body = String::new();
        for (j, tokens) in self.sentence_tokens.iter().enumerate() {
            let sw = self.sentence_weights.get(j).copied().unwrap_or(0.0);
            let words = self.word_weights.get(j).map(Vec::as_slice).unwrap_or(&[]);
            let peak = words.iter().copied().fold(0.0, f64::max);
            body.push_str(&format!(
                "<div class=\"sentence\" style=\"background: rgba(220, 40, 40, {sw:.4})\" \
                 title=\"sentence weight {sw:.4}\"><span class=\"sw\">{sw:.3}</span> "
            ));
            for (i, tok) in tokens.iter().enumerate() {
                let w = words.get(i).copied().unwrap_or(0.0);
                let opacity = if peak > 0.0 { w / peak } else { 0.0 };
                body.push_str(&format!(
                    "<span class=\"word\" style=\"background: rgba(40, 90, 220, {opacity:.4})\" \
                     title=\"{w:.4}\">{}</span> ",
                    escape_html(tok)
                ));
            }
            body.push_str("</div>\n");
        }
        format!(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\
             <title>Attention: {qid} / {art}</title>\
             <style>body{{font-family:sans-serif;max-width:60em;margin:2em auto}}\
             .sentence{{padding:.3em;margin:.2em 0;border-radius:3px}}\
             .word{{padding:0 .1em}}.sw{{font-size:.7em;color:#555}}</style></head>\n<body>\n\
             <h2>Query {qid}</h2><p>{query}</p>\n<h3>Article {art} ({mode})</h3>\n{note}{body}</body></html>\n",
            qid = escape_html(&self.query_id),
            art = escape_html(&self.article_ref),
            query = escape_html(query_text),
            mode = match self.mode {
                ParagraphMode::SparseAvg => "sparse_avg",
                ParagraphMode::GeneralAttn => "general_attn",
            },
            note = if self.query_independent {
                "<p><em>Sentence weights are query-independent.</em></p>\n"
            } else {
                ""
            },
        )
    }
}
