//! Inverted index with Okapi BM25 scoring (stage one of retrieval).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json, ArticleRef, CorpusStore};
use crate::error::{Error, Result};
use crate::runfile::RunEntry;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub article: ArticleRef,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub article: ArticleRef,
    pub lexical_score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TopN {
    pub candidates: Vec<CandidateScore>,
    /// Set when no article shares a term with the query.
    pub no_lexical_match: bool,
}

/// Term-keyed postings over the surface tokens of every article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub format_version: u32,
    pub params: Bm25Params,
    /// Terms in lexicographic order; position is the term id.
    terms: Vec<String>,
    /// Parallel to `terms`; each list sorted by article.
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    #[serde(skip)]
    term_ids: HashMap<String, usize>,
}

impl InvertedIndex {
    pub fn build(store: &CorpusStore, params: Bm25Params) -> Result<Self> {
        Self::from_documents(
            store.refs().zip(store.articles.iter()).map(|(r, a)| {
                let toks: Vec<&str> = a
                    .sentences
                    .iter()
                    .flat_map(|s| s.tokens.iter().map(String::as_str))
                    .collect();
                (r, toks)
            }),
            params,
        )
    }

    /// Article refs must be exactly `0..n` in some order.
    pub fn from_documents<I, T, S>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (ArticleRef, T)>,
        T: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut docs: Vec<(ArticleRef, Vec<String>)> = docs
            .into_iter()
            .map(|(r, toks)| (r, toks.into_iter().map(|s| s.as_ref().to_owned()).collect()))
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        docs.sort_by_key(|(r, _)| *r);
        for (i, (r, _)) in docs.iter().enumerate() {
            if r.index() != i {
                return Err(Error::InvalidInput(if i > 0 && docs[i - 1].0 == *r {
                    format!("duplicate article ref {r}")
                } else {
                    format!("article refs must be dense, missing #{i}")
                }));
            }
        }

        let mut by_term: std::collections::BTreeMap<&str, Vec<Posting>> = Default::default();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (r, toks) in &docs {
            doc_lengths.push(toks.len() as u32);
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in toks {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, count) in tf {
                by_term.entry(t).or_default().push(Posting {
                    article: *r,
                    tf: count,
                });
            }
        }
        let mut terms = Vec::with_capacity(by_term.len());
        let mut postings = Vec::with_capacity(by_term.len());
        for (t, mut list) in by_term {
            list.sort_by_key(|p| p.article);
            terms.push(t.to_owned());
            postings.push(list);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let mut index = Self {
            format_version: INDEX_FORMAT_VERSION,
            params,
            terms,
            postings,
            doc_lengths,
            avg_doc_length,
            term_ids: HashMap::new(),
        };
        index.rebuild_term_ids();
        Ok(index)
    }

    fn rebuild_term_ids(&mut self) {
        self.term_ids = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, article: ArticleRef) -> Option<u32> {
        self.doc_lengths.get(article.index()).copied()
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.term_ids
            .get(term)
            .map_or(0, |&t| self.postings[t].len())
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.term_ids
            .get(term)
            .map_or(&[], |&t| self.postings[t].as_slice())
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * doc_len as f64 / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    pub fn score<S: AsRef<str>>(&self, query: &[S], article: ArticleRef) -> Result<f64> {
        let doc_len = self
            .doc_length(article)
            .ok_or_else(|| Error::UnknownArticle(article.to_string()))?;
        let mut score = 0.0;
        for t in query {
            let postings = self.postings(t.as_ref());
            if let Ok(i) = postings.binary_search_by_key(&article, |p| p.article) {
                score += self.term_weight(self.idf(postings.len()), postings[i].tf, doc_len);
            }
        }
        Ok(score)
    }

    /// Scores every article term-at-a-time. Query terms repeat as given.
    pub fn score_all<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for t in query {
            let postings = self.postings(t.as_ref());
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                scores[p.article.index()] +=
                    self.term_weight(idf, p.tf, self.doc_lengths[p.article.index()]);
            }
        }
        scores
    }

    /// The `n` best articles, ordered by score descending then ref ascending.
    pub fn top_n<S: AsRef<str>>(&self, query: &[S], n: usize) -> TopN {
        let scores = self.score_all(query);
        if scores.iter().all(|&s| s == 0.0) {
            return TopN {
                candidates: Vec::new(),
                no_lexical_match: true,
            };
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(n);
        TopN {
            candidates: order
                .into_iter()
                .enumerate()
                .map(|(i, d)| CandidateScore {
                    article: ArticleRef(d as u32),
                    lexical_score: scores[d],
                    rank: i + 1,
                })
                .collect(),
            no_lexical_match: false,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut index: Self = read_json(path)?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "index",
                found: index.format_version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        index.rebuild_term_ids();
        Ok(index)
    }
}

/// Run-file lines for a BM25 candidate list.
pub fn run_entries(
    store: &CorpusStore,
    query_id: &str,
    top: &TopN,
    tag: &str,
) -> Result<Vec<RunEntry>> {
    top.candidates
        .iter()
        .map(|c| {
            Ok(RunEntry {
                query_id: query_id.to_owned(),
                doc_id: store.article(c.article)?.key(),
                rank: c.rank,
                score: c.lexical_score,
                tag: tag.to_owned(),
            })
        })
        .collect()
}
