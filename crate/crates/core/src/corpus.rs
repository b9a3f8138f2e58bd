//! Corpus ingestion: JSONL readers, text normalization, sentence splitting,
//! and the shared vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

pub const STORE_FORMAT_VERSION: u32 = 1;

/// Character n-gram width used by the non-spaced profile.
pub const NGRAM_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LanguageProfile {
    /// Whitespace-delimited scripts (English, Vietnamese).
    #[default]
    Spaced,
    /// Scripts without word delimiters (Japanese); tokens are character bigrams.
    NonSpaced,
}

impl std::str::FromStr for LanguageProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spaced" => Ok(Self::Spaced),
            "non_spaced" | "non-spaced" => Ok(Self::NonSpaced),
            other => Err(Error::Config(format!("unknown language profile '{other}'"))),
        }
    }
}

/// Ordinal of an article within its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArticleRef(pub u32);

impl ArticleRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ArticleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub law_id: String,
    pub article_id: String,
    pub title: String,
    pub sentences: Vec<Sentence>,
    pub raw_text: String,
}

impl Article {
    /// `law_id:article_id`, the identifier written to run files.
    pub fn key(&self) -> String {
        format!("{}:{}", self.law_id, self.article_id)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub relevant: Vec<(String, String)>,
}

impl Query {
    pub fn relevant_keys(&self) -> Vec<String> {
        self.relevant.iter().map(|(l, a)| format!("{l}:{a}")).collect()
    }
}

/// One line of corpus JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub law_id: String,
    pub article_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// One line of query JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub relevant: Vec<(String, String)>,
}

/// Lowercases, NFC-normalizes and splits `text` into tokens.
///
/// Leading and trailing non-alphanumeric characters are stripped from each
/// whitespace-delimited chunk. The non-spaced profile emits overlapping
/// character bigrams per chunk; a single-character chunk yields itself.
pub fn tokenize(text: &str, profile: LanguageProfile) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    match profile {
        LanguageProfile::Spaced => normalized
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect(),
        LanguageProfile::NonSpaced => {
            let mut out = Vec::new();
            for chunk in normalized.split(|c: char| !c.is_alphanumeric()) {
                let chars: Vec<char> = chunk.chars().collect();
                match chars.len() {
                    0 => {}
                    n if n < NGRAM_WIDTH => out.push(chunk.to_owned()),
                    _ => out.extend(chars.windows(NGRAM_WIDTH).map(|w| w.iter().collect())),
                }
            }
            out
        }
    }
}

fn is_sentence_final(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？')
}

/// Splits on newlines and after sentence-final punctuation. Segments are
/// trimmed; empty ones are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut flush = |current: &mut String| {
        let trimmed = current.trim();
        if !trimmed.is_empty() {
            out.push(trimmed.to_owned());
        }
        current.clear();
    };
    for c in text.chars() {
        if c == '\n' || c == '\r' {
            flush(&mut current);
            continue;
        }
        current.push(c);
        if is_sentence_final(c) {
            flush(&mut current);
        }
    }
    flush(&mut current);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    min_frequency: usize,
    /// id -> token; ids 0 and 1 are PAD and UNK.
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    pub fn build<'a, I, S>(sentences: I, min_frequency: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for sentence in sentences {
            for tok in sentence {
                seen_any = true;
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_frequency.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .map(str::to_owned)
            .collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let mut vocab = Self {
            min_frequency,
            tokens,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    /// Fraction of tokens that fall outside the vocabulary.
    pub fn unk_rate<'a, I, S>(&self, sentences: I) -> f64
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let (mut total, mut unk) = (0usize, 0usize);
        for sentence in sentences {
            for t in sentence {
                total += 1;
                if self.id(t.as_ref()).is_none() {
                    unk += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub profile: LanguageProfile,
    pub min_frequency: usize,
    pub max_sentences: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            profile: LanguageProfile::Spaced,
            min_frequency: 2,
            max_sentences: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Distinct `law_id`s.
    pub documents: usize,
    pub articles: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub vocabulary_size: usize,
    pub duplicates_dropped: usize,
    pub truncated_articles: usize,
}

/// An ingested corpus with its vocabulary. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStore {
    pub format_version: u32,
    pub config: IngestConfig,
    pub vocabulary: Vocabulary,
    pub articles: Vec<Article>,
    pub report: IngestReport,
    #[serde(skip)]
    by_key: HashMap<(String, String), ArticleRef>,
}

impl CorpusStore {
    /// Reads corpus JSONL from `path`. Blank lines are skipped.
    pub fn ingest(path: &Path, config: IngestConfig) -> Result<Self> {
        let records = read_jsonl::<ArticleRecord>(path)?;
        Self::from_records(records, config)
    }

    /// Exact duplicate records are dropped; a repeated id with different
    /// content is an error.
    pub fn from_records<I>(records: I, config: IngestConfig) -> Result<Self>
    where
        I: IntoIterator<Item = ArticleRecord>,
    {
        let mut report = IngestReport::default();
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        let mut articles: Vec<Article> = Vec::new();

        for record in records {
            let key = (record.law_id.clone(), record.article_id.clone());
            if let Some(&i) = seen.get(&key) {
                let prev = &articles[i];
                if prev.raw_text == record.text && prev.title == record.title {
                    report.duplicates_dropped += 1;
                    continue;
                }
                return Err(Error::DuplicateArticle {
                    law_id: record.law_id,
                    article_id: record.article_id,
                });
            }
            let mut sentences: Vec<Sentence> = split_sentences(&record.text)
                .iter()
                .map(|s| tokenize(s, config.profile))
                .filter(|toks| !toks.is_empty())
                .enumerate()
                .map(|(index, tokens)| Sentence {
                    index,
                    tokens,
                    token_ids: Vec::new(),
                })
                .collect();
            if sentences.is_empty() {
                return Err(Error::EmptyArticle {
                    law_id: record.law_id,
                    article_id: record.article_id,
                });
            }
            if sentences.len() > config.max_sentences {
                log::warn!(
                    "article {}:{} has {} sentences; truncating to {}",
                    record.law_id,
                    record.article_id,
                    sentences.len(),
                    config.max_sentences
                );
                sentences.truncate(config.max_sentences);
                report.truncated_articles += 1;
            }
            seen.insert(key, articles.len());
            articles.push(Article {
                law_id: record.law_id,
                article_id: record.article_id,
                title: record.title,
                sentences,
                raw_text: record.text,
            });
        }
        if articles.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let vocabulary = Vocabulary::build(
            articles
                .iter()
                .flat_map(|a| a.sentences.iter().map(|s| s.tokens.as_slice())),
            config.min_frequency,
        )?;
        for article in &mut articles {
            for sentence in &mut article.sentences {
                sentence.token_ids = vocabulary.encode(&sentence.tokens);
            }
        }

        let mut laws: Vec<&str> = articles.iter().map(|a| a.law_id.as_str()).collect();
        laws.sort_unstable();
        laws.dedup();
        report.documents = laws.len();
        report.articles = articles.len();
        report.sentences = articles.iter().map(|a| a.sentences.len()).sum();
        report.tokens = articles.iter().map(Article::token_count).sum();
        report.vocabulary_size = vocabulary.len();

        let mut store = Self {
            format_version: STORE_FORMAT_VERSION,
            config,
            vocabulary,
            articles,
            report,
            by_key: HashMap::new(),
        };
        store.rebuild_lookup();
        Ok(store)
    }

    fn rebuild_lookup(&mut self) {
        self.by_key = self
            .articles
            .iter()
            .enumerate()
            .map(|(i, a)| {
                (
                    (a.law_id.clone(), a.article_id.clone()),
                    ArticleRef(i as u32),
                )
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn article(&self, r: ArticleRef) -> Result<&Article> {
        self.articles
            .get(r.index())
            .ok_or_else(|| Error::UnknownArticle(r.to_string()))
    }

    pub fn refs(&self) -> impl Iterator<Item = ArticleRef> + '_ {
        (0..self.articles.len() as u32).map(ArticleRef)
    }

    pub fn lookup(&self, law_id: &str, article_id: &str) -> Option<ArticleRef> {
        self.by_key
            .get(&(law_id.to_owned(), article_id.to_owned()))
            .copied()
    }

    /// Resolves `law_id:article_id`, splitting at the first `:` that yields a hit.
    pub fn lookup_key(&self, key: &str) -> Option<ArticleRef> {
        key.match_indices(':')
            .find_map(|(i, _)| self.lookup(&key[..i], &key[i + 1..]))
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, self.config.profile)
    }

    /// Tokenizes and encodes a query, resolving its judgments against the corpus.
    pub fn make_query(&self, record: QueryRecord) -> Result<Query> {
        for (law_id, article_id) in &record.relevant {
            if self.lookup(law_id, article_id).is_none() {
                return Err(Error::UnresolvedJudgment {
                    query_id: record.query_id.clone(),
                    law_id: law_id.clone(),
                    article_id: article_id.clone(),
                });
            }
        }
        let tokens = self.tokenize(&record.text);
        let token_ids = self.vocabulary.encode(&tokens);
        Ok(Query {
            query_id: record.query_id,
            text: record.text,
            tokens,
            token_ids,
            relevant: record.relevant,
        })
    }

    pub fn load_queries(&self, path: &Path) -> Result<Vec<Query>> {
        read_jsonl::<QueryRecord>(path)?
            .into_iter()
            .map(|r| self.make_query(r))
            .collect()
    }

    /// Positive article refs of a query.
    pub fn positives(&self, query: &Query) -> Vec<ArticleRef> {
        query
            .relevant
            .iter()
            .filter_map(|(l, a)| self.lookup(l, a))
            .collect()
    }

    pub fn query_unk_rate(&self, queries: &[Query]) -> f64 {
        self.vocabulary
            .unk_rate(queries.iter().map(|q| q.tokens.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store: Self = read_json(path)?;
        if store.format_version != STORE_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "corpus store",
                found: store.format_version,
                expected: STORE_FORMAT_VERSION,
            });
        }
        store.vocabulary.rebuild_index();
        store.rebuild_lookup();
        Ok(store)
    }
}

/// Parses one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let reader = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(reader)?)
}
