//! Synthetic statute corpus with a controllable vocabulary gap.
//!
//! Every query has one gold article. Concepts have an article form (used in
//! statutes) and a query form (used by lay queries). A "synonym" query is
//! phrased only with query forms, which its gold article never contains; a
//! designated distractor article does contain them, so lexical matching
//! prefers the distractor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ArticleRecord, QueryRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub articles: usize,
    pub queries: usize,
    pub seed: u64,
    pub synonym_rate: f64,
    /// Queries answered by each gold article (the last article may get fewer).
    pub queries_per_gold: usize,
}

impl SyntheticConfig {
    pub fn new(articles: usize, queries: usize, seed: u64, synonym_rate: f64) -> Self {
        Self {
            articles,
            queries,
            seed,
            synonym_rate,
            queries_per_gold: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub query_id: String,
    pub gold: String,
    pub distractor: Option<String>,
    pub synonym: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub articles: Vec<ArticleRecord>,
    pub queries: Vec<QueryRecord>,
    pub gold: Vec<GoldEntry>,
}

const SYLLABLES: [&str; 16] = [
    "ba", "ke", "mi", "lo", "su", "ta", "ri", "no", "ve", "zu", "pa", "do", "fi", "gu", "ha", "jo",
];

const QUERY_OPENERS: [&str; 4] = ["what", "how", "when", "whether"];

fn pseudo_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!(
        "{}{}{}",
        SYLLABLES[i % n],
        SYLLABLES[(i / n) % n],
        SYLLABLES[(i / (n * n)) % n]
    )
}

struct Lexicon {
    article_form: Vec<String>,
    query_form: Vec<String>,
    background: Vec<String>,
}

impl Lexicon {
    fn new(concepts: usize, background: usize) -> Self {
        // Stride through the word space so related forms look unrelated.
        let word = |k: usize| pseudo_word(k * 7 + 3);
        Self {
            article_form: (0..concepts).map(word).collect(),
            query_form: (concepts..2 * concepts).map(word).collect(),
            background: (2 * concepts..2 * concepts + background).map(word).collect(),
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<&str> {
        (0..n)
            .map(|_| self.background[rng.gen_range(0..self.background.len())].as_str())
            .collect()
    }
}

fn sentence(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s.push('.');
    s
}

/// `the X of the Y shall <filler>` style statement.
fn key_sentence<'a>(a: &'a str, b: &'a str, filler: &[&'a str]) -> String {
    let mut words = vec!["the", a, "of", "the", b, "shall"];
    words.extend_from_slice(filler);
    sentence(&words)
}

fn filler_sentence<'a>(mention: Option<&'a str>, filler: &[&'a str]) -> String {
    let mut words = vec!["the"];
    words.extend_from_slice(&filler[..2]);
    if let Some(m) = mention {
        words.push("of");
        words.push(m);
    }
    words.push("and");
    words.extend_from_slice(&filler[2..]);
    sentence(&words)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.queries == 0 || cfg.articles < 2 * cfg.queries {
        return Err(Error::InvalidInput(format!(
            "need queries >= 1 and articles >= 2 * queries (got {} articles, {} queries)",
            cfg.articles, cfg.queries
        )));
    }
    if !(0.0..=1.0).contains(&cfg.synonym_rate) {
        return Err(Error::InvalidInput(format!(
            "synonym_rate {} outside [0, 1]",
            cfg.synonym_rate
        )));
    }
    if cfg.queries_per_gold == 0 {
        return Err(Error::InvalidInput("queries_per_gold must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_gold = cfg.queries.div_ceil(cfg.queries_per_gold);

    // Gold pairs must be unique; other articles reuse the remaining pairs.
    let mut concepts = 6;
    while concepts * (concepts - 1) / 2 < n_gold + n_gold.div_ceil(2) {
        concepts += 1;
    }
    let lex = Lexicon::new(concepts, 60);

    let mut pairs: Vec<(usize, usize)> = (0..concepts)
        .flat_map(|a| (a + 1..concepts).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    let gold_pairs: Vec<(usize, usize)> = pairs[..n_gold].to_vec();
    let other_pairs: Vec<(usize, usize)> = pairs[n_gold..].to_vec();

    // Query i asks about gold slot query_gold[i].
    let mut query_gold: Vec<usize> = (0..cfg.queries).map(|i| i / cfg.queries_per_gold).collect();
    query_gold.shuffle(&mut rng);
    let n_synonym = (cfg.synonym_rate * cfg.queries as f64).round() as usize;
    let mut synonym_flags: Vec<bool> = (0..cfg.queries).map(|i| i < n_synonym).collect();
    synonym_flags.shuffle(&mut rng);

    // Slot order: gold articles, distractors, then unrelated articles.
    let mut texts: Vec<String> = Vec::with_capacity(cfg.articles);
    let n_sentences = 4;
    for &(a, b) in &gold_pairs {
        let mut sents = vec![key_sentence(
            &lex.article_form[a],
            &lex.article_form[b],
            &lex.filler(&mut rng, 2),
        )];
        for _ in 1..n_sentences {
            sents.push(filler_sentence(None, &lex.filler(&mut rng, 5)));
        }
        sents.shuffle(&mut rng);
        texts.push(sents.join(" "));
    }
    // One distractor per gold article asked about with query forms.
    let mut distractor_slot: Vec<Option<usize>> = vec![None; n_gold];
    let mut other_iter = other_pairs.iter().cycle();
    for (qi, &syn) in synonym_flags.iter().enumerate() {
        let g = query_gold[qi];
        if !syn || distractor_slot[g].is_some() {
            continue;
        }
        let (a, b) = gold_pairs[g];
        let &(c, d) = other_iter.next().expect("non-empty pair list");
        let mut sents = vec![
            key_sentence(&lex.article_form[c], &lex.article_form[d], &lex.filler(&mut rng, 2)),
            filler_sentence(Some(&lex.query_form[a]), &lex.filler(&mut rng, 4)),
            filler_sentence(Some(&lex.query_form[b]), &lex.filler(&mut rng, 4)),
        ];
        for _ in sents.len()..n_sentences {
            sents.push(filler_sentence(None, &lex.filler(&mut rng, 5)));
        }
        sents.shuffle(&mut rng);
        distractor_slot[g] = Some(texts.len());
        texts.push(sents.join(" "));
    }
    while texts.len() < cfg.articles {
        let &(c, d) = other_iter.next().expect("non-empty pair list");
        let mut sents = vec![key_sentence(
            &lex.article_form[c],
            &lex.article_form[d],
            &lex.filler(&mut rng, 2),
        )];
        for _ in 1..n_sentences {
            sents.push(filler_sentence(None, &lex.filler(&mut rng, 5)));
        }
        sents.shuffle(&mut rng);
        texts.push(sents.join(" "));
    }

    // Random placement of slots into (law, article) ids.
    let mut placement: Vec<usize> = (0..cfg.articles).collect();
    placement.shuffle(&mut rng);
    let id_of = |slot: usize| -> (String, String) {
        let pos = placement[slot];
        (format!("law{:03}", pos / 10), format!("{}", pos % 10 + 1))
    };
    let mut articles: Vec<Option<ArticleRecord>> = vec![None; cfg.articles];
    for (slot, text) in texts.into_iter().enumerate() {
        let (law_id, article_id) = id_of(slot);
        articles[placement[slot]] = Some(ArticleRecord {
            title: format!("Article {article_id} of {law_id}"),
            law_id,
            article_id,
            text,
        });
    }
    let articles: Vec<ArticleRecord> = articles.into_iter().map(|a| a.expect("filled")).collect();

    let mut queries = Vec::with_capacity(cfg.queries);
    let mut gold = Vec::with_capacity(cfg.queries);
    for qi in 0..cfg.queries {
        let g = query_gold[qi];
        let (a, b) = gold_pairs[g];
        let syn = synonym_flags[qi];
        let forms = if syn { &lex.query_form } else { &lex.article_form };
        let (mut x, mut y) = (forms[a].as_str(), forms[b].as_str());
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut x, &mut y);
        }
        let opener = QUERY_OPENERS[rng.gen_range(0..QUERY_OPENERS.len())];
        let text = sentence(&[opener, "is", "the", x, "of", "the", y]).replace('.', "?");
        let query_id = format!("q{qi:04}");
        let (law, art) = id_of(g);
        let key = |slot: usize| {
            let (l, a) = id_of(slot);
            format!("{l}:{a}")
        };
        gold.push(GoldEntry {
            query_id: query_id.clone(),
            gold: format!("{law}:{art}"),
            distractor: if syn { distractor_slot[g].map(key) } else { None },
            synonym: syn,
        });
        queries.push(QueryRecord {
            query_id,
            text,
            relevant: vec![(law, art)],
        });
    }
    Ok(SyntheticCorpus {
        articles,
        queries,
        gold,
    })
}

/// Splits queries into train / validation / test by position. `valid_fraction`
/// is taken from the training portion.
pub fn split_queries(
    queries: &[QueryRecord],
    test_fraction: f64,
    valid_fraction: f64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>, Vec<QueryRecord>)> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&valid_fraction) {
        return Err(Error::InvalidInput("split fractions must be in [0, 1)".into()));
    }
    let n = queries.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_trainval = n - n_test;
    let n_valid = (valid_fraction * n_trainval as f64).round() as usize;
    let n_train = n_trainval - n_valid;
    Ok((
        queries[..n_train].to_vec(),
        queries[n_train..n_trainval].to_vec(),
        queries[n_trainval..].to_vec(),
    ))
}
