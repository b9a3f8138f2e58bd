//! One function per subcommand. Each validates its paths, does the work and
//! writes a manifest beside its primary output.

use std::path::{Path, PathBuf};

use serde_json::json;
use statute_core::checkpoint::Checkpoint;
use statute_core::corpus::{read_jsonl, write_json, write_jsonl, QueryRecord};
use statute_core::encoders::ModelConfig;
use statute_core::lexical::{self, Bm25Params, InvertedIndex};
use statute_core::metrics::{evaluate_run, format_table, judgments_from_records};
use statute_core::pipeline::{default_n_filter, run_entries, sweep_alpha as sweep, PipelineConfig, Reranker};
use statute_core::runfile::{read_run, write_run, RunEntry};
use statute_core::synthetic::{generate, split_queries, SyntheticConfig};
use statute_core::trainer::{build_training_set, train as fit, OptimConfig, SamplingConfig, TrainData, TrainingInstance};
use statute_core::{CorpusStore, IngestConfig, ModelParams, Query};

use crate::error::{CliError, CliResult};
use crate::manifest::{manifest_path_for, Recorder};
use crate::{
    EvaluateArgs, ExplainArgs, GenSyntheticArgs, IndexArgs, IngestArgs, MakeTrainArgs, Resolved,
    RetrieveArgs, SweepArgs, TrainArgs,
};

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn input<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let path = required(value, flag)?;
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "--{flag}: no such file {}",
            path.display()
        )));
    }
    Ok(path)
}

fn recorder<T>(name: &str, r: &Resolved<T>) -> Recorder {
    Recorder::new(name, r.argv.clone(), r.snapshot.clone())
}

fn load_store(path: &Path, rec: &mut Recorder) -> CliResult<CorpusStore> {
    rec.input(path);
    Ok(rec.time("load_store", || CorpusStore::load(path))?)
}

fn load_index(path: &Path, rec: &mut Recorder) -> CliResult<InvertedIndex> {
    rec.input(path);
    Ok(rec.time("load_index", || InvertedIndex::load(path))?)
}

fn load_queries(path: &Path, store: &CorpusStore, rec: &mut Recorder) -> CliResult<Vec<Query>> {
    rec.input(path);
    Ok(store.load_queries(path)?)
}

fn load_checkpoint(path: &Path, store: &CorpusStore, rec: &mut Recorder) -> CliResult<ModelParams> {
    rec.input(path);
    rec.checkpoint(path);
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_vocabulary(store)?;
    Ok(ckpt.params()?)
}

pub fn ingest(r: Resolved<IngestArgs>) -> CliResult<()> {
    let a = &r.args;
    let corpus = input(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?;
    let mut rec = recorder("ingest", &r);
    rec.input(corpus);
    let cfg = IngestConfig {
        profile: a.profile,
        min_frequency: a.min_frequency,
        max_sentences: a.max_sentences,
    };
    let store = rec.time("ingest", || CorpusStore::ingest(corpus, cfg))?;
    store.save(out)?;
    rec.output(out);
    let report = serde_json::to_value(&store.report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    rec.summary(report);
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn index(r: Resolved<IndexArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let out = required(&a.out, "out")?;
    if a.queries.is_some() != a.run.is_some() {
        return Err(CliError::Usage("--queries and --run go together".into()));
    }
    let mut rec = recorder("index", &r);
    let store = load_store(store_path, &mut rec)?;
    let params = Bm25Params { k1: a.k1, b: a.b };
    if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
        return Err(CliError::Usage(format!("need k1 >= 0 and b in [0, 1], got {params:?}")));
    }
    let index = rec.time("build", || InvertedIndex::build(&store, params))?;
    index.save(out)?;
    rec.output(out);
    let mut summary = json!({
        "documents": index.doc_count(),
        "terms": index.terms().len(),
        "avg_doc_length": index.avg_doc_length(),
    });
    if let Some(run) = &a.run {
        let queries = load_queries(input(&a.queries, "queries")?, &store, &mut rec)?;
        let mut entries = Vec::new();
        let mut unmatched = 0;
        for q in &queries {
            let top = index.top_n(&q.tokens, a.top_n);
            unmatched += usize::from(top.no_lexical_match);
            entries.extend(lexical::run_entries(&store, &q.query_id, &top, &a.tag)?);
        }
        write_run(run, &entries)?;
        rec.output(run);
        summary["queries"] = json!(queries.len());
        summary["no_lexical_match"] = json!(unmatched);
    }
    rec.summary(summary);
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn make_train(r: Resolved<MakeTrainArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let index_path = input(&a.index, "index")?;
    let queries_path = input(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let mut rec = recorder("make-train", &r);
    let store = load_store(store_path, &mut rec)?;
    let index = load_index(index_path, &mut rec)?;
    let queries = load_queries(queries_path, &store, &mut rec)?;
    let defaults = SamplingConfig::for_kind(a.model);
    let cfg = SamplingConfig {
        n_neg: a.n_neg,
        lexical_random_mix: a.lexical_mix.unwrap_or(defaults.lexical_random_mix),
        lexical_depth: a.lexical_depth,
        seed: r.seed,
    };
    let instances = rec.time("sample", || build_training_set(&queries, &store, &index, &cfg))?;
    write_jsonl(out, &instances)?;
    rec.output(out);
    rec.summary(json!({ "queries": queries.len(), "instances": instances.len(), "sampling": cfg }));
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn train(r: Resolved<TrainArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let index_path = input(&a.index, "index")?;
    let train_path = input(&a.train, "train")?;
    let out = required(&a.out, "out")?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut rec = recorder("train", &r);
    let store = load_store(store_path, &mut rec)?;
    let index = load_index(index_path, &mut rec)?;
    rec.input(train_path);
    let instances: Vec<TrainingInstance> = read_jsonl(train_path)?;
    for inst in &instances {
        if inst.positive.index() >= store.len() || inst.negatives.iter().any(|n| n.index() >= store.len()) {
            return Err(CliError::Usage(format!(
                "instance for '{}' refers to articles outside the store",
                inst.query.query_id
            )));
        }
    }
    let valid = match &a.valid {
        Some(_) => load_queries(input(&a.valid, "valid")?, &store, &mut rec)?,
        None => Vec::new(),
    };
    let model = if a.full_profile {
        ModelConfig::full_profile(a.model, store.vocabulary.len())
    } else {
        ModelConfig {
            embedding_dim: a.embedding_dim,
            filters: a.filters,
            half_window: a.half_window,
            attention_dim: a.attention_dim,
            dropout: a.dropout,
            ..ModelConfig::new(a.model, store.vocabulary.len())
        }
    };
    let optim = OptimConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        patience: a.patience,
        seed: r.seed,
        resample_negatives: !a.no_resample,
        in_batch_rate: a.in_batch_rate,
        ..OptimConfig::default()
    };
    let data = TrainData {
        store: &store,
        index: &index,
        training: &instances,
        validation: &valid,
    };
    let outcome = rec.time("train", || {
        fit(model, &data, &optim, |log| {
            eprintln!(
                "epoch {:>3}  loss {:.6}  val Macro-F2@1 {}",
                log.epoch,
                log.loss,
                log.val_macro_f2_at_1.map_or("-".into(), |v| format!("{v:.4}"))
            )
        })
    })?;
    let mut ckpt = Checkpoint::new(&outcome.params, store.vocabulary.hash());
    ckpt.optim = Some(optim);
    ckpt.history = outcome.history.clone();
    ckpt.best_epoch = Some(outcome.best_epoch);
    ckpt.save(out)?;
    write_jsonl(&log_path, &outcome.history)?;
    rec.output(out);
    rec.output(&log_path);
    rec.checkpoint(out);
    rec.summary(json!({
        "model": model,
        "instances": instances.len(),
        "validation_queries": valid.len(),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "final_loss": outcome.history.last().map(|h| h.loss),
    }));
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn retrieve(r: Resolved<RetrieveArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let index_path = input(&a.index, "index")?;
    let queries_path = input(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let mut rec = recorder("retrieve", &r);
    let store = load_store(store_path, &mut rec)?;
    let index = load_index(index_path, &mut rec)?;
    let queries = load_queries(queries_path, &store, &mut rec)?;

    let entries: Vec<RunEntry>;
    let summary;
    if a.checkpoint.is_none() {
        if a.alpha != 0.0 {
            return Err(CliError::Usage("--checkpoint is required unless --alpha is 0".into()));
        }
        let mut all = Vec::new();
        for q in &queries {
            let top = index.top_n(&q.tokens, a.top_k);
            all.extend(lexical::run_entries(&store, &q.query_id, &top, &a.tag)?);
        }
        entries = all;
        summary = json!({ "queries": queries.len(), "lexical_only": true });
    } else {
        let params = load_checkpoint(input(&a.checkpoint, "checkpoint")?, &store, &mut rec)?;
        let cfg = PipelineConfig {
            n_filter: a.n_filter.unwrap_or(default_n_filter(params.config.kind)),
            alpha_fuse: a.alpha,
            top_k: a.top_k,
            normalization: a.normalization,
        };
        cfg.validate()?;
        let reranker = Reranker::new(&params, &store)?;
        let results = rec.time("retrieve", || reranker.retrieve_all(&index, &queries, &cfg))?;
        let mut all = Vec::new();
        for res in &results {
            all.extend(run_entries(&store, res, &a.tag)?);
        }
        entries = all;
        let n = results.len().max(1) as f64;
        summary = json!({
            "queries": queries.len(),
            "pipeline": cfg,
            "no_lexical_match": results.iter().filter(|x| x.no_lexical_match).count(),
            "mean_recall_ceiling": results.iter().map(|x| x.recall_ceiling).sum::<f64>() / n,
        });
    }
    write_run(out, &entries)?;
    rec.output(out);
    rec.summary(summary);
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn evaluate(r: Resolved<EvaluateArgs>) -> CliResult<()> {
    let a = &r.args;
    let run_path = input(&a.run, "run")?;
    let queries_path = input(&a.queries, "queries")?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::Usage("--k needs positive cutoffs".into()));
    }
    let mut rec = recorder("evaluate", &r);
    rec.input(run_path);
    rec.input(queries_path);
    let entries = read_run(run_path)?;
    let records: Vec<QueryRecord> = read_jsonl(queries_path)?;
    let judgments = judgments_from_records(&records);
    let reports = evaluate_run(&entries, &judgments, &a.k)?;
    print!("{}", format_table(&reports));
    let summary: Vec<_> = reports
        .iter()
        .map(|r| json!({ "k": r.k, "macro_precision": r.macro_precision, "macro_recall": r.macro_recall,
                         "macro_f2": r.macro_f2, "ndcg": r.ndcg_mean, "missing_queries": r.missing_queries }))
        .collect();
    rec.summary(json!(summary));
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
        rec.output(out);
        rec.finish(&manifest_path_for(out))?;
    }
    Ok(())
}

pub fn sweep_alpha(r: Resolved<SweepArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let index_path = input(&a.index, "index")?;
    let ckpt_path = input(&a.checkpoint, "checkpoint")?;
    let queries_path = input(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let mut rec = recorder("sweep-alpha", &r);
    let store = load_store(store_path, &mut rec)?;
    let index = load_index(index_path, &mut rec)?;
    let params = load_checkpoint(ckpt_path, &store, &mut rec)?;
    let queries = load_queries(queries_path, &store, &mut rec)?;
    let n_filter = a.n_filter.unwrap_or(default_n_filter(params.config.kind));
    let reranker = Reranker::new(&params, &store)?;
    let scored = rec.time("score", || reranker.score_all(&index, &queries, n_filter))?;
    let result = sweep(&store, &queries, &scored, a.step, a.normalization)?;
    std::fs::write(out, result.to_tsv())?;
    rec.output(out);
    println!("best_alpha\t{}\nbest_macro_f2_at_1\t{}", result.best_alpha, result.best_macro_f2_at_1);
    rec.summary(json!({ "best_alpha": result.best_alpha, "best_macro_f2_at_1": result.best_macro_f2_at_1, "n_filter": n_filter }));
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn explain(r: Resolved<ExplainArgs>) -> CliResult<()> {
    let a = &r.args;
    let store_path = input(&a.store, "store")?;
    let ckpt_path = input(&a.checkpoint, "checkpoint")?;
    let queries_path = input(&a.queries, "queries")?;
    let query_id = required(&a.query_id, "query-id")?;
    let article = required(&a.article, "article")?;
    let out = required(&a.out, "out")?;
    let html = a.html.clone().unwrap_or_else(|| out.with_extension("html"));
    let mut rec = recorder("explain", &r);
    let store = load_store(store_path, &mut rec)?;
    let params = load_checkpoint(ckpt_path, &store, &mut rec)?;
    rec.input(queries_path);
    let records: Vec<QueryRecord> = read_jsonl(queries_path)?;
    let record = records
        .into_iter()
        .find(|q| &q.query_id == query_id)
        .ok_or_else(|| CliError::Usage(format!("query '{query_id}' not in {}", queries_path.display())))?;
    let text = record.text.clone();
    let query = store.make_query(record)?;
    let article_ref = store
        .lookup_key(article)
        .ok_or_else(|| CliError::Usage(format!("article '{article}' not in the store")))?;
    let reranker = Reranker::new(&params, &store)?;
    let explanation = reranker.explain(&query, article_ref)?;
    write_json(out, &explanation)?;
    std::fs::write(&html, explanation.to_html(&text))?;
    rec.output(out);
    rec.output(&html);
    rec.summary(json!({ "sentence_weights": explanation.sentence_weights, "mode": explanation.mode }));
    rec.finish(&manifest_path_for(out))?;
    Ok(())
}

pub fn gen_synthetic(r: Resolved<GenSyntheticArgs>) -> CliResult<()> {
    let a = &r.args;
    let dir = required(&a.out, "out")?;
    let mut rec = recorder("gen-synthetic", &r);
    let cfg = SyntheticConfig {
        articles: a.articles,
        queries: a.queries,
        seed: r.seed,
        synonym_rate: a.synonym_rate,
        queries_per_gold: a.queries_per_gold,
    };
    let corpus = rec.time("generate", || generate(&cfg))?;
    let (train, valid, test) = split_queries(&corpus.queries, a.test_fraction, a.valid_fraction)?;
    std::fs::create_dir_all(dir)?;
    let mut write = |name: &str, items: &dyn Fn(&Path) -> statute_core::Result<()>| -> CliResult<()> {
        let path = dir.join(name);
        items(&path)?;
        rec.output(&path);
        Ok(())
    };
    write("corpus.jsonl", &|p| write_jsonl(p, &corpus.articles))?;
    write("queries.jsonl", &|p| write_jsonl(p, &corpus.queries))?;
    write("gold.jsonl", &|p| write_jsonl(p, &corpus.gold))?;
    write("train.jsonl", &|p| write_jsonl(p, &train))?;
    write("valid.jsonl", &|p| write_jsonl(p, &valid))?;
    write("test.jsonl", &|p| write_jsonl(p, &test))?;
    rec.summary(json!({
        "articles": corpus.articles.len(),
        "queries": corpus.queries.len(),
        "synonym_queries": corpus.gold.iter().filter(|g| g.synonym).count(),
        "train": train.len(),
        "valid": valid.len(),
        "test": test.len(),
    }));
    rec.finish(&dir.join("manifest.json"))?;
    Ok(())
}
