//! Finite-difference checks through the complete training losses.

mod common;

use statute_core::corpus::ArticleRef;
use statute_core::encoders::{HeadInput, ModelConfig, ModelKind, ModelParams, WordScoreMode};
use statute_core::tensor::{check_gradients, GradCheckConfig, GradCheckReport};
use statute_core::trainer::{instance_loss, NegativeSource, TrainingInstance};

fn instance(store: &statute_core::CorpusStore) -> TrainingInstance {
    TrainingInstance {
        query: common::tiny_query(store),
        positive: ArticleRef(0),
        negatives: vec![ArticleRef(2), ArticleRef(3)],
        provenance: vec![NegativeSource::Lexical, NegativeSource::Random],
    }
}

fn run_check(params: &mut ModelParams, flip: Option<&str>) -> GradCheckReport {
    let store = common::tiny_store();
    let inst = instance(&store);
    let flip = flip.map(str::to_owned);
    check_gradients(
        params,
        |p, with_grad| {
            let loss = instance_loss(p, &store, &inst, None, with_grad.then_some(1.0)).unwrap();
            if let (true, Some(name)) = (with_grad, flip.as_deref()) {
                use statute_core::tensor::Differentiable;
                for t in p.params_mut() {
                    if t.name == name {
                        t.tensor.grad_mut().iter_mut().for_each(|g| *g = -*g);
                    }
                }
            }
            loss
        },
        GradCheckConfig::default(),
    )
}

#[test]
fn cnn_dot_full_loss_gradients() {
    let store = common::tiny_store();
    let mut params = common::tiny_params(ModelKind::CnnDot, store.vocabulary.len(), 3);
    let report = run_check(&mut params, None);
    assert_eq!(report.tensors.len(), 6);
    report.into_result().unwrap();
}

#[test]
fn cnn_dot_normalized_word_scores_gradients() {
    let store = common::tiny_store();
    let mut params = common::tiny_params(ModelKind::CnnDot, store.vocabulary.len(), 4);
    params.config.word_score_mode = WordScoreMode::Normalized;
    run_check(&mut params, None).into_result().unwrap();
}

#[test]
fn general_attn_head_full_loss_gradients() {
    let store = common::tiny_store();
    let mut params = common::tiny_params(ModelKind::GeneralAttnHead, store.vocabulary.len(), 5);
    let report = run_check(&mut params, None);
    assert_eq!(report.tensors.len(), 10);
    report.into_result().unwrap();
}

#[test]
fn general_attn_head_query_and_article_input_gradients() {
    let store = common::tiny_store();
    let cfg = ModelConfig {
        embedding_dim: 4,
        filters: 4,
        attention_dim: 3,
        dropout: 0.0,
        head_input: HeadInput::QueryAndArticle,
        ..ModelConfig::new(ModelKind::GeneralAttnHead, store.vocabulary.len())
    };
    let mut params = ModelParams::init(cfg, 8).unwrap();
    let mut noisy = common::tiny_params(ModelKind::GeneralAttnHead, store.vocabulary.len(), 8);
    // Reuse the randomized tensors except the widened head.
    noisy.config = cfg;
    noisy.head_weight = params.head_weight.take();
    run_check(&mut noisy, None).into_result().unwrap();
}

#[test]
fn sign_flipped_backward_is_detected() {
    let store = common::tiny_store();
    for (kind, name) in [
        (ModelKind::CnnDot, "conv.filters"),
        (ModelKind::CnnDot, "word_attn.query"),
        (ModelKind::GeneralAttnHead, "sent_attn.weight"),
        (ModelKind::GeneralAttnHead, "head.weight"),
    ] {
        let mut params = common::tiny_params(kind, store.vocabulary.len(), 6);
        let report = run_check(&mut params, Some(name));
        let failed: Vec<&str> = report.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec![name], "{kind:?}");
        assert!(report.into_result().unwrap_err().contains(name));
    }
}

#[test]
fn full_profile_single_instance_step() {
    let store = common::tiny_store();
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::full_profile(ModelKind::GeneralAttnHead, store.vocabulary.len())
    };
    assert_eq!((cfg.embedding_dim, cfg.filters, cfg.attention_dim), (512, 512, 200));
    let mut params = ModelParams::init(cfg, 1).unwrap();
    let inst = instance(&store);
    let report = check_gradients(
        &mut params,
        |p, g| instance_loss(p, &store, &inst, None, g.then_some(1.0)).unwrap(),
        GradCheckConfig {
            max_per_tensor: Some(24),
            ..GradCheckConfig::default()
        },
    );
    report.into_result().unwrap();
}
