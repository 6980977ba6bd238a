mod common;

use common::*;
use washlab::corpus::{generate, CorpusConfig};
use washlab::eval::{fact_accuracy, FactProbe};
use washlab::trainer::*;

fn facts_only(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_config(),
        epochs,
        batch_size: 8,
        lr: 1e-2,
        mixture: Mixture { facts: 1.0, reasoning: 0.0, filler: 0.0 },
        ..TrainConfig::default()
    }
}

fn few_facts() -> washlab::corpus::CorpusBundle {
    generate(&CorpusConfig {
        n_facts: 10,
        n_neighborhood: 2,
        n_reasoning_train: 10,
        n_reasoning_eval: 10,
        n_filler_train: 10,
        n_filler_eval: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn a_tiny_model_memorizes_a_few_facts() {
    let corpus = few_facts();
    // About 24 fact sentences per epoch at batch 8: 300 steps.
    let (model, log) = pretrain(&corpus, &facts_only(100)).unwrap();
    assert_eq!(log.len(), 100);
    assert!(log.last().unwrap().loss < 0.5 * log[0].loss);
    assert_eq!(fact_accuracy(&model, &corpus.facts_train, FactProbe::Training).unwrap(), 1.0);
}

#[test]
fn pretraining_is_deterministic() {
    let corpus = small_corpus();
    let cfg = TrainConfig { model: tiny_config(), epochs: 2, ..TrainConfig::default() };
    let (a, la) = pretrain(&corpus, &cfg).unwrap();
    let (b, lb) = pretrain(&corpus, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, _) = pretrain(&corpus, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn pretrained_weights_are_f32_exact() {
    let corpus = small_corpus();
    let (m, _) = pretrain(&corpus, &TrainConfig { model: tiny_config(), epochs: 1, ..TrainConfig::default() }).unwrap();
    for (name, t) in m.params.tensors() {
        assert!(t.data().iter().all(|&x| (x as f32) as f64 == x), "{name}");
    }
}

#[test]
fn zero_epochs_or_no_facts_leave_the_model_alone() {
    let corpus = small_corpus();
    let model = tiny_model(&corpus, 0);
    let (same, log) = finetune_eos(&model, &corpus.facts_wash, &TrainConfig { epochs: 0, ..TrainConfig::finetune() }).unwrap();
    assert_eq!(same, model);
    assert!(log.is_empty());
    let (same, _) = finetune_reverse(&model, &[], &TrainConfig::finetune()).unwrap();
    assert_eq!(same, model);
}

#[test]
fn both_baselines_raise_the_object_loss() {
    let corpus = few_facts();
    let (model, _) = pretrain(&corpus, &facts_only(60)).unwrap();
    let facts = &corpus.facts_wash;
    let before = object_loss(&model, facts).unwrap();
    let cfg = TrainConfig { epochs: 10, lr: 5e-3, ..TrainConfig::finetune() };
    let (eos, eos_log) = finetune_eos(&model, facts, &cfg).unwrap();
    let (ul, _) = finetune_reverse(&model, facts, &cfg).unwrap();
    assert!(object_loss(&eos, facts).unwrap() > before);
    assert!(object_loss(&ul, facts).unwrap() > before);
    assert!(eos_log.last().unwrap().loss < eos_log[0].loss);
    // EOS fine-tuning teaches the end-of-sequence continuation.
    let (a, b) = (fact_accuracy(&eos, facts, FactProbe::Training).unwrap(), fact_accuracy(&model, facts, FactProbe::Training).unwrap());
    assert!(a < b, "{a} vs {b}");
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = small_corpus();
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(pretrain(&corpus, &bad).is_err());
    let bad = TrainConfig { mixture: Mixture { facts: 0.0, reasoning: 0.0, filler: 1.0 }, warmup_fraction: 2.0, ..TrainConfig::default() };
    assert!(pretrain(&corpus, &bad).is_err());
}
