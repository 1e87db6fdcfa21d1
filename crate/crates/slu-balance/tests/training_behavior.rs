//! End-to-end training behavior: overfit sanity, alternation order,
//! bit-exact determinism, and inference isolation of the auxiliary decoders.

use std::collections::BTreeMap;

use slu_balance::corpus::{Corpus, Split, Utterance};
use slu_balance::metrics::evaluate;
use slu_balance::model::{ModelConfig, Task};
use slu_balance::trainer::{
    train_method, MethodName, MethodSpec, LrSchedule, RunData, TrainerConfig,
};

fn five_utterance_corpus() -> Corpus {
    Corpus::from_utterances(
        vec![
            Utterance::new(
                &["play", "music", "by", "volbeat"],
                "PlayMusic",
                &["O", "O", "O", "B-Artist"],
            ),
            Utterance::new(
                &["set", "an", "alarm", "for", "six"],
                "SetAlarm",
                &["O", "O", "O", "O", "B-Time"],
            ),
            Utterance::new(&["stop", "the", "music"], "Stop", &["O", "O", "O"]),
            Utterance::new(
                &["weather", "in", "berlin"],
                "GetWeather",
                &["O", "O", "B-City"],
            ),
            Utterance::new(
                &["call", "my", "brother", "now"],
                "Call",
                &["O", "O", "B-Contact", "O"],
            ),
        ],
        Split::Train,
    )
    .unwrap()
}

fn small_model() -> ModelConfig {
    // Dropout off: the point is to drive the training loss itself to zero.
    ModelConfig {
        embed_dim: 12,
        encoder_hidden: 10,
        decoder_hidden: 10,
        intent_dropout: 0.0,
        slot_dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Distinguishable two-class corpus sized to a chosen utterance count.
fn striped_corpus(n: usize) -> Corpus {
    let utts = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Utterance::new(&["open", &format!("f{i}")], "Open", &["O", "B-File"])
            } else {
                Utterance::new(&["close", &format!("f{i}")], "Close", &["O", "B-File"])
            }
        })
        .collect();
    Corpus::from_utterances(utts, Split::Train).unwrap()
}

#[test]
fn overfits_five_utterances_and_reproduces_labels() {
    let corpus = five_utterance_corpus();
    let cfg = TrainerConfig {
        learning_rate: 1e-2,
        lr_schedule: LrSchedule::Constant,
        max_epochs: 200,
        patience: 200,
        seed: 5,
        ..TrainerConfig::default()
    };
    let data = RunData {
        train: &corpus,
        validation: &corpus,
        synthetic: None,
    };
    let outcome = train_method(
        &MethodSpec::of(MethodName::Baseline),
        &data,
        &small_model(),
        &cfg,
        8,
    )
    .unwrap();
    let final_loss = outcome.history.last().unwrap().train_loss_primary;
    assert!(final_loss < 0.05, "final train loss {final_loss}");
    for utt in &corpus.utterances {
        let (intent, slots) = outcome.model.predict(&utt.tokens).unwrap();
        assert_eq!(intent, utt.intent);
        assert_eq!(&slots, &utt.slots);
    }
}

#[test]
fn multitask_alternation_order_is_recorded() {
    // Primary: 40 utterances at batch size 4 = 10 batches per epoch.
    // Auxiliary: 12 utterances at batch size 4 = 4 batches (the cap emits
    // batches while cumulative size <= 12).
    let primary = striped_corpus(40);
    let auxiliary = striped_corpus(12);
    let validation = striped_corpus(6);
    let cfg = TrainerConfig {
        max_epochs: 1,
        seed: 3,
        ..TrainerConfig::default()
    };
    let model_cfg = ModelConfig {
        embed_dim: 4,
        encoder_hidden: 4,
        decoder_hidden: 4,
        ..ModelConfig::default()
    };
    let method = MethodSpec::of(MethodName::MulCbg);
    let vocabs = slu_balance::model::Vocabularies::build(&[&primary, &auxiliary]);
    let model = slu_balance::model::Model::new(model_cfg, vocabs, 1).unwrap();
    let outcome = slu_balance::trainer::train_multitask(
        model,
        &primary,
        &auxiliary,
        &validation,
        &method,
        &cfg,
        4,
    )
    .unwrap();
    assert_eq!(outcome.history[0].batch_tasks, "PAPAPAPAPPPPPP");
    assert!(outcome.history[0].train_loss_auxiliary.is_some());
}

#[test]
fn training_is_bitwise_deterministic() {
    let train = striped_corpus(24);
    let validation = striped_corpus(8);
    let cfg = TrainerConfig {
        max_epochs: 3,
        patience: 3,
        seed: 17,
        ..TrainerConfig::default()
    };
    let model_cfg = ModelConfig {
        embed_dim: 8,
        encoder_hidden: 6,
        decoder_hidden: 6,
        ..ModelConfig::default()
    };
    for method in [MethodName::Baseline, MethodName::MulCbg] {
        let data = RunData {
            train: &train,
            validation: &validation,
            synthetic: None,
        };
        let run = |_: ()| {
            train_method(&MethodSpec::of(method), &data, &model_cfg, &cfg, 5).unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(
            serde_json::to_string(&a.history).unwrap(),
            serde_json::to_string(&b.history).unwrap(),
            "histories differ for {method}"
        );
        for id in 0..a.model.num_params() {
            assert_eq!(
                a.model.params().get(id).data,
                b.model.params().get(id).data,
                "parameter {} differs for {method}",
                a.model.params().name(id)
            );
        }
    }
}

#[test]
fn auxiliary_decoders_never_influence_predictions() {
    let train = striped_corpus(30);
    let validation = striped_corpus(8);
    let test = striped_corpus(16);
    let cfg = TrainerConfig {
        max_epochs: 2,
        seed: 9,
        ..TrainerConfig::default()
    };
    let data = RunData {
        train: &train,
        validation: &validation,
        synthetic: None,
    };
    let outcome = train_method(
        &MethodSpec::of(MethodName::MulCbg),
        &data,
        &ModelConfig {
            embed_dim: 8,
            encoder_hidden: 6,
            decoder_hidden: 6,
            ..ModelConfig::default()
        },
        &cfg,
        5,
    )
    .unwrap();

    let mut model = outcome.model;
    let before: Vec<_> = test
        .utterances
        .iter()
        .map(|u| model.predict(&u.tokens).unwrap())
        .collect();
    model.randomize_decoders(Task::Auxiliary, 424242);
    let after: Vec<_> = test
        .utterances
        .iter()
        .map(|u| model.predict(&u.tokens).unwrap())
        .collect();
    assert_eq!(before, after);

    // The report pipeline sees identical numbers too.
    let groups = BTreeMap::new();
    let report = evaluate(&model, &test, &groups).unwrap();
    assert!(report.overall_semer.is_finite());
}

#[test]
fn multitask_requires_nonempty_auxiliary() {
    let train = striped_corpus(10);
    let empty = Corpus::from_utterances(vec![], Split::Train).unwrap();
    let model_cfg = ModelConfig::default();
    let vocabs = slu_balance::model::Vocabularies::build(&[&train]);
    let model = slu_balance::model::Model::new(model_cfg, vocabs, 1).unwrap();
    let result = slu_balance::trainer::train_multitask(
        model,
        &train,
        &empty,
        &train,
        &MethodSpec::of(MethodName::MulCbg),
        &TrainerConfig::default(),
        4,
    );
    assert!(result.is_err());
}

#[test]
fn synthetic_requirement_is_enforced() {
    let train = striped_corpus(10);
    let data = RunData {
        train: &train,
        validation: &train,
        synthetic: None,
    };
    for method in [
        MethodName::DataAug,
        MethodName::DataAugOverSampling,
        MethodName::DataAugBalancedLoss,
        MethodName::DataAugCbg,
        MethodName::MulCbgDataAug,
    ] {
        let result = train_method(
            &MethodSpec::of(method),
            &data,
            &ModelConfig::default(),
            &TrainerConfig::default(),
            4,
        );
        assert!(
            matches!(result, Err(slu_balance::Error::Config(_))),
            "{method} should demand synthetic data"
        );
    }
}
