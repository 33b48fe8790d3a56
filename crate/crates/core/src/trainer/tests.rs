use super::*;
use crate::corpus::prepare_document;
use crate::corpus::synthetic::{SyntheticCorpus, SyntheticSpec};
use crate::dataset::EmbeddingSource;
use crate::encoder::EncoderConfig;
use crate::labels::LanguageInventory;
use crate::model::ModelConfig;
use proptest::prelude::*;

fn tiny_config(lang_clf: bool) -> ModelConfig {
    let encoder = EncoderConfig {
        input_dim: 8,
        lstm_hidden: 6,
        attn_heads: 2,
        key_dim: 3,
        value_dim: 3,
        labels: 14,
        dropout: 0.1,
        residual: false,
    };
    ModelConfig::new(encoder, 3, LanguageInventory::default(), lang_clf)
}

fn tiny_data(docs_per_language: usize, sentences_per_doc: usize) -> Dataset {
    let spec = SyntheticSpec {
        docs_per_language,
        sentences_per_doc,
        ..SyntheticSpec::default()
    };
    let corpus = SyntheticCorpus::generate(&spec);
    let docs = corpus
        .documents
        .iter()
        .map(|d| prepare_document(d, &corpus.vocab, 16).unwrap())
        .collect();
    Dataset::build(docs, &EmbeddingSource::parse("synthetic:4,3,8").unwrap(), &LanguageInventory::default()).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig {
        base_lr: 1e-4,
        warmup_fraction: 0.1,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(10, 100, &cfg).unwrap(), 1e-4);
    assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
    assert!((lr_at(55, 100, &cfg).unwrap() - 0.5e-4).abs() < 1e-12);
    assert!((lr_at(5, 100, &cfg).unwrap() - 0.5e-4).abs() < 1e-12);
    assert!(matches!(lr_at(101, 100, &cfg), Err(TrainError::StepOutOfRange { .. })));
    let flat = TrainConfig {
        warmup_fraction: 0.0,
        ..cfg
    };
    assert_eq!(lr_at(0, 10, &flat).unwrap(), 1e-4);
    assert!((lr_at(5, 10, &flat).unwrap() - 0.5e-4).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { clip_norm: 0.0, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn decay_exemptions() {
    for name in ["lstm.fwd.b", "attn.out.b", "emit.b", "lang.b", "embed.gamma", "embed.layer_weights", "crf.transitions"] {
        assert!(!decays(name), "{name}");
    }
    for name in ["lstm.fwd.w_x", "attn.q.0", "attn.out.w", "emit.w", "lang.w"] {
        assert!(decays(name), "{name}");
    }
}

#[test]
fn zero_gradient_adam_step() {
    let model = Model::init(tiny_config(true), 1).unwrap();
    let zero: Bindings = model.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    let no_decay = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut params = model.params.clone();
    AdamW::new().step(&mut params, &zero, 1e-3, &no_decay);
    assert_eq!(params, model.params);

    let mut params = model.params.clone();
    AdamW::new().step(&mut params, &zero, 1e-3, &TrainConfig::default());
    for (name, p) in &params {
        let before = &model.params[name];
        for (a, b) in p.data().iter().zip(before.data()) {
            let want = if decays(name) { b - 1e-3 * 0.01 * b } else { *b };
            assert_eq!(*a, want, "{name}");
        }
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params: Bindings = [("w".to_string(), Tensor::row(vec![1.0, -2.0]))].into();
    let grads: Bindings = [("w".to_string(), Tensor::row(vec![0.5, -3.0]))].into();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    AdamW::new().step(&mut params, &grads, 0.1, &cfg);
    // Bias-corrected first step is lr * sign(g) up to eps.
    let got = params["w"].data();
    assert!((got[0] - 0.9).abs() < 1e-7 && (got[1] + 1.9).abs() < 1e-7, "{got:?}");
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(values in proptest::collection::vec(-1e3f64..1e3, 1..20), max in 1e-3f64..10.0) {
        let half = values.len() / 2;
        let mut grads: Bindings = [
            ("a".to_string(), Tensor::row(values[..half].to_vec())),
            ("b".to_string(), Tensor::row(values[half..].to_vec())),
        ]
        .into();
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, max);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= max + 1e-9);
        if before <= max {
            prop_assert_eq!(global_norm(&grads), before);
        }
    }

    #[test]
    fn batches_partition_indices(lengths in proptest::collection::vec(1usize..30, 1..60), size in 1usize..20, seed in any::<u64>()) {
        let batches = make_batches(&lengths, size, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= size));
        prop_assert_eq!(batches.len(), lengths.len().div_ceil(size));
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = tiny_data(1, 2);
    let model = Model::init(tiny_config(true), 2).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..short_run()
    };
    let out = train(&data, &data, model.clone(), &cfg, |_| {}).unwrap();
    assert_eq!(out.last.params, model.params);
    assert_eq!(out.history.records.len(), 2);
}

#[test]
fn single_sentence_loss_decreases() {
    let mut data = tiny_data(1, 1);
    data.items.truncate(1);
    let model = Model::init(tiny_config(true), 3).unwrap();
    let ex = example(&data.items[0]);
    let (before, _, _) = model.loss(&ex).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        max_epochs: 200,
        early_stop_patience: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&data, &data, model, &cfg, |_| {}).unwrap();
    assert_eq!(out.history.records.len(), 200);
    let (after, _, _) = out.last.loss(&example(&data.items[0])).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn training_is_deterministic_and_leaves_embeddings_alone() {
    let data = tiny_data(1, 2);
    let snapshot = data.clone();
    let run = || train(&data, &data, Model::init(tiny_config(true), 4).unwrap(), &short_run(), |_| {}).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.last.to_bytes(), b.last.to_bytes());
    assert_eq!(data, snapshot);

    let other = train(
        &data,
        &data,
        Model::init(tiny_config(true), 4).unwrap(),
        &TrainConfig { seed: 99, ..short_run() },
        |_| {},
    )
    .unwrap();
    assert_ne!(other.last.to_bytes(), a.last.to_bytes());
}

#[test]
fn history_csv_shape() {
    let data = tiny_data(1, 2);
    let out = train(&data, &data, Model::init(tiny_config(false), 6).unwrap(), &short_run(), |_| {}).unwrap();
    let csv = out.history.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], HISTORY_HEADER);
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8);
        assert_eq!(fields[3], "0");
    }
    let dir = tempfile::tempdir().unwrap();
    out.write(dir.path()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap(), csv);
    let best = Model::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best, out.best);
}

#[test]
fn early_stop_on_flat_dev_loss() {
    let data = tiny_data(1, 2);
    let cfg = TrainConfig {
        base_lr: 0.0,
        max_epochs: 20,
        early_stop_patience: 3,
        ..short_run()
    };
    let out = train(&data, &data, Model::init(tiny_config(true), 7).unwrap(), &cfg, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.records.len(), 4);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn evaluation_of_gold_like_scores() {
    let data = tiny_data(1, 2);
    let model = Model::init(tiny_config(true), 8).unwrap();
    let eval = evaluate_dataset(&model, &data).unwrap();
    assert!(eval.loss.is_finite());
    assert!((eval.loss - (eval.loss_sl + eval.loss_clf)).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&eval.word_f1));
    assert!((0.0..=1.0).contains(&eval.lang_accuracy));
    let no_head = Model::init(tiny_config(false), 8).unwrap();
    assert!(evaluate_dataset(&no_head, &data).unwrap().lang_f1.is_nan());
}
