use std::fs;

use log::info;
use slavtag::config::EFFECTIVE_CONFIG_FILE;
use slavtag::dataset::Dataset;
use slavtag::model::Model;
use slavtag::trainer::{self, BEST_CHECKPOINT, HISTORY_FILE};

use super::{load_config, read_prepared, source_shape, VOCAB_KEY};
use crate::error::{io, Failure, Result};
use crate::TrainArgs;

fn topics(list: &str) -> Vec<String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(t) = &args.train_topics {
        cfg.train_topics = topics(t);
    }
    if let Some(t) = &args.dev_topics {
        cfg.dev_topics = topics(t);
    }
    if args.no_lang_clf {
        cfg.lang_clf = false;
    }
    let source = args
        .embeddings
        .source()?
        .ok_or_else(|| Failure::usage("one of --embeddings or --synthetic-embeddings is required"))?;

    let train_cache = read_prepared(&args.train)?;
    let dev_cache = read_prepared(&args.dev)?;
    if train_cache.vocab_checksum() != dev_cache.vocab_checksum() {
        return Err(Failure::data("training and development caches were prepared with different vocabularies"));
    }
    let (layers, dim) = source_shape(&source, &train_cache)?;
    cfg.layers = layers;
    cfg.encoder.input_dim = dim;
    cfg.validate()?;

    let train_docs = Dataset::filter_topics(train_cache.documents.clone(), &cfg.train_topics);
    let dev_docs = Dataset::filter_topics(dev_cache.documents.clone(), &cfg.dev_topics);
    if train_docs.is_empty() {
        return Err(Failure::data(format!("no training documents with topics {:?}", cfg.train_topics)));
    }
    if dev_docs.is_empty() {
        return Err(Failure::data(format!("no development documents with topics {:?}", cfg.dev_topics)));
    }
    let train_data = Dataset::build(train_docs, &source, &cfg.languages)?;
    let dev_data = Dataset::build(dev_docs, &source, &cfg.languages)?;
    info!(
        "{} training and {} development sentences, embeddings {} (m={layers}, D={dim})",
        train_data.len(),
        dev_data.len(),
        source.describe()
    );

    fs::create_dir_all(&args.out).map_err(io(&args.out))?;
    let effective = args.out.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&effective, cfg.to_text()).map_err(io(&effective))?;

    let model_cfg = cfg.model_config();
    let mut model = if args.resume {
        let path = args.out.join(BEST_CHECKPOINT);
        let model = Model::load(&path)?;
        if model.config != model_cfg {
            return Err(Failure::usage(format!(
                "{} was trained with a different architecture than the current configuration",
                path.display()
            )));
        }
        info!("continuing from {}", path.display());
        model
    } else {
        Model::init(model_cfg, cfg.train.seed)?
    };
    model.meta.insert("embeddings".into(), source.describe());
    if let Some(crc) = train_cache.meta.get(VOCAB_KEY) {
        model.meta.insert(VOCAB_KEY.into(), crc.clone());
    }
    info!("{} parameters", model.parameter_count());

    let outcome = trainer::train(&train_data, &dev_data, model, &cfg.train, |r| {
        info!(
            "epoch {:>3}  loss {:.4} (sl {:.4}, clf {:.4})  dev loss {:.4}  dev word F1 {:.4}  span F1 {:.4}  lang F1 {:.4}  lr {:.3e}",
            r.epoch, r.loss, r.loss_sl, r.loss_clf, r.dev_loss, r.dev_word_f1, r.dev_span_f1, r.dev_lang_f1, r.lr
        );
    })?;
    outcome.write(&args.out)?;
    say!("trained {} epochs{}; best epoch {} written to {}; history in {}",
        outcome.history.records.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_epoch,
        args.out.join(BEST_CHECKPOINT).display(),
        args.out.join(HISTORY_FILE).display()
    );
    Ok(())
}
