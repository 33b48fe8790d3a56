//! Joint training: AdamW with warmup and linear decay, global-norm gradient
//! clipping, length-bucketed batches, per-epoch dev evaluation and early
//! stopping on the dev joint loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Bindings, Graph, Tensor};
use crate::corpus::EntitySet;
use crate::crf;
use crate::dataset::{Dataset, Item};
use crate::evaluator::{exact_set_metrics, language_f1, summary_row, word_level_f1, DocumentSets, EvalError};
use crate::labels::Label;
use crate::lang_clf;
use crate::model::{forward, pair_loss, Example, Model, ModelError};
use crate::postprocess::{word_labels_from_path, PostprocessError};

pub const HISTORY_HEADER: &str = "epoch,loss,loss_sl,loss_clf,dev_word_f1,dev_span_f1,dev_lang_f1,lr";
pub const BEST_CHECKPOINT: &str = "best.stck";
pub const FINAL_CHECKPOINT: &str = "final.stck";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Config(String),
    #[error("step {step} is past the schedule end {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            beta1: 0.8,
            beta2: 0.9,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            batch_size: 16,
            max_epochs: 150,
            warmup_fraction: 0.1,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(format!("train.{what} is out of range")));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience");
        }
        Ok(())
    }
}

/// Linear ramp `0 -> base_lr` over the first `round(warmup_fraction * total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(0.0);
    }
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        return Ok(cfg.base_lr * (step as f64 / warmup as f64));
    }
    Ok(cfg.base_lr * ((total - step) as f64 / (total - warmup) as f64))
}

/// Whether decoupled weight decay applies to a parameter: biases, the
/// embedding aggregation and the CRF transitions are exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.starts_with("embed.") || name.starts_with("crf."))
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &Bindings) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Bindings, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    m: Bindings,
    v: Bindings,
    t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Bindings, grads: &Bindings, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = if decays(name) { cfg.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + cfg.adam_eps);
                pd[i] -= lr * update;
                pd[i] -= lr * decay * pd[i];
            }
        }
    }
}

/// Sentence indices grouped into batches: shuffle, stable sort by active
/// length so batches hold similar lengths, chunk, then shuffle the batches.
pub fn make_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// One row of the history CSV. `dev_loss` drives early stopping.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_sl: f64,
    pub loss_clf: f64,
    pub dev_word_f1: f64,
    pub dev_span_f1: f64,
    pub dev_lang_f1: f64,
    pub lr: f64,
    pub dev_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.loss, r.loss_sl, r.loss_clf, r.dev_word_f1, r.dev_span_f1, r.dev_lang_f1, r.lr
            )
            .unwrap();
        }
        out
    }
}

/// Scores of a model on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub loss_sl: f64,
    pub loss_clf: f64,
    pub word_f1: f64,
    pub span_f1: f64,
    /// Macro F1; `NaN` without a language head.
    pub lang_f1: f64,
    /// Fraction of sentences whose language is predicted correctly; `NaN`
    /// without a language head.
    pub lang_accuracy: f64,
}

struct SentenceOutcome {
    loss: (f64, f64, f64),
    words: Vec<Label>,
    entities: EntitySet,
    language: Option<usize>,
}

fn example(item: &Item) -> Example<'_> {
    Example {
        embeddings: &item.embeddings,
        mask: &item.mask,
        labels: &item.labels,
        language: item.language,
    }
}

fn score_sentence(model: &Model, data: &Dataset, item: &Item) -> Result<SentenceOutcome, TrainError> {
    let mut g = Graph::new(&model.params);
    let nodes = forward(&mut g, &model.config, &item.embeddings, &item.mask, None)?;
    let trans = g.param("crf.transitions").map_err(ModelError::from)?;
    let loss = pair_loss(&mut g, nodes.emissions, trans, &item.mask, &item.labels, nodes.lang_logits, item.language)?;
    let v = |n| g.value(n).data()[0];
    let losses = (v(loss.total), v(loss.sl), loss.clf.map_or(0.0, v));
    let best = crf::viterbi(g.value(nodes.emissions), &item.mask, &model.crf_params()).map_err(ModelError::from)?;
    let tagged = data.tagged(item);
    let path = best.padded(tagged.len(), Label::Pad.index());
    let words = word_labels_from_path(tagged, &path)?;
    let entities = crate::corpus::spans_from_iob(&tagged.words, &words);
    let language = nodes.lang_logits.map(|l| {
        let p = lang_clf::probabilities(g.value(l).data());
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    });
    Ok(SentenceOutcome {
        loss: losses,
        words,
        entities,
        language,
    })
}

/// Mean losses, word F1, exact span F1 and language scores over `data`.
pub fn evaluate_dataset(model: &Model, data: &Dataset) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus("evaluation"));
    }
    let outcomes = data
        .items
        .par_iter()
        .map(|item| score_sentence(model, data, item))
        .collect::<Result<Vec<_>, _>>()?;
    let n = outcomes.len() as f64;
    let mean = |f: fn(&SentenceOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;

    let pred_words: Vec<Vec<Label>> = outcomes.iter().map(|o| o.words.clone()).collect();
    let gold_words: Vec<Vec<Label>> = data.items.iter().map(|i| data.tagged(i).word_labels.clone()).collect();
    let word_f1 = summary_row(&word_level_f1(&pred_words, &gold_words)?).f1;

    let mut pred_sets = DocumentSets::new();
    let mut gold_sets = DocumentSets::new();
    for doc in &data.documents {
        pred_sets.entry(doc.key.clone()).or_default();
        gold_sets.insert(doc.key.clone(), doc.gold.iter().cloned().collect());
    }
    for (item, o) in data.items.iter().zip(&outcomes) {
        let set = pred_sets.get_mut(&data.documents[item.doc].key).unwrap();
        set.extend(o.entities.iter().cloned());
    }
    let span_f1 = summary_row(&exact_set_metrics(&pred_sets, &gold_sets)?).f1;

    let (lang_f1, lang_accuracy) = if model.config.lang_clf {
        let tags = model.config.languages.tags();
        let pred: Vec<&str> = outcomes.iter().map(|o| tags[o.language.unwrap()].as_str()).collect();
        let gold: Vec<&str> = data.items.iter().map(|i| tags[i.language].as_str()).collect();
        let correct = data.items.iter().zip(&outcomes).filter(|(i, o)| o.language == Some(i.language)).count();
        (summary_row(&language_f1(&pred, &gold)?).f1, correct as f64 / n)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Evaluation {
        loss: mean(|o| o.loss.0),
        loss_sl: mean(|o| o.loss.1),
        loss_clf: mean(|o| o.loss.2),
        word_f1,
        span_f1,
        lang_f1,
        lang_accuracy,
    })
}

/// Final and best-dev models with the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub history: TrainHistory,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Writes `best.stck`, `final.stck` and `history.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| TrainError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        self.best.save(&dir.join(BEST_CHECKPOINT))?;
        self.last.save(&dir.join(FINAL_CHECKPOINT))?;
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, self.history.to_csv()).map_err(io(&path))
    }
}

struct SentenceGrad {
    grads: Bindings,
    loss: (f64, f64, f64),
}

fn sentence_gradients(model: &Model, item: &Item, names: &[&str], rng: &mut ChaCha8Rng) -> Result<SentenceGrad, TrainError> {
    let mut g = Graph::new(&model.params);
    let nodes = crate::model::sentence_loss(&mut g, &model.config, &example(item), Some(rng))?;
    let v = |n| g.value(n).data()[0];
    let loss = (v(nodes.total), v(nodes.sl), nodes.clf.map_or(0.0, v));
    let grads = g.gradients(nodes.total, names).map_err(ModelError::from)?;
    Ok(SentenceGrad { grads, loss })
}

/// Trains `model` on `train`, evaluating on `dev` after every epoch.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    train: &Dataset,
    dev: &Dataset,
    mut model: Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus("training"));
    }
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    let names_owned = model.parameter_names();
    let names: Vec<&str> = names_owned.iter().map(String::as_str).collect();
    let lengths: Vec<usize> = train.items.iter().map(|i| i.mask.iter().filter(|&&m| m).count()).collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.max_epochs;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamW::new();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0usize;
    let mut lr = 0.0;

    for epoch in 1..=cfg.max_epochs {
        let mut sums = (0.0, 0.0, 0.0);
        for batch in make_batches(&lengths, cfg.batch_size, &mut batch_rng) {
            let first = step * cfg.batch_size;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream((first + j) as u64 + 1);
                    sentence_gradients(&model, &train.items[i], &names, &mut rng)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads: Bindings = BTreeMap::new();
            for r in &results {
                let (t, s, c) = r.loss;
                if !(t.is_finite() && s.is_finite() && c.is_finite()) {
                    return Err(TrainError::NonFinite {
                        what: "loss".into(),
                        epoch,
                        step: step + 1,
                    });
                }
                sums = (sums.0 + t, sums.1 + s, sums.2 + c);
                for (name, g) in &r.grads {
                    match grads.get_mut(name) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            grads.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
            let k = 1.0 / results.len() as f64;
            for g in grads.values_mut() {
                g.scale_assign(k);
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "gradient norm".into(),
                    epoch,
                    step: step + 1,
                });
            }
            step += 1;
            lr = lr_at(step, total, cfg)?;
            adam.step(&mut model.params, &grads, lr, cfg);
        }

        let eval = evaluate_dataset(&model, dev)?;
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sums.0 / n,
            loss_sl: sums.1 / n,
            loss_clf: sums.2 / n,
            dev_word_f1: eval.word_f1,
            dev_span_f1: eval.span_f1,
            dev_lang_f1: eval.lang_f1,
            lr,
            dev_loss: eval.loss,
        };
        on_epoch(&record);
        history.records.push(record);
        if !eval.loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "dev loss".into(),
                epoch,
                step,
            });
        }
        if best.as_ref().map_or(true, |(b, _, _)| eval.loss < *b) {
            best = Some((eval.loss, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        history,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
