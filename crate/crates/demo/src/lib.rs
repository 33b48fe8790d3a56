//! Browser demo. Every operation takes and returns JSON strings so the page
//! needs no bindings beyond strings; the same functions are tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};
use slavtag::autodiff::Tensor;
use slavtag::config::RunConfig;
use slavtag::corpus::synthetic::{SyntheticCorpus, SyntheticSpec};
use slavtag::corpus::{format_annotations, prepare_document, AnnotatedDocument, Document, EntitySet, SubwordVocab};
use slavtag::crf::{self, CrfParams, FORBIDDEN};
use slavtag::dataset::{Dataset, EmbeddingSource};
use slavtag::labels::Label;
use slavtag::model::Model;
use slavtag::postprocess::{predictions_to_entities, word_labels_from_path};
use slavtag::trainer;

#[cfg(target_arch = "wasm32")]
mod web;

pub type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// A CRF lattice: emissions `L x K` and optionally `(K+2) x (K+2)`
/// transitions (START and STOP last). Missing transitions are zero apart
/// from the forbidden START/STOP entries.
#[derive(Debug, Deserialize)]
pub struct Lattice {
    pub labels: Vec<String>,
    pub emissions: Vec<Vec<f64>>,
    #[serde(default)]
    pub transitions: Option<Vec<Vec<f64>>>,
    #[serde(default = "one")]
    pub n: usize,
}

fn one() -> usize {
    1
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Tensor> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(format!("every {what} row needs {cols} values"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(format!("{what} must be finite"));
    }
    Tensor::matrix(rows.len(), cols, rows.concat()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// A random lattice over `labels` toy labels and `len` positions, as JSON
/// accepted by [`explore_crf`].
pub fn random_lattice(seed: u64, len: usize, labels: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..labels).map(|i| format!("y{i}")).collect();
    let emissions: Vec<Vec<f64>> = (0..len)
        .map(|_| (0..labels).map(|_| round2(rng.gen_range(-2.0..2.0))).collect())
        .collect();
    let mut transitions = CrfParams::new(labels).transitions;
    for i in 0..labels + 2 {
        for j in 0..labels + 2 {
            if transitions.at(i, j) == 0.0 {
                transitions.set(i, j, round2(rng.gen_range(-1.0..1.0)));
            }
        }
    }
    json!({"labels": names, "emissions": emissions, "transitions": rows(&transitions), "n": 5}).to_string()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// n-best paths with their probabilities, the log-partition and the
/// per-position label marginals of a lattice.
pub fn explore_crf(request: &str) -> Result<String> {
    let lat: Lattice = serde_json::from_str(request).map_err(err)?;
    let k = lat.labels.len();
    if k == 0 || lat.emissions.is_empty() {
        return Err("need at least one label and one position".into());
    }
    if lat.n == 0 || lat.n > 1000 {
        return Err("n must be between 1 and 1000".into());
    }
    let e = matrix(&lat.emissions, k, "emission")?;
    let params = match &lat.transitions {
        Some(t) if t.len() == k + 2 => CrfParams::from_tensor(matrix(t, k + 2, "transition")?).map_err(err)?,
        Some(_) => return Err(format!("transitions need {} rows", k + 2)),
        None => CrfParams::new(k),
    };
    let mask = vec![true; e.rows()];
    let log_z = crf::log_partition(&e, &mask, &params).map_err(err)?;
    let paths: Vec<Value> = crf::nbest(&e, &mask, &params, lat.n)
        .map_err(err)?
        .into_iter()
        .map(|p| {
            json!({
                "labels": p.labels.iter().map(|&l| &lat.labels[l]).collect::<Vec<_>>(),
                "score": p.score,
                "probability": (p.score - log_z).exp(),
            })
        })
        .collect();
    let marginals = crf::marginals(&e, &mask, &params).map_err(err)?;
    Ok(json!({
        "log_partition": log_z,
        "paths": paths,
        "marginals": rows(&marginals),
        "forbidden": FORBIDDEN,
    })
    .to_string())
}

/// Settings of the model trained in the page.
const DEMO_CONFIG: &str = "\
embed.layers = 3
encoder.input_dim = 8
encoder.lstm_hidden = 32
encoder.attn_heads = 2
encoder.key_dim = 8
encoder.value_dim = 8
encoder.residual = true
encoder.dropout = 0
train.base_lr = 0.01
train.batch_size = 4
train.early_stop_patience = 1000
data.max_len = 64
";

const DEMO_EMBEDDINGS: &str = "synthetic:1,3,8";

/// A model with the vocabulary and embedding source it was trained with.
pub struct Tagger {
    model: Model,
    vocab: SubwordVocab,
    source: EmbeddingSource,
    max_len: usize,
    samples: Vec<(String, String)>,
}

impl Tagger {
    /// Trains a small model on a generated corpus of `sentences` sentences
    /// per language.
    pub fn train_demo(seed: u64, sentences: usize, epochs: usize) -> Result<Tagger> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(DEMO_CONFIG).map_err(err)?;
        cfg.train.seed = seed;
        cfg.train.max_epochs = epochs;
        cfg.validate().map_err(err)?;
        let corpus = SyntheticCorpus::generate(&SyntheticSpec {
            seed,
            docs_per_language: 1,
            sentences_per_doc: sentences.max(1),
            ..SyntheticSpec::default()
        });
        let prepared = corpus
            .documents
            .iter()
            .map(|d| prepare_document(d, &corpus.vocab, cfg.max_len))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(err)?;
        let source = EmbeddingSource::parse(DEMO_EMBEDDINGS).map_err(err)?;
        let data = Dataset::build(prepared, &source, &cfg.languages).map_err(err)?;
        let mut model = Model::init(cfg.model_config(), seed).map_err(err)?;
        model.meta.insert("embeddings".into(), source.describe());
        let outcome = trainer::train(&data, &data, model, &cfg.train, |_| {}).map_err(err)?;
        let samples = corpus
            .documents
            .iter()
            .map(|d| (d.doc.language.clone(), d.doc.text.clone()))
            .collect();
        Ok(Tagger {
            model: outcome.best,
            vocab: corpus.vocab,
            source,
            max_len: cfg.max_len,
            samples,
        })
    }

    /// Loads a checkpoint and its vocabulary. The checkpoint must record
    /// generated embeddings; a browser cannot read embedding directories.
    pub fn from_checkpoint(bytes: &[u8], vocab: &str) -> Result<Tagger> {
        let model = Model::from_bytes(bytes).map_err(err)?;
        let vocab = SubwordVocab::from_text(vocab).map_err(err)?;
        let recorded = model.meta.get("embeddings").ok_or("the checkpoint records no embedding source")?;
        let source = EmbeddingSource::parse(recorded).map_err(err)?;
        if !matches!(source, EmbeddingSource::Synthetic { .. }) {
            return Err(format!("embedding source {recorded} cannot be read in a browser"));
        }
        Ok(Tagger {
            model,
            vocab,
            source,
            max_len: 128,
            samples: Vec::new(),
        })
    }

    /// `{language: text}` for the training documents of a demo model.
    pub fn samples(&self) -> String {
        let map: serde_json::Map<String, Value> =
            self.samples.iter().map(|(l, t)| (l.clone(), Value::from(t.as_str()))).collect();
        Value::Object(map).to_string()
    }

    pub fn summary(&self) -> String {
        let c = &self.model.config;
        json!({
            "parameters": self.model.parameter_count(),
            "lstm_hidden": c.encoder.lstm_hidden,
            "heads": c.encoder.attn_heads,
            "layers": c.layers,
            "input_dim": c.encoder.input_dim,
            "languages": c.languages.tags(),
            "language_head": c.lang_clf,
            "embeddings": self.source.describe(),
        })
        .to_string()
    }

    /// Tags `text`: per sentence the words, their labels, the `nbest` best
    /// subword paths and the language distribution; plus the entity set.
    pub fn tag(&self, text: &str, nbest: usize) -> Result<String> {
        let language = self.model.config.languages.tags().first().cloned().unwrap_or_default();
        let doc = AnnotatedDocument {
            doc: Document {
                id: "input".into(),
                language,
                topic: "demo".into(),
                text: text.to_string(),
            },
            annotations: EntitySet::new(),
        };
        let prepared = prepare_document(&doc, &self.vocab, self.max_len).map_err(err)?;
        let names = self.model.config.labels.names();
        let tags = self.model.config.languages.tags();
        let mut entities = EntitySet::new();
        let mut sentences = Vec::new();
        for (s, sentence) in prepared.sentences.iter().enumerate() {
            let emb = self.source.load(&prepared.key, s, sentence).map_err(err)?;
            let pred = self.model.predict(&emb, &sentence.mask_bools(), nbest.max(1)).map_err(err)?;
            let path = pred.best.padded(sentence.len(), Label::Pad.index());
            entities.extend(predictions_to_entities(sentence, &path).map_err(err)?);
            let labels = word_labels_from_path(sentence, &path).map_err(err)?;
            let active = sentence.active_len();
            sentences.push(json!({
                "words": sentence.words,
                "labels": labels.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                "subtokens": sentence.subtokens[..active],
                "nbest": pred.nbest.iter().map(|p| json!({
                    "score": p.score,
                    "labels": p.labels.iter().map(|&l| &names[l]).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
                "language": pred.lang_probs.map(|p| tags.iter().cloned().zip(p).collect::<Vec<_>>()),
            }));
        }
        Ok(json!({
            "sentences": sentences,
            "entities": format_annotations(&entities),
            "unknown_subtokens": prepared
                .sentences
                .iter()
                .flat_map(|s| &s.subtokens)
                .filter(|t| t.as_str() == self.vocab.unk())
                .count(),
        })
        .to_string())
    }
}
