mod eval;
mod predict;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use slavtag::config::RunConfig;
use slavtag::corpus::synthetic::{SyntheticCorpus, SyntheticSpec};
use slavtag::corpus::{load_corpus, prepare_document, PreparedDocument, SubwordVocab};
use slavtag::dataset::{read_cache, write_cache, EmbeddingManifest, EmbeddingSource, PreparedCache, WARNINGS_FILE};
use slavtag::labels::LabelInventory;
use slavtag::selfcheck::{self, SelfcheckOptions};

use crate::error::{Failure, Result};
use crate::{EmbeddingArgs, PrepareArgs, SelfcheckArgs, SynthArgs};

pub use eval::eval;
pub use predict::predict;
pub use train::train;

/// Cache meta key holding the label inventory names.
const LABELS_KEY: &str = "labels";
const VOCAB_KEY: &str = "vocab_crc32";

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn read_prepared(dir: &Path) -> Result<PreparedCache> {
    Ok(read_cache(dir)?)
}

impl EmbeddingArgs {
    pub fn source(&self) -> Result<Option<EmbeddingSource>> {
        if let Some(dir) = &self.embeddings {
            return Ok(Some(EmbeddingSource::Directory(dir.clone())));
        }
        match &self.synthetic_embeddings {
            Some(triple) => Ok(Some(EmbeddingSource::parse_synthetic(triple).map_err(Failure::usage)?)),
            None => Ok(None),
        }
    }
}

/// Layer count and dimension of a source. Directories report them through
/// their manifest (whose vocabulary checksum must match the cache) or,
/// without one, through the first sentence's file.
pub fn source_shape(source: &EmbeddingSource, cache: &PreparedCache) -> Result<(usize, usize)> {
    match source {
        EmbeddingSource::Synthetic { layers, dim, .. } => Ok((*layers, *dim)),
        EmbeddingSource::Directory(dir) => {
            if let Some(manifest) = EmbeddingManifest::load(dir)? {
                if let Some(crc) = cache.vocab_checksum() {
                    manifest.check_vocab(crc)?;
                }
                return Ok((manifest.layers, manifest.dim));
            }
            let doc = cache
                .documents
                .iter()
                .find(|d| !d.sentences.is_empty())
                .ok_or_else(|| Failure::data("cache has no sentences"))?;
            let emb = source.load(&doc.key, 0, &doc.sentences[0])?;
            Ok((emb.layers(), emb.dim()))
        }
    }
}

fn count_table(documents: &[PreparedDocument]) -> String {
    let mut counts: BTreeMap<(&str, &str), (usize, usize, usize)> = BTreeMap::new();
    for d in documents {
        let c = counts.entry((&d.key.topic, &d.key.language)).or_default();
        c.0 += 1;
        c.1 += d.sentences.len();
        c.2 += d.gold.len();
    }
    let mut out = format!("{:<16} {:<8} {:>9} {:>9} {:>9}\n", "topic", "language", "documents", "sentences", "entities");
    for ((topic, lang), (docs, sents, ents)) in counts {
        out.push_str(&format!("{topic:<16} {lang:<8} {docs:>9} {sents:>9} {ents:>9}\n"));
    }
    out
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let max_len = args.max_len.unwrap_or(cfg.max_len);
    if max_len < 2 {
        return Err(Failure::usage("--max-len must be at least 2"));
    }
    let vocab = SubwordVocab::load(&args.vocab)?;
    let docs = load_corpus(&args.corpus, &cfg.languages)?;
    let prepared = docs
        .par_iter()
        .map(|d| prepare_document(d, &vocab, max_len))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut meta = BTreeMap::new();
    meta.insert(VOCAB_KEY.to_string(), format!("{:08x}", vocab.checksum()));
    meta.insert("max_len".to_string(), max_len.to_string());
    meta.insert(LABELS_KEY.to_string(), LabelInventory::default().names().join(","));
    meta.insert("documents".to_string(), prepared.len().to_string());
    meta.insert(
        "sentences".to_string(),
        prepared.iter().map(|d| d.sentences.len()).sum::<usize>().to_string(),
    );
    write_cache(&args.out, &prepared, &meta)?;
    let warnings = slavtag::dataset::warning_lines(&prepared);
    crate::emit(&count_table(&prepared));
    say!("warnings: {} ({})", warnings.len(), args.out.join(WARNINGS_FILE).display());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    if args.docs_per_language == 0 || args.sentences_per_doc == 0 {
        return Err(Failure::usage("document and sentence counts must be positive"));
    }
    let spec = SyntheticSpec {
        seed: args.seed,
        topic: args.topic.clone(),
        docs_per_language: args.docs_per_language,
        sentences_per_doc: args.sentences_per_doc,
        ..SyntheticSpec::default()
    };
    let corpus = SyntheticCorpus::generate(&spec);
    corpus.write(&args.out, &args.vocab)?;
    say!("wrote {} documents to {} and {} vocabulary entries to {}",
        corpus.documents.len(),
        args.out.display(),
        corpus.vocab.len(),
        args.vocab.display()
    );
    Ok(())
}

pub fn selfcheck(args: &SelfcheckArgs) -> Result<()> {
    let results = selfcheck::run(SelfcheckOptions {
        perturb_transition_gradient: args.perturb_transition_gradient,
        seed: args.seed,
    });
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        say!("{verdict} {:<22} {:>7.2}s  {}", r.name, r.seconds, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        say!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Checkpoint and cache must agree on vocabulary and label inventory.
pub fn check_compatible(model: &slavtag::model::Model, cache: &PreparedCache) -> Result<()> {
    if let (Some(m), Some(c)) = (model.meta.get(VOCAB_KEY), cache.meta.get(VOCAB_KEY)) {
        if m != c {
            return Err(Failure::data(format!("vocabulary checksum {c} of the input differs from the model's {m}")));
        }
    }
    if let Some(labels) = cache.meta.get(LABELS_KEY) {
        let model_labels = model.config.labels.names().join(",");
        if *labels != model_labels {
            return Err(Failure::data(format!(
                "label inventory of the input ({labels}) differs from the model's ({model_labels})"
            )));
        }
    }
    Ok(())
}
