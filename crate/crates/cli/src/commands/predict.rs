use std::fmt::Write as _;

use rayon::prelude::*;
use slavtag::corpus::{format_annotations, EntitySet, PreparedDocument};
use slavtag::dataset::EmbeddingSource;
use slavtag::labels::Label;
use slavtag::model::Model;
use slavtag::postprocess::{predictions_to_entities, word_labels_from_path};

use super::{check_compatible, read_prepared, source_shape};
use crate::error::{Failure, Result};
use crate::files::{format_iob, write_doc_file, ANN, IOB, LANG, NBEST};
use crate::PredictArgs;

struct DocOutput {
    ann: String,
    iob: String,
    nbest: String,
    lang: String,
}

fn tag_document(model: &Model, source: &EmbeddingSource, doc: &PreparedDocument, nbest: usize) -> Result<DocOutput> {
    let names = model.config.labels.names();
    let mut entities = EntitySet::new();
    let mut iob = Vec::new();
    let mut nbest_text = String::new();
    let mut lang = String::new();
    for (s, sentence) in doc.sentences.iter().enumerate() {
        let emb = source.load(&doc.key, s, sentence)?;
        let pred = model.predict(&emb, &sentence.mask_bools(), nbest)?;
        let path = pred.best.padded(sentence.len(), Label::Pad.index());
        entities.extend(predictions_to_entities(sentence, &path)?);
        iob.push((sentence.words.clone(), word_labels_from_path(sentence, &path)?));
        for (rank, p) in pred.nbest.iter().enumerate() {
            let _ = writeln!(nbest_text, "{}\t{}", rank + 1, p.to_line(&names));
        }
        nbest_text.push('\n');
        if let Some(probs) = &pred.lang_probs {
            let (best, p) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
            let _ = writeln!(lang, "{}\t{p:.6}", model.config.languages.tags()[best]);
        }
    }
    Ok(DocOutput {
        ann: format_annotations(&entities),
        iob: format_iob(&iob),
        nbest: nbest_text,
        lang,
    })
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let cache = read_prepared(&args.input)?;
    check_compatible(&model, &cache)?;
    if args.nbest == Some(0) {
        return Err(Failure::usage("--nbest must be at least 1"));
    }
    if args.emit_lang && !model.config.lang_clf {
        return Err(Failure::usage("--emit-lang needs a model trained with the language head"));
    }
    let source = match args.embeddings.source()? {
        Some(s) => s,
        None => {
            let recorded = model
                .meta
                .get("embeddings")
                .ok_or_else(|| Failure::usage("the checkpoint records no embedding source; pass one explicitly"))?;
            EmbeddingSource::parse(recorded)?
        }
    };
    let (layers, dim) = source_shape(&source, &cache)?;
    if layers != model.config.layers || dim != model.config.encoder.input_dim {
        return Err(Failure::data(format!(
            "embeddings have m={layers}, D={dim}; the model expects m={}, D={}",
            model.config.layers, model.config.encoder.input_dim
        )));
    }
    let k = args.nbest.unwrap_or(1);
    let outputs = cache
        .documents
        .par_iter()
        .map(|d| tag_document(&model, &source, d, k))
        .collect::<Result<Vec<_>>>()?;
    let mut entities = 0;
    for (doc, out) in cache.documents.iter().zip(&outputs) {
        write_doc_file(&args.out, &doc.key, ANN, &out.ann)?;
        write_doc_file(&args.out, &doc.key, IOB, &out.iob)?;
        if args.nbest.is_some() {
            write_doc_file(&args.out, &doc.key, NBEST, &out.nbest)?;
        }
        if args.emit_lang {
            write_doc_file(&args.out, &doc.key, LANG, &out.lang)?;
        }
        entities += out.ann.lines().count();
    }
    say!("tagged {} documents ({} sentences), {} entities, output in {}",
        cache.documents.len(),
        cache.sentence_count(),
        entities,
        args.out.display()
    );
    Ok(())
}
