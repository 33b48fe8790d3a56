use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use slavtag::corpus::{load_annotations, DocKey};
use slavtag::dataset::{PreparedCache, SENTENCES_FILE};
use slavtag::evaluator::{
    exact_set_metrics, format_csv, format_table, language_f1, relaxed_partial_metrics, word_level_f1, DocumentSets,
    EvalError, PrfRow,
};
use slavtag::labels::Label;

use super::read_prepared;
use crate::error::{io, Failure, Result};
use crate::files::{discover, parse_iob, parse_lang, read, ANN, IOB, LANG};
use crate::{EvalArgs, EvalMode};

enum Gold {
    Cache(PreparedCache),
    Files(PathBuf),
}

impl Gold {
    fn open(dir: &Path) -> Result<Self> {
        if dir.join(SENTENCES_FILE).is_file() {
            Ok(Gold::Cache(read_prepared(dir)?))
        } else {
            Ok(Gold::Files(dir.to_path_buf()))
        }
    }

    fn entity_sets(&self) -> Result<DocumentSets> {
        match self {
            Gold::Cache(c) => Ok(c
                .documents
                .iter()
                .map(|d| (d.key.clone(), d.gold.iter().cloned().collect()))
                .collect()),
            Gold::Files(dir) => annotation_sets(dir),
        }
    }

    fn word_labels(&self) -> Result<BTreeMap<DocKey, Vec<Vec<Label>>>> {
        match self {
            Gold::Cache(c) => Ok(c
                .documents
                .iter()
                .map(|d| (d.key.clone(), d.sentences.iter().map(|s| s.word_labels.clone()).collect()))
                .collect()),
            Gold::Files(dir) => iob_files(dir),
        }
    }

    /// Document keys with their sentence counts when known.
    fn documents(&self) -> Result<BTreeMap<DocKey, Option<usize>>> {
        match self {
            Gold::Cache(c) => Ok(c.documents.iter().map(|d| (d.key.clone(), Some(d.sentences.len()))).collect()),
            Gold::Files(dir) => {
                let mut out: BTreeMap<DocKey, Option<usize>> = BTreeMap::new();
                for ext in [ANN, "txt"] {
                    out.extend(discover(dir, ext)?.into_keys().map(|k| (k, None)));
                }
                Ok(out)
            }
        }
    }
}

fn annotation_sets(dir: &Path) -> Result<DocumentSets> {
    discover(dir, ANN)?
        .into_iter()
        .map(|(k, p)| Ok((k, load_annotations(&p)?)))
        .collect()
}

fn iob_files(dir: &Path) -> Result<BTreeMap<DocKey, Vec<Vec<Label>>>> {
    discover(dir, IOB)?
        .into_iter()
        .map(|(k, p)| Ok((k, parse_iob(&read(&p)?, &p)?)))
        .collect()
}

fn missing<A, B>(pred: &BTreeMap<DocKey, A>, gold: &BTreeMap<DocKey, B>) -> Result<()> {
    let mut names = Vec::new();
    for k in gold.keys().filter(|k| !pred.contains_key(*k)) {
        eprintln!("missing prediction: {k}");
        names.push(k.to_string());
    }
    for k in pred.keys().filter(|k| !gold.contains_key(*k)) {
        eprintln!("missing gold: {k}");
        names.push(k.to_string());
    }
    if names.is_empty() {
        Ok(())
    } else {
        Err(Failure::data(EvalError::MissingDocuments(names)))
    }
}

fn header(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Word => {
            "# word level: a word is a true positive when its predicted label equals a gold label other than O; \
             type rows collapse B-/I-; counts pooled over all words"
        }
        EvalMode::Exact => "# exact matching: identical (surface, type) pairs per document; counts pooled over documents",
        EvalMode::Partial => {
            "# relaxed partial matching: same type and at least one shared word token (case-sensitive); \
             each gold entity credited once, exact matches first, then greedy highest overlap with ties to the earlier gold entity; \
             counts pooled over documents; comparable only within this toolkit"
        }
        EvalMode::Lang => "# language: one prediction per sentence; per-language rows and their macro average",
    }
}

fn score(args: &EvalArgs) -> Result<Vec<PrfRow>> {
    let gold = Gold::open(&args.gold)?;
    match args.mode {
        EvalMode::Exact | EvalMode::Partial => {
            let pred = annotation_sets(&args.pred)?;
            let gold = gold.entity_sets()?;
            missing(&pred, &gold)?;
            Ok(if args.mode == EvalMode::Exact {
                exact_set_metrics(&pred, &gold)?
            } else {
                relaxed_partial_metrics(&pred, &gold)?
            })
        }
        EvalMode::Word => {
            let pred = iob_files(&args.pred)?;
            let gold = gold.word_labels()?;
            missing(&pred, &gold)?;
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            for (key, g) in gold {
                let p = &pred[&key];
                if p.len() != g.len() {
                    return Err(Failure::data(format!("{key}: {} predicted vs {} gold sentences", p.len(), g.len())));
                }
                p_all.extend(p.iter().cloned());
                g_all.extend(g);
            }
            Ok(word_level_f1(&p_all, &g_all)?)
        }
        EvalMode::Lang => {
            let pred: BTreeMap<DocKey, Vec<String>> = discover(&args.pred, LANG)?
                .into_iter()
                .map(|(k, p)| Ok((k, parse_lang(&read(&p)?))))
                .collect::<Result<_>>()?;
            let docs = gold.documents()?;
            missing(&pred, &docs)?;
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            for (key, count) in docs {
                let p = &pred[&key];
                if let Some(n) = count.filter(|&n| n != p.len()) {
                    return Err(Failure::data(format!("{key}: {} language lines for {n} sentences", p.len())));
                }
                g_all.extend(std::iter::repeat(key.language.clone()).take(p.len()));
                p_all.extend(p.iter().cloned());
            }
            Ok(language_f1(&p_all, &g_all)?)
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let rows = score(args)?;
    let csv = format_csv(&rows);
    say!("{}", header(args.mode));
    say!("{}", format_table(&rows));
    crate::emit(&csv);
    if let Some(path) = &args.csv {
        fs::write(path, &csv).map_err(io(path))?;
    }
    Ok(())
}
