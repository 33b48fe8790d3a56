//! Word-level, exact-set, relaxed-partial and language metrics.
//!
//! Counts are pooled over documents (micro averaging). F1 is computed as
//! `2tp / (2tp + fp + fn)`, which equals `2PR/(P+R)` whenever it is defined.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::corpus::{split_words, DocKey, EntitySet};
use crate::labels::{EntityType, Label};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("sequence {index}: {pred} predicted vs {gold} gold labels")]
    LengthMismatch { index: usize, pred: usize, gold: usize },
    #[error("missing documents: {}", .0.join(", "))]
    MissingDocuments(Vec<String>),
    #[error("no items to score")]
    Empty,
}

/// Name of the pooled row over all types.
pub const ALL_ROW: &str = "All";

#[derive(Debug, Clone, PartialEq)]
pub struct PrfRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Nothing was predicted, so precision is reported as 0 (or 1 when
    /// there was also nothing to find).
    pub no_predictions: bool,
    /// Neither predictions nor gold items: scores are vacuously 1.
    pub vacuous: bool,
}

impl PrfRow {
    pub fn from_counts(label: impl Into<String>, tp: usize, fp: usize, fn_: usize) -> Self {
        let predicted = tp + fp;
        let actual = tp + fn_;
        let vacuous = predicted == 0 && actual == 0;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (precision, recall, f1) = if vacuous {
            (1.0, 1.0, 1.0)
        } else {
            (ratio(tp, predicted), ratio(tp, actual), ratio(2 * tp, 2 * tp + fp + fn_))
        };
        PrfRow {
            label: label.into(),
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            no_predictions: predicted == 0,
            vacuous,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn type_rows(per_type: &BTreeMap<EntityType, Counts>, all: Counts) -> Vec<PrfRow> {
    let mut rows: Vec<PrfRow> = EntityType::REPORT_ORDER
        .iter()
        .map(|t| {
            let c = per_type.get(t).copied().unwrap_or_default();
            PrfRow::from_counts(t.as_str(), c.tp, c.fp, c.fn_)
        })
        .collect();
    rows.push(PrfRow::from_counts(ALL_ROW, all.tp, all.fp, all.fn_));
    rows
}

/// Token-level scores over non-O word labels. The pooled row requires the
/// exact label; per-type rows compare types with B/I collapsed.
pub fn word_level_f1(pred: &[Vec<Label>], gold: &[Vec<Label>]) -> Result<Vec<PrfRow>, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            index: usize::MAX,
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut all = Counts::default();
    let mut per_type: BTreeMap<EntityType, Counts> = BTreeMap::new();
    for (index, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(EvalError::LengthMismatch {
                index,
                pred: p.len(),
                gold: g.len(),
            });
        }
        for (&pl, &gl) in p.iter().zip(g) {
            let (pt, gt) = (pl.entity_type(), gl.entity_type());
            if pt.is_some() && pl == gl {
                all.tp += 1;
            } else {
                all.fp += usize::from(pt.is_some());
                all.fn_ += usize::from(gt.is_some());
            }
            if pt.is_some() && pt == gt {
                per_type.entry(pt.unwrap()).or_default().tp += 1;
            } else {
                if let Some(t) = pt {
                    per_type.entry(t).or_default().fp += 1;
                }
                if let Some(t) = gt {
                    per_type.entry(t).or_default().fn_ += 1;
                }
            }
        }
    }
    Ok(type_rows(&per_type, all))
}

pub type DocumentSets = BTreeMap<DocKey, EntitySet>;

fn check_documents(pred: &DocumentSets, gold: &DocumentSets) -> Result<(), EvalError> {
    let missing: Vec<String> = gold
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .chain(pred.keys().filter(|k| !gold.contains_key(*k)))
        .map(|k| k.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(EvalError::MissingDocuments(missing))
    }
}

/// Identical `(surface, type)` pairs per document.
pub fn exact_set_metrics(pred: &DocumentSets, gold: &DocumentSets) -> Result<Vec<PrfRow>, EvalError> {
    check_documents(pred, gold)?;
    let mut all = Counts::default();
    let mut per_type: BTreeMap<EntityType, Counts> = BTreeMap::new();
    for (key, g) in gold {
        let p = &pred[key];
        for e in p {
            let c = per_type.entry(e.etype).or_default();
            if g.contains(e) {
                c.tp += 1;
                all.tp += 1;
            } else {
                c.fp += 1;
                all.fp += 1;
            }
        }
        for e in g.iter().filter(|e| !p.contains(*e)) {
            per_type.entry(e.etype).or_default().fn_ += 1;
            all.fn_ += 1;
        }
    }
    Ok(type_rows(&per_type, all))
}

fn token_set(surface: &str) -> BTreeSet<String> {
    split_words(surface).into_iter().map(|w| w.text).collect()
}

/// The gold entity credited to each prediction in one document under the
/// overlap rule. Exact pairs are credited first; remaining predictions then
/// take the uncredited same-type gold entity with the largest word overlap,
/// earlier gold entities winning ties.
fn partial_matches(pred: &EntitySet, gold: &EntitySet) -> Vec<Option<usize>> {
    let mut credited = vec![false; gold.len()];
    let mut assignment: Vec<Option<usize>> = vec![None; pred.len()];
    for (pi, p) in pred.iter().enumerate() {
        if let Some(gi) = gold.get_index_of(p) {
            credited[gi] = true;
            assignment[pi] = Some(gi);
        }
    }
    let gold_tokens: Vec<BTreeSet<String>> = gold.iter().map(|g| token_set(&g.surface)).collect();
    for (pi, p) in pred.iter().enumerate() {
        if assignment[pi].is_some() {
            continue;
        }
        let tokens = token_set(&p.surface);
        let mut best: Option<(usize, usize)> = None;
        for (gi, g) in gold.iter().enumerate() {
            if credited[gi] || g.etype != p.etype {
                continue;
            }
            let overlap = tokens.intersection(&gold_tokens[gi]).count();
            if overlap > 0 && best.map_or(true, |(_, o)| overlap > o) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, _)) = best {
            credited[gi] = true;
            assignment[pi] = Some(gi);
        }
    }
    assignment
}

/// Same-type entities sharing at least one word, each gold entity credited
/// at most once.
pub fn relaxed_partial_metrics(pred: &DocumentSets, gold: &DocumentSets) -> Result<Vec<PrfRow>, EvalError> {
    check_documents(pred, gold)?;
    let mut all = Counts::default();
    let mut per_type: BTreeMap<EntityType, Counts> = BTreeMap::new();
    for (key, g) in gold {
        let p = &pred[key];
        let assignment = partial_matches(p, g);
        let mut credited = vec![false; g.len()];
        for (e, a) in p.iter().zip(&assignment) {
            let c = per_type.entry(e.etype).or_default();
            match a {
                Some(gi) => {
                    credited[*gi] = true;
                    c.tp += 1;
                    all.tp += 1;
                }
                None => {
                    c.fp += 1;
                    all.fp += 1;
                }
            }
        }
        for (e, _) in g.iter().zip(&credited).filter(|(_, &c)| !c) {
            per_type.entry(e.etype).or_default().fn_ += 1;
            all.fn_ += 1;
        }
    }
    Ok(type_rows(&per_type, all))
}

/// Name of the macro-averaged language row.
pub const MACRO_ROW: &str = "macro";

/// Per-class rows over every tag seen on either side (sorted), followed by
/// the macro average of precision, recall and F1.
pub fn language_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> Result<Vec<PrfRow>, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            index: 0,
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: BTreeSet<&str> = pred.iter().chain(gold).map(|s| s.as_ref()).collect();
    let mut rows = Vec::new();
    for class in classes {
        let mut c = Counts::default();
        for (p, g) in pred.iter().zip(gold) {
            let (p, g) = (p.as_ref() == class, g.as_ref() == class);
            c.tp += usize::from(p && g);
            c.fp += usize::from(p && !g);
            c.fn_ += usize::from(!p && g);
        }
        rows.push(PrfRow::from_counts(class, c.tp, c.fp, c.fn_));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&PrfRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let sum = |f: fn(&PrfRow) -> usize| rows.iter().map(f).sum::<usize>();
    let macro_row = PrfRow {
        label: MACRO_ROW.into(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        tp: sum(|r| r.tp),
        fp: sum(|r| r.fp),
        fn_: sum(|r| r.fn_),
        no_predictions: false,
        vacuous: false,
    };
    rows.push(macro_row);
    Ok(rows)
}

/// Plain-text table; the pooled row is shown as `avg/total`.
pub fn format_table(rows: &[PrfRow]) -> String {
    let mut out = format!(
        "{:<10} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}\n",
        "label", "precision", "recall", "f1-score", "tp", "fp", "fn"
    );
    for r in rows {
        let mut note = String::new();
        if r.vacuous {
            note.push_str("  (vacuous)");
        } else if r.no_predictions {
            note.push_str("  (no predictions)");
        }
        let _ = writeln!(
            out,
            "{:<10} {:>9.5} {:>9.5} {:>9.5} {:>6} {:>6} {:>6}{note}",
            display_label(&r.label),
            r.precision,
            r.recall,
            r.f1,
            r.tp,
            r.fp,
            r.fn_
        );
    }
    out
}

fn display_label(label: &str) -> &str {
    if label == ALL_ROW {
        "avg/total"
    } else {
        label
    }
}

/// `label,precision,recall,f1,tp,fp,fn` with full-precision numbers.
pub fn format_csv(rows: &[PrfRow]) -> String {
    let mut out = String::from("label,precision,recall,f1,tp,fp,fn\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            display_label(&r.label),
            r.precision,
            r.recall,
            r.f1,
            r.tp,
            r.fp,
            r.fn_
        );
    }
    out
}

/// The pooled (or macro) row of a table.
pub fn summary_row(rows: &[PrfRow]) -> &PrfRow {
    rows.last().expect("tables always end with a summary row")
}
