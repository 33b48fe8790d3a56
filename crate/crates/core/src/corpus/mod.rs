//! Raw documents, annotation files and their conversion to tagged sentences.
//!
//! Corpus layout on disk:
//!
//! ```text
//! corpus_root/<topic>/<language>/raw/<id>.txt
//! corpus_root/<topic>/<language>/ann/<id>.ann
//! ```
//!
//! The flat form `corpus_root/<topic>/<language>/<id>.txt` is accepted for
//! single documents as well.

mod iob;
pub mod synthetic;
mod tagged;
mod wordpiece;

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::labels::{EntityType, LanguageInventory};

pub use iob::{spans_from_iob, split_words, words_to_iob, IobConversion, Word};
pub use tagged::{
    build_tagged_sentence, prepare_document, segment_words, BuiltSentence, PreparedDocument,
    TaggedSentence, PAD_TOKEN,
};
pub use wordpiece::{subword_tokenize, SubwordVocab, CLS_TOKEN, DEFAULT_UNK};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },
    #[error("{path}: unknown language directory `{language}`")]
    UnknownLanguage { path: PathBuf, language: String },
    #[error("{0}: document is empty")]
    EmptyDocument(PathBuf),
    #[error("{path}:{line}: expected `<surface>\\t<TYPE>`, got {content:?}")]
    MalformedAnnotation {
        path: PathBuf,
        line: usize,
        content: String,
    },
    #[error("{path}:{line}: unknown entity type `{etype}`")]
    UnknownType {
        path: PathBuf,
        line: usize,
        etype: String,
    },
    #[error("{0}: path does not follow <topic>/<language>/<id> layout")]
    Layout(PathBuf),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("first word `{word}` needs {pieces} subtokens, more than max_len - 1 = {limit}")]
    FirstWordTooLong {
        word: String,
        pieces: usize,
        limit: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Identifies a document inside a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocKey {
    pub topic: String,
    pub language: String,
    pub id: String,
}

impl DocKey {
    /// `<topic>/<language>/<id>`.
    pub fn rel_path(&self) -> PathBuf {
        Path::new(&self.topic).join(&self.language).join(&self.id)
    }
}

impl std::fmt::Display for DocKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.topic, self.language, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub language: String,
    pub topic: String,
    pub text: String,
}

impl Document {
    pub fn key(&self) -> DocKey {
        DocKey {
            topic: self.topic.clone(),
            language: self.language.clone(),
            id: self.id.clone(),
        }
    }
}

/// A surface form with its entity type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub surface: String,
    pub etype: EntityType,
}

impl EntityAnnotation {
    pub fn new(surface: impl Into<String>, etype: EntityType) -> Self {
        EntityAnnotation {
            surface: surface.into(),
            etype,
        }
    }
}

/// Deduplicated `(surface, type)` pairs in first-seen order.
pub type EntitySet = IndexSet<EntityAnnotation>;

/// Zero-width and bidi formatting characters that survive NFC but carry no
/// text.
fn is_invisible_format(c: char) -> bool {
    matches!(c,
        '\u{00AD}' | '\u{200B}'..='\u{200F}' | '\u{202A}'..='\u{202E}'
        | '\u{2060}'..='\u{2064}' | '\u{FEFF}')
}

/// NFC-normalizes and strips control characters other than newline and tab,
/// plus invisible formatting characters.
pub fn clean_text(raw: &str) -> String {
    raw.nfc()
        .filter(|&c| !(c.is_control() && c != '\n' && c != '\t') && !is_invisible_format(c))
        .collect()
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    String::from_utf8(bytes).map_err(|e| CorpusError::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CorpusError::Layout(path.to_path_buf()))
}

/// Language and topic directories above a document or annotation file.
fn language_and_topic(path: &Path, inner: &str) -> Result<(String, String)> {
    let mut dirs = path
        .ancestors()
        .skip(1)
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()));
    let mut lang = dirs.next().ok_or_else(|| CorpusError::Layout(path.to_path_buf()))?;
    if lang == inner {
        lang = dirs.next().ok_or_else(|| CorpusError::Layout(path.to_path_buf()))?;
    }
    let topic = dirs.next().ok_or_else(|| CorpusError::Layout(path.to_path_buf()))?;
    Ok((lang.to_string(), topic.to_string()))
}

/// Reads one raw document; language and topic come from the directory layout.
pub fn load_document(path: &Path, languages: &LanguageInventory) -> Result<Document> {
    let raw = read_utf8(path)?;
    let (language, topic) = language_and_topic(path, "raw")?;
    if !languages.contains(&language) {
        return Err(CorpusError::UnknownLanguage {
            path: path.to_path_buf(),
            language,
        });
    }
    let text = clean_text(&raw);
    if text.is_empty() {
        return Err(CorpusError::EmptyDocument(path.to_path_buf()));
    }
    Ok(Document {
        id: file_stem(path)?,
        language,
        topic,
        text,
    })
}

/// Parses `<surface>\t<TYPE>` lines, collapsing exact duplicates.
pub fn parse_annotations(content: &str, path: &Path) -> Result<EntitySet> {
    let mut out = EntitySet::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [surface, etype] = fields[..] else {
            return Err(CorpusError::MalformedAnnotation {
                path: path.to_path_buf(),
                line: i + 1,
                content: line.to_string(),
            });
        };
        let surface = clean_text(surface).trim().to_string();
        if surface.is_empty() {
            return Err(CorpusError::MalformedAnnotation {
                path: path.to_path_buf(),
                line: i + 1,
                content: line.to_string(),
            });
        }
        let etype = etype.trim().parse().map_err(|_| CorpusError::UnknownType {
            path: path.to_path_buf(),
            line: i + 1,
            etype: etype.to_string(),
        })?;
        out.insert(EntityAnnotation { surface, etype });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<EntitySet> {
    parse_annotations(&read_utf8(path)?, path)
}

/// Serializes an entity set in the annotation-file format.
pub fn format_annotations(set: &EntitySet) -> String {
    set.iter()
        .map(|a| format!("{}\t{}\n", a.surface, a.etype))
        .collect()
}

/// A document with its (possibly empty) gold annotations.
#[derive(Clone, Debug)]
pub struct AnnotatedDocument {
    pub doc: Document,
    pub annotations: EntitySet,
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(path)
        .map_err(io_err(path))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(path)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads every document under `root`, sorted by `(topic, language, id)`.
/// Missing annotation files yield empty annotation sets.
pub fn load_corpus(root: &Path, languages: &LanguageInventory) -> Result<Vec<AnnotatedDocument>> {
    let mut files = Vec::new();
    for topic in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        for lang in sorted_dir(&topic)?.into_iter().filter(|p| p.is_dir()) {
            let raw_dir = lang.join("raw");
            let dir = if raw_dir.is_dir() { raw_dir } else { lang.clone() };
            for f in sorted_dir(&dir)? {
                if f.extension().and_then(|e| e.to_str()) == Some("txt") {
                    files.push((f, lang.join("ann")));
                }
            }
        }
    }
    let mut docs = files
        .par_iter()
        .map(|(path, ann_dir)| {
            let doc = load_document(path, languages)?;
            let ann_path = ann_dir.join(format!("{}.ann", doc.id));
            let annotations = if ann_path.exists() {
                load_annotations(&ann_path)?
            } else {
                EntitySet::new()
            };
            Ok(AnnotatedDocument { doc, annotations })
        })
        .collect::<Result<Vec<_>>>()?;
    docs.sort_by_key(|d| d.doc.key());
    Ok(docs)
}
