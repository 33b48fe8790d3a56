//! Prepared-sentence caches and the embedding sources that feed training and
//! prediction.
//!
//! A cache directory holds `sentences.jsonl` (one prepared document per line,
//! sorted by key), `cache.meta` (`key=value` lines) and `warnings.txt`.
//! Embeddings come either from a directory of LEMB files laid out as
//! `<dir>/<topic>/<language>/<id>.<sentence>.lemb` or from the synthetic
//! generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::corpus::{DocKey, PreparedDocument, TaggedSentence};
use crate::embedder::{load_embedding_file, synthetic_embeddings, EmbedError, LayeredEmbeddings};
use crate::labels::LanguageInventory;

pub const SENTENCES_FILE: &str = "sentences.jsonl";
pub const META_FILE: &str = "cache.meta";
pub const WARNINGS_FILE: &str = "warnings.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("cache vocabulary checksum {cache:08x} does not match {expected:08x}")]
    VocabMismatch { cache: u32, expected: u32 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{doc} sentence {sentence}: embedding token {pos} is {got:?}, cache has {want:?}")]
    TokenMismatch {
        doc: String,
        sentence: usize,
        pos: usize,
        got: String,
        want: String,
    },
    #[error("{doc} sentence {sentence}: {got} embedded tokens for {want} subtokens")]
    LengthMismatch {
        doc: String,
        sentence: usize,
        got: usize,
        want: usize,
    },
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("bad embedding source {0:?}; expected a directory or synthetic:seed,m,D")]
    BadSource(String),
    #[error("{path}: manifest field {field}: {detail}")]
    Manifest { path: String, field: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A loaded cache directory.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCache {
    pub documents: Vec<PreparedDocument>,
    pub meta: BTreeMap<String, String>,
}

impl PreparedCache {
    pub fn vocab_checksum(&self) -> Option<u32> {
        self.meta.get("vocab_crc32").and_then(|v| u32::from_str_radix(v, 16).ok())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }
}

/// `key=value` lines, sorted by key.
pub fn format_meta(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_meta(text: &str, path: &Path) -> Result<BTreeMap<String, String>, DatasetError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: "expected key=value".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// One `UNMATCHED` line per annotation that could not be located, plus one
/// `TRUNCATED` line per document that lost words to the length limit.
pub fn warning_lines(documents: &[PreparedDocument]) -> Vec<String> {
    let mut out = Vec::new();
    for d in documents {
        for a in &d.unmatched {
            out.push(format!("UNMATCHED\t{}\t{}\t{}", d.key, a.surface, a.etype));
        }
        if d.truncated_words > 0 {
            out.push(format!("TRUNCATED\t{}\t{}", d.key, d.truncated_words));
        }
    }
    out
}

/// Writes a cache directory. Output depends only on the inputs.
pub fn write_cache(dir: &Path, documents: &[PreparedDocument], meta: &BTreeMap<String, String>) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(SENTENCES_FILE);
    let mut body = Vec::new();
    for d in documents {
        serde_json::to_writer(&mut body, d).expect("serializable");
        body.push(b'\n');
    }
    fs::write(&path, body).map_err(io_err(&path))?;
    let path = dir.join(META_FILE);
    fs::write(&path, format_meta(meta)).map_err(io_err(&path))?;
    let path = dir.join(WARNINGS_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    for line in warning_lines(documents) {
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<PreparedCache, DatasetError> {
    let path = dir.join(SENTENCES_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: PreparedDocument = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        for (s, sentence) in doc.sentences.iter().enumerate() {
            sentence.validate().map_err(|detail| DatasetError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("sentence {s}: {detail}"),
            })?;
        }
        documents.push(doc);
    }
    let meta_path = dir.join(META_FILE);
    let meta = match fs::read_to_string(&meta_path) {
        Ok(text) => parse_meta(&text, &meta_path)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(io_err(&meta_path)(e)),
    };
    Ok(PreparedCache { documents, meta })
}

/// Description of an exported embedding directory: `key=value` lines with
/// `model`, `layers`, `dim`, `vocab_crc32` (hex), optional `layer_indexing`
/// and one `file.<n>` entry per LEMB file, relative to the directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingManifest {
    pub model: String,
    pub layers: usize,
    pub dim: usize,
    pub vocab_crc32: u32,
    pub layer_indexing: String,
    pub files: Vec<String>,
}

impl EmbeddingManifest {
    pub fn to_text(&self) -> String {
        let mut meta = BTreeMap::new();
        meta.insert("model".to_string(), self.model.clone());
        meta.insert("layers".to_string(), self.layers.to_string());
        meta.insert("dim".to_string(), self.dim.to_string());
        meta.insert("vocab_crc32".to_string(), format!("{:08x}", self.vocab_crc32));
        meta.insert("layer_indexing".to_string(), self.layer_indexing.clone());
        for (i, f) in self.files.iter().enumerate() {
            meta.insert(format!("file.{i:06}"), f.clone());
        }
        format_meta(&meta)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DatasetError> {
        let meta = parse_meta(text, path)?;
        let err = |field: &str, detail: &str| DatasetError::Manifest {
            path: path.display().to_string(),
            field: field.to_string(),
            detail: detail.to_string(),
        };
        let get = |field: &str| meta.get(field).ok_or_else(|| err(field, "missing"));
        let number = |field: &str| -> Result<usize, DatasetError> {
            let v: usize = get(field)?.parse().map_err(|_| err(field, "not a positive integer"))?;
            if v == 0 {
                return Err(err(field, "not a positive integer"));
            }
            Ok(v)
        };
        let mut files: Vec<(&String, &String)> = meta.iter().filter(|(k, _)| k.starts_with("file.")).collect();
        files.sort();
        Ok(EmbeddingManifest {
            model: get("model")?.clone(),
            layers: number("layers")?,
            dim: number("dim")?,
            vocab_crc32: u32::from_str_radix(get("vocab_crc32")?, 16).map_err(|_| err("vocab_crc32", "not hex"))?,
            layer_indexing: meta.get("layer_indexing").cloned().unwrap_or_default(),
            files: files.into_iter().map(|(_, v)| v.clone()).collect(),
        })
    }

    /// The manifest of `dir`, if it has one.
    pub fn load(dir: &Path) -> Result<Option<Self>, DatasetError> {
        let path = dir.join(MANIFEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => Self::parse(&text, &path).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Vocabulary checksum agreement with a prepared cache.
    pub fn check_vocab(&self, cache_crc32: u32) -> Result<(), DatasetError> {
        if self.vocab_crc32 != cache_crc32 {
            return Err(DatasetError::VocabMismatch {
                cache: cache_crc32,
                expected: self.vocab_crc32,
            });
        }
        Ok(())
    }
}

/// Where layered embeddings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    Synthetic { seed: u64, layers: usize, dim: usize },
    Directory(PathBuf),
}

impl EmbeddingSource {
    /// `synthetic:seed,m,D` or a directory path.
    pub fn parse(spec: &str) -> Result<Self, DatasetError> {
        match spec.strip_prefix("synthetic:") {
            Some(rest) => Self::parse_synthetic(rest),
            None => Ok(EmbeddingSource::Directory(PathBuf::from(spec))),
        }
    }

    /// `seed,m,D`.
    pub fn parse_synthetic(triple: &str) -> Result<Self, DatasetError> {
        let parts: Vec<&str> = triple.split(',').map(str::trim).collect();
        let bad = || DatasetError::BadSource(triple.to_string());
        if parts.len() != 3 {
            return Err(bad());
        }
        let seed = parts[0].parse().map_err(|_| bad())?;
        let layers: usize = parts[1].parse().map_err(|_| bad())?;
        let dim: usize = parts[2].parse().map_err(|_| bad())?;
        if layers == 0 || dim == 0 {
            return Err(bad());
        }
        Ok(EmbeddingSource::Synthetic { seed, layers, dim })
    }

    pub fn describe(&self) -> String {
        match self {
            EmbeddingSource::Synthetic { seed, layers, dim } => format!("synthetic:{seed},{layers},{dim}"),
            EmbeddingSource::Directory(p) => p.display().to_string(),
        }
    }

    pub fn lemb_path(dir: &Path, key: &DocKey, sentence: usize) -> PathBuf {
        dir.join(&key.topic)
            .join(&key.language)
            .join(format!("{}.{sentence}.lemb", key.id))
    }

    /// Embeddings for one cached sentence, checked token by token.
    pub fn load(&self, key: &DocKey, index: usize, sentence: &TaggedSentence) -> Result<LayeredEmbeddings, DatasetError> {
        let emb = match self {
            EmbeddingSource::Synthetic { seed, layers, dim } => {
                return Ok(synthetic_embeddings(&sentence.subtokens, *layers, *dim, *seed));
            }
            EmbeddingSource::Directory(dir) => load_embedding_file(&Self::lemb_path(dir, key, index))?,
        };
        check_tokens(&emb, key, index, sentence)?;
        Ok(emb)
    }
}

/// Embedded tokens must equal the cached subtokens exactly.
pub fn check_tokens(emb: &LayeredEmbeddings, key: &DocKey, index: usize, sentence: &TaggedSentence) -> Result<(), DatasetError> {
    if emb.len() != sentence.len() {
        return Err(DatasetError::LengthMismatch {
            doc: key.to_string(),
            sentence: index,
            got: emb.len(),
            want: sentence.len(),
        });
    }
    if let Some(pos) = (0..emb.len()).find(|&i| emb.tokens()[i] != sentence.subtokens[i]) {
        return Err(DatasetError::TokenMismatch {
            doc: key.to_string(),
            sentence: index,
            pos,
            got: emb.tokens()[pos].clone(),
            want: sentence.subtokens[pos].clone(),
        });
    }
    Ok(())
}

/// One sentence ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// Index into [`Dataset::documents`].
    pub doc: usize,
    /// Sentence index within the document.
    pub sentence: usize,
    pub embeddings: LayeredEmbeddings,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub language: usize,
}

/// Documents with the embeddings of every sentence loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub documents: Vec<PreparedDocument>,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn build(
        documents: Vec<PreparedDocument>,
        source: &EmbeddingSource,
        languages: &LanguageInventory,
    ) -> Result<Self, DatasetError> {
        let mut items = Vec::new();
        for (d, doc) in documents.iter().enumerate() {
            let language = languages
                .index_of(&doc.key.language)
                .ok_or_else(|| DatasetError::UnknownLanguage(doc.key.language.clone()))?;
            for (s, sentence) in doc.sentences.iter().enumerate() {
                items.push(Item {
                    doc: d,
                    sentence: s,
                    embeddings: source.load(&doc.key, s, sentence)?,
                    mask: sentence.mask_bools(),
                    labels: sentence.label_indices(),
                    language,
                });
            }
        }
        Ok(Dataset { documents, items })
    }

    pub fn tagged(&self, item: &Item) -> &TaggedSentence {
        &self.documents[item.doc].sentences[item.sentence]
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// Documents whose topic is in `topics` (all when empty).
    pub fn filter_topics(documents: Vec<PreparedDocument>, topics: &[String]) -> Vec<PreparedDocument> {
        if topics.is_empty() {
            return documents;
        }
        documents.into_iter().filter(|d| topics.contains(&d.key.topic)).collect()
    }
}
