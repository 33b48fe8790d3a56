//! Per-document prediction files and directory discovery.
//!
//! Predictions live at `<out>/<topic>/<language>/<id>.<ext>`:
//! `.ann` holds `surface<TAB>TYPE` lines, `.iob` holds `word<TAB>LABEL` lines
//! with a blank line after each sentence, `.nbest` holds
//! `rank<TAB>score<TAB>labels` lines per sentence (blank line after each
//! sentence), and `.lang` holds one `tag<TAB>probability` line per sentence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use slavtag::corpus::DocKey;
use slavtag::labels::Label;

use crate::error::{io, Failure, Result};

pub const ANN: &str = "ann";
pub const IOB: &str = "iob";
pub const NBEST: &str = "nbest";
pub const LANG: &str = "lang";

pub fn doc_path(root: &Path, key: &DocKey, ext: &str) -> PathBuf {
    root.join(&key.topic).join(&key.language).join(format!("{}.{ext}", key.id))
}

pub fn write_doc_file(root: &Path, key: &DocKey, ext: &str, content: &str) -> Result<()> {
    let path = doc_path(root, key, ext);
    let dir = path.parent().expect("document paths have parents");
    fs::create_dir_all(dir).map_err(io(dir))?;
    fs::write(&path, content).map_err(io(&path))
}

/// Every `<topic>/<language>/[ann/]<id>.<ext>` file under `root`, by key.
pub fn discover(root: &Path, ext: &str) -> Result<BTreeMap<DocKey, PathBuf>> {
    if !root.is_dir() {
        return Err(Failure::Data(format!("{}: not a directory", root.display())));
    }
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Failure::Data(format!("{}: {e}", root.display())))?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays under root");
        let parts: Vec<String> = rel.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        let (topic, language) = match parts.len() {
            3 => (&parts[0], &parts[1]),
            4 if parts[2] == ANN || parts[2] == "raw" => (&parts[0], &parts[1]),
            _ => continue,
        };
        let id = path.file_stem().expect("files have stems").to_string_lossy().into_owned();
        let key = DocKey {
            topic: topic.clone(),
            language: language.clone(),
            id,
        };
        out.insert(key, path.to_path_buf());
    }
    Ok(out)
}

pub fn format_iob(sentences: &[(Vec<String>, Vec<Label>)]) -> String {
    let mut out = String::new();
    for (words, labels) in sentences {
        for (w, l) in words.iter().zip(labels) {
            let _ = writeln!(out, "{w}\t{l}");
        }
        out.push('\n');
    }
    out
}

/// Word labels per sentence from an `.iob` file.
pub fn parse_iob(text: &str, path: &Path) -> Result<Vec<Vec<Label>>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            sentences.push(std::mem::take(&mut current));
            continue;
        }
        let label = line
            .rsplit_once('\t')
            .map(|(_, l)| l)
            .ok_or_else(|| Failure::Data(format!("{}:{}: expected word<TAB>label", path.display(), i + 1)))?;
        let label: Label = label
            .parse()
            .map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        current.push(label);
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

/// Language tag per sentence from a `.lang` file.
pub fn parse_lang(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').next().unwrap_or("").to_string())
        .collect()
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use slavtag::labels::EntityType;

    #[test]
    fn iob_round_trip() {
        let s = vec![
            (vec!["Jan".to_string(), "Kowalski".to_string()], vec![Label::B(EntityType::Per), Label::I(EntityType::Per)]),
            (vec!["tak".to_string()], vec![Label::O]),
        ];
        let text = format_iob(&s);
        let back = parse_iob(&text, Path::new("x")).unwrap();
        assert_eq!(back, vec![s[0].1.clone(), s[1].1.clone()]);
    }

    #[test]
    fn discovery_accepts_both_layouts() {
        let dir = tempfile::tempdir().unwrap();
        for rel in ["brexit/pl/1.ann", "brexit/cs/ann/2.ann", "brexit/cs/raw/2.txt", "stray.ann"] {
            let p = dir.path().join(rel);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, "").unwrap();
        }
        let found = discover(dir.path(), ANN).unwrap();
        let keys: Vec<String> = found.keys().map(|k| k.to_string()).collect();
        assert_eq!(keys, ["brexit/cs/2", "brexit/pl/1"]);
    }
}
