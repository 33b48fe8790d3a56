use std::collections::HashSet;
use std::path::Path;

use super::{io_err, CorpusError, Result};

pub const CLS_TOKEN: &str = "[CLS]";
pub const DEFAULT_UNK: &str = "[UNK]";
const MAX_WORD_CHARS: usize = 100;

/// Subword vocabulary; continuation pieces carry a `##` prefix.
#[derive(Clone, Debug)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashSet<String>,
    unk: String,
}

impl SubwordVocab {
    pub fn new(tokens: Vec<String>, unk: &str) -> Result<Self> {
        let index: HashSet<String> = tokens.iter().cloned().collect();
        if !index.contains(unk) {
            return Err(CorpusError::Vocab(format!("missing unknown symbol `{unk}`")));
        }
        if !index.contains(CLS_TOKEN) {
            return Err(CorpusError::Vocab(format!("missing `{CLS_TOKEN}`")));
        }
        Ok(SubwordVocab {
            tokens,
            index,
            unk: unk.to_string(),
        })
    }

    /// One token per line, BERT `vocab.txt` style. The unknown symbol is
    /// `[UNK]`.
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        Self::new(tokens, DEFAULT_UNK)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    /// CRC-32 of the canonical one-token-per-line form.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(self.to_text().as_bytes())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains(token)
    }

    pub fn unk(&self) -> &str {
        &self.unk
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Greedy longest-prefix WordPiece segmentation. A word that cannot be fully
/// covered becomes a single unknown symbol.
pub fn subword_tokenize(word: &str, vocab: &SubwordVocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk.clone()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, "##");
            }
            if vocab.contains(&candidate) {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => {
                pieces.push(piece);
                start = end;
            }
            None => return vec![vocab.unk.clone()],
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> SubwordVocab {
        let mut t: Vec<String> = vec!["<unk>".into(), "[CLS]".into()];
        t.extend(tokens.iter().map(|s| s.to_string()));
        SubwordVocab::new(t, "<unk>").unwrap()
    }

    #[test]
    fn greedy_examples() {
        let v = vocab(&["play", "##ing", "p", "##lay"]);
        assert_eq!(subword_tokenize("playing", &v), ["play", "##ing"]);
        assert_eq!(subword_tokenize("play", &v), ["play"]);
        assert_eq!(subword_tokenize("qqqq", &v), ["<unk>"]);
        // Partial coverage also falls back to a single unknown symbol.
        assert_eq!(subword_tokenize("plays", &v), ["<unk>"]);
    }

    #[test]
    fn vocab_requires_specials() {
        assert!(SubwordVocab::new(vec!["[CLS]".into()], "[UNK]").is_err());
        assert!(SubwordVocab::new(vec!["[UNK]".into()], "[UNK]").is_err());
        let v = SubwordVocab::from_text("[UNK]\n[CLS]\nab\n").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.checksum(), crc32fast::hash(b"[UNK]\n[CLS]\nab\n"));
    }

    proptest! {
        #[test]
        fn concatenation_restores_word(word in "[abc]{1,12}", extra in proptest::collection::vec("[abc]{1,3}", 0..6)) {
            let mut tokens: Vec<String> = vec!["[UNK]".into(), "[CLS]".into(), "a".into(), "##b".into()];
            for e in &extra {
                tokens.push(e.clone());
                tokens.push(format!("##{e}"));
            }
            let v = SubwordVocab::new(tokens, "[UNK]").unwrap();
            let pieces = subword_tokenize(&word, &v);
            if !pieces.iter().any(|p| p == "[UNK]") {
                let joined: String = pieces.iter().map(|p| p.trim_start_matches("##")).collect();
                prop_assert_eq!(joined, word);
                prop_assert!(pieces[1..].iter().all(|p| p.starts_with("##")));
            }
        }
    }
}
