use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    split_words, subword_tokenize, words_to_iob, AnnotatedDocument, CorpusError, DocKey,
    EntityAnnotation, Result, SubwordVocab, Word, CLS_TOKEN,
};
use crate::labels::Label;

pub const PAD_TOKEN: &str = "[PAD]";

/// A sentence at word and subword granularity.
///
/// Position 0 of the subword view is always `[CLS]`; padding follows the last
/// real piece. `alignment[w]` is the half-open subword range of word `w`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub word_labels: Vec<Label>,
    pub subtokens: Vec<String>,
    pub subtoken_labels: Vec<Label>,
    pub alignment: Vec<(usize, usize)>,
    pub mask: Vec<u8>,
    pub language: String,
}

impl TaggedSentence {
    pub fn len(&self) -> usize {
        self.subtokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtokens.is_empty()
    }

    /// Number of unmasked positions, `[CLS]` included.
    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.subtoken_labels.iter().map(|l| l.index()).collect()
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.words.len() != self.word_labels.len() || self.words.len() != self.alignment.len() {
            return Err("word, label and alignment counts differ".into());
        }
        let n = self.subtokens.len();
        if self.subtoken_labels.len() != n || self.mask.len() != n {
            return Err("subtoken, label and mask lengths differ".into());
        }
        if n == 0 || self.subtokens[0] != CLS_TOKEN || self.subtoken_labels[0] != Label::Cls {
            return Err("position 0 must be [CLS]".into());
        }
        let active = self.active_len();
        if self.mask[..active].iter().any(|&m| m != 1) || self.mask[active..].iter().any(|&m| m != 0) {
            return Err("mask must be a prefix of ones".into());
        }
        let mut next = 1;
        for (w, &(s, e)) in self.alignment.iter().enumerate() {
            if s != next || e <= s || e > active {
                return Err(format!("alignment of word {w} is {s}..{e}, expected to start at {next}"));
            }
            if self.subtoken_labels[s] != self.word_labels[w] {
                return Err(format!("first piece of word {w} does not carry the word label"));
            }
            if self.subtoken_labels[s + 1..e].iter().any(|&l| l != Label::X) {
                return Err(format!("continuation pieces of word {w} must be X"));
            }
            next = e;
        }
        if next != active {
            return Err("alignment does not cover every real subtoken".into());
        }
        for i in active..n {
            if self.subtoken_labels[i] != Label::Pad || self.subtokens[i] != PAD_TOKEN {
                return Err(format!("padded position {i} must be pad"));
            }
        }
        Ok(())
    }
}

/// A built sentence plus the number of trailing words dropped to fit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltSentence {
    pub sentence: TaggedSentence,
    pub truncated_words: usize,
}

/// Lays words out as `[CLS]` + word pieces, padded to `max_len`. Words that
/// do not fit are dropped whole and counted.
pub fn build_tagged_sentence<S: AsRef<str>>(
    words: &[S],
    word_labels: &[Label],
    vocab: &SubwordVocab,
    max_len: usize,
    language: &str,
) -> Result<BuiltSentence> {
    if words.len() != word_labels.len() {
        return Err(CorpusError::Invalid(format!(
            "{} words but {} labels",
            words.len(),
            word_labels.len()
        )));
    }
    if max_len < 2 {
        return Err(CorpusError::Invalid(format!("max_len {max_len} is below 2")));
    }
    let mut subtokens = vec![CLS_TOKEN.to_string()];
    let mut subtoken_labels = vec![Label::Cls];
    let mut alignment = Vec::new();
    let mut kept = 0;
    for (i, (w, &label)) in words.iter().zip(word_labels).enumerate() {
        let pieces = subword_tokenize(w.as_ref(), vocab);
        if subtokens.len() + pieces.len() > max_len {
            if i == 0 {
                return Err(CorpusError::FirstWordTooLong {
                    word: w.as_ref().to_string(),
                    pieces: pieces.len(),
                    limit: max_len - 1,
                });
            }
            break;
        }
        let start = subtokens.len();
        for (k, p) in pieces.into_iter().enumerate() {
            subtokens.push(p);
            subtoken_labels.push(if k == 0 { label } else { Label::X });
        }
        alignment.push((start, subtokens.len()));
        kept += 1;
    }
    let active = subtokens.len();
    subtokens.resize(max_len, PAD_TOKEN.to_string());
    subtoken_labels.resize(max_len, Label::Pad);
    let mut mask = vec![1u8; active];
    mask.resize(max_len, 0);
    Ok(BuiltSentence {
        sentence: TaggedSentence {
            words: words[..kept].iter().map(|w| w.as_ref().to_string()).collect(),
            word_labels: word_labels[..kept].to_vec(),
            subtokens,
            subtoken_labels,
            alignment,
            mask,
            language: language.to_string(),
        },
        truncated_words: words.len() - kept,
    })
}

/// Groups a document's words into sentences: one per text line, with lines
/// longer than `max_len` subtokens split further at `". "` boundaries and the
/// pieces greedily re-packed.
pub fn segment_words(text: &str, words: &[Word], vocab: &SubwordVocab, max_len: usize) -> Vec<Range<usize>> {
    let chars: Vec<char> = text.chars().collect();
    let mut line_of = Vec::with_capacity(chars.len());
    let mut line = 0usize;
    for &c in &chars {
        line_of.push(line);
        if c == '\n' {
            line += 1;
        }
    }
    let mut lines: Vec<Range<usize>> = Vec::new();
    for (i, w) in words.iter().enumerate() {
        match lines.last_mut() {
            Some(r) if line_of[words[r.start].offset] == line_of[w.offset] => r.end = i + 1,
            _ => lines.push(i..i + 1),
        }
    }

    let budget = max_len.saturating_sub(1);
    let mut out = Vec::new();
    for range in lines {
        let cost: Vec<usize> = words[range.clone()]
            .iter()
            .map(|w| subword_tokenize(&w.text, vocab).len())
            .collect();
        if cost.iter().sum::<usize>() <= budget {
            out.push(range);
            continue;
        }
        let mut pieces: Vec<Range<usize>> = Vec::new();
        let mut start = range.start;
        for i in range.clone() {
            let w = &words[i];
            let boundary = w.text == "."
                && chars.get(w.offset + 1).map_or(true, |c| c.is_whitespace())
                && i + 1 < range.end;
            if boundary {
                pieces.push(start..i + 1);
                start = i + 1;
            }
        }
        pieces.push(start..range.end);
        let mut current: Option<(Range<usize>, usize)> = None;
        for p in pieces {
            let c: usize = cost[p.start - range.start..p.end - range.start].iter().sum();
            current = match current {
                Some((r, total)) if total + c <= budget => Some((r.start..p.end, total + c)),
                Some((r, _)) => {
                    out.push(r);
                    Some((p, c))
                }
                None => Some((p, c)),
            };
        }
        out.extend(current.map(|(r, _)| r));
    }
    out
}

/// A document converted to tagged sentences, with its gold entity set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedDocument {
    pub key: DocKey,
    pub sentences: Vec<TaggedSentence>,
    pub gold: Vec<EntityAnnotation>,
    pub unmatched: Vec<EntityAnnotation>,
    pub truncated_words: usize,
}

pub fn prepare_document(doc: &AnnotatedDocument, vocab: &SubwordVocab, max_len: usize) -> Result<PreparedDocument> {
    let words = split_words(&doc.doc.text);
    let texts: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
    let conv = words_to_iob(&texts, &doc.annotations);
    let mut sentences = Vec::new();
    let mut truncated = 0;
    for range in segment_words(&doc.doc.text, &words, vocab, max_len) {
        let built = build_tagged_sentence(
            &texts[range.clone()],
            &conv.labels[range],
            vocab,
            max_len,
            &doc.doc.language,
        )?;
        truncated += built.truncated_words;
        sentences.push(built.sentence);
    }
    Ok(PreparedDocument {
        key: doc.doc.key(),
        sentences,
        gold: doc.annotations.iter().cloned().collect(),
        unmatched: conv.unmatched,
        truncated_words: truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::EntityType;
    use proptest::prelude::*;

    fn vocab(tokens: &[&str]) -> SubwordVocab {
        let mut t: Vec<String> = vec!["[UNK]".into(), "[CLS]".into()];
        t.extend(tokens.iter().map(|s| s.to_string()));
        SubwordVocab::new(t, "[UNK]").unwrap()
    }

    #[test]
    fn builds_playing_example() {
        let v = vocab(&["play", "##ing"]);
        let b = build_tagged_sentence(&["playing"], &[Label::B(EntityType::Evt)], &v, 5, "pl").unwrap();
        let s = b.sentence;
        assert_eq!(s.subtokens, ["[CLS]", "play", "##ing", "[PAD]", "[PAD]"]);
        assert_eq!(
            s.subtoken_labels,
            [Label::Cls, Label::B(EntityType::Evt), Label::X, Label::Pad, Label::Pad]
        );
        assert_eq!(s.mask, [1, 1, 1, 0, 0]);
        assert_eq!(s.alignment, [(1, 3)]);
        assert_eq!(b.truncated_words, 0);
        s.validate().unwrap();
    }

    #[test]
    fn empty_sentence_is_cls_and_padding() {
        let v = vocab(&[]);
        let words: [&str; 0] = [];
        let s = build_tagged_sentence(&words, &[], &v, 4, "bg").unwrap().sentence;
        assert_eq!(s.subtoken_labels, [Label::Cls, Label::Pad, Label::Pad, Label::Pad]);
        assert_eq!(s.mask, [1, 0, 0, 0]);
        s.validate().unwrap();
    }

    #[test]
    fn truncation_drops_whole_words() {
        let v = vocab(&["a", "b", "c"]);
        let b = build_tagged_sentence(&["a", "b", "c"], &[Label::O; 3], &v, 3, "cs").unwrap();
        assert_eq!(b.truncated_words, 1);
        assert_eq!(b.sentence.words, ["a", "b"]);
        b.sentence.validate().unwrap();
    }

    #[test]
    fn first_word_too_long_is_an_error() {
        let v = vocab(&["a", "##a"]);
        let err = build_tagged_sentence(&["aaaa"], &[Label::O], &v, 3, "cs").unwrap_err();
        assert!(matches!(err, CorpusError::FirstWordTooLong { pieces: 4, limit: 2, .. }));
    }

    #[test]
    fn segments_by_line_and_long_sentences() {
        let v = vocab(&["a", "b", "c", "."]);
        let text = "a b.\nc a. b c. a";
        let words = split_words(text);
        let segs = segment_words(text, &words, &v, 64);
        assert_eq!(segs, [0..3, 3..10]);
        // The second line holds 7 pieces; with room for 4 it splits at ". "
        // and the last two pieces are packed back together.
        let segs = segment_words(text, &words, &v, 5);
        assert_eq!(segs, [0..3, 3..6, 6..10]);
    }

    proptest! {
        #[test]
        fn built_sentences_satisfy_invariants(
            words in proptest::collection::vec("[abc]{1,5}", 0..8),
            label_ix in proptest::collection::vec(0usize..11, 8),
            extra in proptest::collection::vec("[abc]{1,2}", 0..5),
            max_len in 2usize..20,
        ) {
            let mut tokens: Vec<&str> = vec!["a", "##a", "b", "##b"];
            let owned: Vec<String> = extra.iter().flat_map(|e| [e.clone(), format!("##{e}")]).collect();
            tokens.extend(owned.iter().map(String::as_str));
            let v = vocab(&tokens);
            let labels: Vec<Label> = (0..words.len()).map(|i| Label::from_index(label_ix[i]).unwrap()).collect();
            match build_tagged_sentence(&words, &labels, &v, max_len, "ru") {
                Ok(b) => {
                    prop_assert_eq!(b.sentence.len(), max_len);
                    prop_assert_eq!(b.sentence.words.len() + b.truncated_words, words.len());
                    prop_assert!(b.sentence.validate().is_ok(), "{:?}", b.sentence.validate());
                }
                Err(CorpusError::FirstWordTooLong { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
