use unicode_normalization::char::is_combining_mark;

use super::{EntityAnnotation, EntitySet};
use crate::labels::Label;

/// A word and the character offset of its first character.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub offset: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

/// Words are maximal runs of letters and digits; every other non-space
/// character is a word on its own.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Option<Word> = None;
    for (offset, c) in text.chars().enumerate() {
        if is_word_char(c) {
            match &mut current {
                Some(w) => w.text.push(c),
                None => {
                    current = Some(Word {
                        text: c.to_string(),
                        offset,
                    })
                }
            }
            continue;
        }
        words.extend(current.take());
        if !c.is_whitespace() {
            words.push(Word {
                text: c.to_string(),
                offset,
            });
        }
    }
    words.extend(current);
    words
}

/// Word labels plus annotations that never occur in the text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IobConversion {
    pub labels: Vec<Label>,
    pub unmatched: Vec<EntityAnnotation>,
}

/// Labels every non-overlapping occurrence of each annotation's word sequence.
///
/// Overlapping candidates are resolved longest surface first, then earliest
/// start, then annotation order.
pub fn words_to_iob<S: AsRef<str>>(words: &[S], annotations: &EntitySet) -> IobConversion {
    struct Candidate {
        start: usize,
        len: usize,
        ann: usize,
    }
    let mut candidates = Vec::new();
    let mut unmatched = Vec::new();
    for (ai, ann) in annotations.iter().enumerate() {
        let pattern: Vec<String> = split_words(&super::clean_text(&ann.surface))
            .into_iter()
            .map(|w| w.text)
            .collect();
        let mut found = false;
        if !pattern.is_empty() && pattern.len() <= words.len() {
            for start in 0..=words.len() - pattern.len() {
                if pattern
                    .iter()
                    .zip(&words[start..])
                    .all(|(p, w)| p == w.as_ref())
                {
                    found = true;
                    candidates.push(Candidate {
                        start,
                        len: pattern.len(),
                        ann: ai,
                    });
                }
            }
        }
        if !found {
            unmatched.push(ann.clone());
        }
    }
    candidates.sort_by(|a, b| {
        b.len
            .cmp(&a.len)
            .then(a.start.cmp(&b.start))
            .then(a.ann.cmp(&b.ann))
    });
    let mut labels = vec![Label::O; words.len()];
    let mut taken = vec![false; words.len()];
    for c in candidates {
        let span = c.start..c.start + c.len;
        if taken[span.clone()].iter().any(|&t| t) {
            continue;
        }
        let etype = annotations[c.ann].etype;
        for (k, i) in span.enumerate() {
            taken[i] = true;
            labels[i] = if k == 0 { Label::B(etype) } else { Label::I(etype) };
        }
    }
    IobConversion { labels, unmatched }
}

/// Joins non-`O` runs into entity spans.
///
/// A span ends at `O`, at any `B-`, and at a change of type; an `I-` that does
/// not continue a span of its own type opens a new one. Supporting labels are
/// read as `O`.
pub fn spans_from_iob<S: AsRef<str>>(words: &[S], labels: &[Label]) -> EntitySet {
    let mut out = EntitySet::new();
    let mut current: Option<(crate::labels::EntityType, Vec<&str>)> = None;
    let flush = |cur: &mut Option<(crate::labels::EntityType, Vec<&str>)>, out: &mut EntitySet| {
        if let Some((etype, parts)) = cur.take() {
            out.insert(EntityAnnotation::new(parts.join(" "), etype));
        }
    };
    for (w, &label) in words.iter().zip(labels) {
        match label {
            Label::B(t) => {
                flush(&mut current, &mut out);
                current = Some((t, vec![w.as_ref()]));
            }
            Label::I(t) => match &mut current {
                Some((ct, parts)) if *ct == t => parts.push(w.as_ref()),
                _ => {
                    flush(&mut current, &mut out);
                    current = Some((t, vec![w.as_ref()]));
                }
            },
            _ => flush(&mut current, &mut out),
        }
    }
    flush(&mut current, &mut out);
    out
}
