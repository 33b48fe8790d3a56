//! Subword predictions back to word labels and entity sets.

use crate::corpus::{spans_from_iob, EntitySet, TaggedSentence};
use crate::labels::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PostprocessError {
    #[error("path has {path} labels for {subtokens} subtokens")]
    LengthMismatch { path: usize, subtokens: usize },
    #[error("label index {0} is not in the inventory")]
    BadLabel(usize),
}

/// Majority label among a word's pieces, ignoring `X` (and `[CLS]`/pad,
/// which count as `X`). Ties go to the label seen first; no votes gives `O`.
pub fn vote_word_label(labels: &[Label]) -> Label {
    let mut tally: Vec<(Label, usize)> = Vec::new();
    for &l in labels {
        if l.is_supporting() {
            continue;
        }
        match tally.iter_mut().find(|(seen, _)| *seen == l) {
            Some((_, n)) => *n += 1,
            None => tally.push((l, 1)),
        }
    }
    let mut best: Option<(Label, usize)> = None;
    for (l, n) in tally {
        if best.map_or(true, |(_, m)| n > m) {
            best = Some((l, n));
        }
    }
    best.map_or(Label::O, |(l, _)| l)
}

/// Word labels obtained by voting over each word's aligned subword range.
pub fn word_labels_from_path(sentence: &TaggedSentence, path: &[usize]) -> Result<Vec<Label>, PostprocessError> {
    if path.len() != sentence.len() {
        return Err(PostprocessError::LengthMismatch {
            path: path.len(),
            subtokens: sentence.len(),
        });
    }
    let labels = path
        .iter()
        .map(|&i| Label::from_index(i).ok_or(PostprocessError::BadLabel(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sentence
        .alignment
        .iter()
        .map(|&(start, end)| vote_word_label(&labels[start..end]))
        .collect())
}

/// Entities implied by a subword label path over one sentence.
pub fn predictions_to_entities(sentence: &TaggedSentence, path: &[usize]) -> Result<EntitySet, PostprocessError> {
    let words = word_labels_from_path(sentence, path)?;
    Ok(spans_from_iob(&sentence.words, &words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_tagged_sentence, EntityAnnotation, SubwordVocab};
    use crate::labels::EntityType::*;
    use proptest::prelude::*;
    use Label::*;

    #[test]
    fn voting_examples() {
        assert_eq!(vote_word_label(&[B(Per)]), B(Per));
        assert_eq!(vote_word_label(&[B(Loc), X, X]), B(Loc));
        assert_eq!(vote_word_label(&[B(Per), I(Per), I(Per)]), I(Per));
        assert_eq!(vote_word_label(&[B(Per), I(Per)]), B(Per));
        assert_eq!(vote_word_label(&[X, X]), O);
        assert_eq!(vote_word_label(&[Cls, Pad, I(Org)]), I(Org));
    }

    fn fixture() -> (TaggedSentence, Vec<usize>) {
        let vocab = SubwordVocab::from_text("[UNK]\n[CLS]\nJohn\nlives\nin\nNew\nYo\n##rk\n").unwrap();
        let words = ["John", "lives", "in", "New", "York"];
        let labels = [B(Per), O, O, B(Loc), I(Loc)];
        let built = build_tagged_sentence(&words, &labels, &vocab, 10, "cs").unwrap();
        let path = built.sentence.label_indices();
        (built.sentence, path)
    }

    #[test]
    fn gold_path_gives_gold_entities() {
        let (s, path) = fixture();
        let got = predictions_to_entities(&s, &path).unwrap();
        let want: EntitySet = [EntityAnnotation::new("John", Per), EntityAnnotation::new("New York", Loc)]
            .into_iter()
            .collect();
        assert_eq!(got, want);

        let all_o = vec![O.index(); s.len()];
        assert!(predictions_to_entities(&s, &all_o).unwrap().is_empty());
        assert!(matches!(
            predictions_to_entities(&s, &path[1..]),
            Err(PostprocessError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cls_mid_sentence_votes_as_x() {
        let (s, mut path) = fixture();
        // "York" is "Yo ##rk": put [CLS] on the first piece, I-LOC on the second.
        let (start, _) = s.alignment[4];
        path[start] = Cls.index();
        path[start + 1] = I(Loc).index();
        let words = word_labels_from_path(&s, &path).unwrap();
        assert_eq!(words[4], I(Loc));
    }

    fn label_strategy() -> impl Strategy<Value = Label> {
        (0usize..14).prop_map(|i| Label::from_index(i).unwrap())
    }

    proptest! {
        #[test]
        fn strict_majority_ignores_order(labels in proptest::collection::vec(label_strategy(), 1..8), seed in any::<u64>()) {
            let winner = vote_word_label(&labels);
            let counted: Vec<Label> = labels.iter().copied().filter(|l| !l.is_supporting()).collect();
            let votes = counted.iter().filter(|&&l| l == winner).count();
            let strict = counted.iter().all(|&l| l == winner || counted.iter().filter(|&&m| m == l).count() < votes);
            let mut shuffled = labels.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            if strict {
                prop_assert_eq!(vote_word_label(&shuffled), winner);
            }
            if counted.is_empty() {
                prop_assert_eq!(winner, O);
            } else {
                // The winner has the maximal count, and among ties appears first.
                let first_max = counted.iter().copied().find(|&l| counted.iter().filter(|&&m| m == l).count() == votes).unwrap();
                prop_assert_eq!(winner, first_max);
            }
        }
    }
}
