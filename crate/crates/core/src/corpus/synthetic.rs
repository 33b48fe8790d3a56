//! Generated multilingual corpora for tests and desk-scale experiments.
//!
//! Each language draws words from its own syllable alphabet, so the language
//! of a sentence is recoverable from its tokens. Entity names are capitalized
//! and globally unique, and every name word starts with a syllable reserved
//! for its entity type, so the type is recoverable as well; the vocabulary holds syllables (word-initial and
//! `##` continuation forms) plus a few whole words, so most words split into
//! several pieces.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    format_annotations, io_err, AnnotatedDocument, Document, EntityAnnotation, EntitySet, Result,
    SubwordVocab, CLS_TOKEN, DEFAULT_UNK, PAD_TOKEN,
};
use crate::labels::EntityType;

/// Consonant and vowel sets per language slot; consonants are disjoint.
const ALPHABETS: [(&str, &str); 4] = [
    ("bdgz", "aeo"),
    ("cfhj", "aiu"),
    ("klmw", "eiy"),
    ("nprt", "ouy"),
];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Up to four language tags.
    pub languages: Vec<String>,
    pub topic: String,
    pub docs_per_language: usize,
    pub sentences_per_doc: usize,
    /// Distinct names per entity type and language.
    pub names_per_type: usize,
    pub function_words: usize,
    /// Inclusive range of function words per sentence.
    pub fillers: (usize, usize),
    /// Inclusive range of entity mentions per sentence.
    pub mentions: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 17,
            languages: ["bg", "cs", "pl", "ru"].map(String::from).to_vec(),
            topic: "brexit".into(),
            docs_per_language: 4,
            sentences_per_doc: 5,
            names_per_type: 3,
            function_words: 12,
            fillers: (1, 3),
            mentions: (2, 3),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub documents: Vec<AnnotatedDocument>,
    pub vocab: SubwordVocab,
}

struct Lexicon {
    syllables: Vec<String>,
    function_words: Vec<String>,
    /// `(type, words of the name)`
    names: Vec<(EntityType, Vec<String>)>,
}

fn syllables_for(slot: usize) -> Vec<String> {
    let (cons, vows) = ALPHABETS[slot % ALPHABETS.len()];
    cons.chars()
        .flat_map(|c| vows.chars().map(move |v| format!("{c}{v}")))
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn make_word(rng: &mut ChaCha8Rng, initials: &[String], syllables: &[String], min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    let mut w = initials.choose(rng).unwrap().clone();
    for _ in 1..n {
        w.push_str(syllables.choose(rng).unwrap());
    }
    w
}

/// Word-initial syllables reserved for the entity type at `type_index`.
pub fn type_initials(slot: usize, type_index: usize) -> Vec<String> {
    syllables_for(slot)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % EntityType::ALL.len() == type_index)
        .map(|(_, s)| s)
        .collect()
}

fn build_lexicon(rng: &mut ChaCha8Rng, slot: usize, spec: &SyntheticSpec, used: &mut BTreeSet<String>) -> Lexicon {
    let syllables = syllables_for(slot);
    let mut fresh = |rng: &mut ChaCha8Rng, initials: &[String], min, max, cap: bool| loop {
        let w = make_word(rng, initials, &syllables, min, max);
        let w = if cap { capitalize(&w) } else { w };
        if used.insert(w.clone()) {
            return w;
        }
    };
    let function_words = (0..spec.function_words).map(|_| fresh(rng, &syllables, 1, 2, false)).collect();
    let mut names = Vec::new();
    for (ti, etype) in EntityType::ALL.into_iter().enumerate() {
        let initials = type_initials(slot, ti);
        for k in 0..spec.names_per_type {
            let len = if k % 2 == 1 { 2 } else { 1 };
            let words = (0..len).map(|_| fresh(rng, &initials, 2, 3, true)).collect();
            names.push((etype, words));
        }
    }
    Lexicon {
        syllables,
        function_words,
        names,
    }
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut used = BTreeSet::new();
        let lexicons: Vec<Lexicon> = (0..spec.languages.len())
            .map(|slot| build_lexicon(&mut rng, slot, spec, &mut used))
            .collect();

        let mut documents = Vec::new();
        for (lang, lex) in spec.languages.iter().zip(&lexicons) {
            for d in 0..spec.docs_per_language {
                let mut lines = Vec::new();
                let mut annotations = EntitySet::new();
                // Rotate through the types so every document covers all of them.
                let mut ty_slot = d;
                for _ in 0..spec.sentences_per_doc {
                    let mut words: Vec<String> = (0..rng.gen_range(spec.fillers.0..=spec.fillers.1))
                        .map(|_| lex.function_words.choose(&mut rng).unwrap().clone())
                        .collect();
                    for _ in 0..rng.gen_range(spec.mentions.0..=spec.mentions.1) {
                        let etype = EntityType::ALL[ty_slot % EntityType::ALL.len()];
                        ty_slot += 1;
                        let candidates: Vec<_> = lex.names.iter().filter(|(t, _)| *t == etype).collect();
                        let (etype, name) = candidates.choose(&mut rng).unwrap();
                        let at = rng.gen_range(0..=words.len());
                        let joined = name.join(" ");
                        words.insert(at, joined.clone());
                        annotations.insert(EntityAnnotation::new(joined, *etype));
                    }
                    lines.push(format!("{}.", words.join(" ")));
                }
                documents.push(AnnotatedDocument {
                    doc: Document {
                        id: format!("{}{:03}", spec.topic.chars().next().unwrap_or('d'), d),
                        language: lang.clone(),
                        topic: spec.topic.clone(),
                        text: lines.join("\n") + "\n",
                    },
                    annotations,
                });
            }
        }

        let mut tokens: Vec<String> = vec![
            PAD_TOKEN.to_string(),
            DEFAULT_UNK.to_string(),
            CLS_TOKEN.to_string(),
            ".".to_string(),
        ];
        for lex in &lexicons {
            for syl in &lex.syllables {
                tokens.push(syl.clone());
                tokens.push(capitalize(syl));
                tokens.push(format!("##{syl}"));
            }
            // A few function words are whole vocabulary entries.
            tokens.extend(lex.function_words.iter().step_by(3).cloned());
        }
        let vocab = SubwordVocab::new(tokens, DEFAULT_UNK).expect("specials present");
        SyntheticCorpus { documents, vocab }
    }

    /// Writes `root/<topic>/<lang>/{raw,ann}/<id>.*` and `vocab_path`.
    pub fn write(&self, root: &Path, vocab_path: &Path) -> Result<()> {
        for d in &self.documents {
            let base = root.join(&d.doc.topic).join(&d.doc.language);
            for sub in ["raw", "ann"] {
                let dir = base.join(sub);
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            }
            let raw = base.join("raw").join(format!("{}.txt", d.doc.id));
            std::fs::write(&raw, &d.doc.text).map_err(io_err(&raw))?;
            let ann = base.join("ann").join(format!("{}.ann", d.doc.id));
            std::fs::write(&ann, format_annotations(&d.annotations)).map_err(io_err(&ann))?;
        }
        if let Some(parent) = vocab_path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(vocab_path, self.vocab.to_text()).map_err(io_err(vocab_path))?;
        Ok(())
    }
}
