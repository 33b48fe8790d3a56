//! Reduced-size diagnostics run by the `selfcheck` command: CRF against
//! brute-force enumeration, full-model gradients against central
//! differences, and serialization and data round trips.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{central_difference_resolution, check_gradients_floored, evaluate, worst_error, Tensor};
use crate::corpus::{build_tagged_sentence, words_to_iob, EntityAnnotation, EntitySet, SubwordVocab};
use crate::crf::{self, CrfParams, FORBIDDEN};
use crate::embedder::{synthetic_embeddings, LayeredEmbeddings};
use crate::encoder::EncoderConfig;
use crate::labels::{EntityType, LanguageInventory};
use crate::model::{batch_loss, Example, Model, ModelConfig, ModelError};
use crate::postprocess::predictions_to_entities;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfcheckOptions {
    /// Adds an error to the analytic transition gradient before comparison,
    /// to confirm the gradient check can fail.
    pub perturb_transition_gradient: bool,
    pub seed: u64,
}

fn every_path(len: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(len as u32))
        .map(|mut code| {
            let mut p = vec![0; len];
            for slot in p.iter_mut().rev() {
                *slot = code % k;
                code /= k;
            }
            p
        })
        .collect()
}

fn enumerated_score(e: &Tensor, trans: &Tensor, y: &[usize]) -> f64 {
    let k = e.cols();
    let mut s = trans.at(k, y[0]) + trans.at(y[y.len() - 1], k + 1);
    for t in 0..y.len() {
        s += e.at(t, y[t]);
        if t > 0 {
            s += trans.at(y[t - 1], y[t]);
        }
    }
    s
}

fn random_crf(rng: &mut ChaCha8Rng, len: usize, k: usize, integer: bool) -> (Tensor, CrfParams) {
    let draw = |rng: &mut ChaCha8Rng| if integer { rng.gen_range(-1i32..=1) as f64 } else { rng.gen_range(-2.0..2.0) };
    let e = Tensor::matrix(len, k, (0..len * k).map(|_| draw(rng)).collect()).expect("shape");
    let mut params = CrfParams::new(k);
    for i in 0..k + 2 {
        for j in 0..k + 2 {
            if params.transitions.at(i, j) != FORBIDDEN {
                params.transitions.set(i, j, draw(rng));
            }
        }
    }
    (e, params)
}

/// Compares log-partition, Viterbi and n-best against enumeration on
/// `cases` random instances. Returns the first discrepancy.
pub fn crf_oracle(cases: usize, max_len: usize, max_k: usize, n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let len = rng.gen_range(1..=max_len);
        let k = rng.gen_range(1..=max_k);
        let padded = len + rng.gen_range(0..=1);
        let (e_active, params) = random_crf(&mut rng, len, k, case % 2 == 1);
        let mut data = e_active.data().to_vec();
        data.resize(padded * k, 7.0);
        let e = Tensor::matrix(padded, k, data).expect("shape");
        let mask: Vec<bool> = (0..padded).map(|t| t < len).collect();

        let mut ranked: Vec<(Vec<usize>, f64)> = every_path(len, k)
            .into_iter()
            .map(|p| {
                let s = enumerated_score(&e_active, &params.transitions, &p);
                (p, s)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let max = ranked[0].1;
        let log_z = max + ranked.iter().map(|(_, s)| (s - max).exp()).sum::<f64>().ln();

        let got = crf::log_partition(&e, &mask, &params).map_err(|e| e.to_string())?;
        if (got - log_z).abs() > 1e-9 {
            return Err(format!("case {case}: log Z {got} vs enumeration {log_z}"));
        }
        let best = crf::viterbi(&e, &mask, &params).map_err(|e| e.to_string())?;
        if best.labels != ranked[0].0 || (best.score - ranked[0].1).abs() > 1e-9 {
            return Err(format!("case {case}: viterbi {:?} vs enumeration {:?}", best.labels, ranked[0].0));
        }
        let list = crf::nbest(&e, &mask, &params, n).map_err(|e| e.to_string())?;
        let want = &ranked[..n.min(ranked.len())];
        if list.len() != want.len() {
            return Err(format!("case {case}: {} paths, expected {}", list.len(), want.len()));
        }
        for (r, (got, (path, score))) in list.iter().zip(want).enumerate() {
            if &got.labels != path || (got.score - score).abs() > 1e-9 {
                return Err(format!("case {case}: rank {r} is {:?}, expected {path:?}", got.labels));
            }
        }
    }
    Ok(())
}

fn gradient_fixture() -> (Model, Vec<(LayeredEmbeddings, Vec<bool>, Vec<usize>, usize)>) {
    let encoder = EncoderConfig {
        input_dim: 6,
        lstm_hidden: 4,
        attn_heads: 2,
        key_dim: 3,
        value_dim: 3,
        labels: 14,
        dropout: 0.1,
        residual: false,
    };
    let mut model = Model::init(ModelConfig::new(encoder, 2, LanguageInventory::default(), true), 21).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (name, t) in model.params.iter_mut() {
        if name == "crf.transitions" {
            for v in t.data_mut().iter_mut().filter(|v| **v != FORBIDDEN) {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let samples = vec![
        (["[CLS]", "Wa", "##rs", "za", "[PAD]"], vec![true, true, true, true, false], vec![12, 3, 11, 0, 13], 2),
        (["[CLS]", "Pr", "##a", "ha", "je"], vec![true; 5], vec![12, 5, 11, 6, 0], 1),
    ]
    .into_iter()
    .map(|(tokens, mask, labels, lang)| (synthetic_embeddings(&tokens, 2, 6, 23), mask, labels, lang))
    .collect();
    (model, samples)
}

/// Worst relative error of the full joint-loss gradient, with entries below
/// the central-difference resolution held to an absolute bound.
pub fn gradient_check(perturb: bool) -> Result<(f64, String), String> {
    let (model, samples) = gradient_fixture();
    let examples: Vec<Example<'_>> = samples
        .iter()
        .map(|(emb, mask, labels, language)| Example {
            embeddings: emb,
            mask,
            labels,
            language: *language,
        })
        .collect();
    let names = model.parameter_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let eps = 1e-4;
    let build = |g: &mut crate::autodiff::Graph<'_>| {
        batch_loss(g, &model.config, &examples).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => crate::autodiff::AutodiffError::Shape {
                node: 0,
                op: "batch_loss",
                detail: other.to_string(),
            },
        })
    };
    let f = evaluate(&model.params, build).map_err(|e| e.to_string())?.item().unwrap_or(0.0);
    let floor = 8.0 * central_difference_resolution(f, eps) / 1e-4;
    let report = check_gradients_floored(&model.params, &wrt, eps, floor, build, |name, grad| {
        if perturb && name == "crf.transitions" {
            grad.data_mut()[0] += 1e-3;
        }
    })
    .map_err(|e| e.to_string())?;
    let worst = worst_error(&report);
    let (name, entry) = report
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("parameters");
    Ok((worst, format!("worst {worst:.2e} at {name}[{}]", entry.worst_index)))
}

/// Random non-overlapping annotations over random text. Entity words are
/// capitalized and never reused, so every annotation occurs exactly where it
/// was placed.
pub fn random_annotated_words(rng: &mut ChaCha8Rng) -> (Vec<String>, EntitySet) {
    let letters: Vec<char> = "abcdefghijklmnop".chars().collect();
    let word = |rng: &mut ChaCha8Rng, cap: bool, serial: usize| {
        let n = rng.gen_range(1..=5);
        let mut w: String = (0..n).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
        if cap {
            // A serial suffix keeps entity words unique.
            w = format!("Q{w}{}", to_letters(serial));
        }
        w
    };
    let mut words = Vec::new();
    let mut set = EntitySet::new();
    let mut serial = 0;
    let target = rng.gen_range(1..=14);
    while words.len() < target {
        if rng.gen_bool(0.35) {
            let len = rng.gen_range(1..=3);
            let etype = EntityType::ALL[rng.gen_range(0..EntityType::ALL.len())];
            let parts: Vec<String> = (0..len)
                .map(|_| {
                    serial += 1;
                    word(rng, true, serial)
                })
                .collect();
            set.insert(EntityAnnotation::new(parts.join(" "), etype));
            words.extend(parts);
        } else {
            words.push(word(rng, false, 0));
        }
    }
    (words, set)
}

fn to_letters(mut n: usize) -> String {
    let mut s = String::new();
    loop {
        s.push((b'q' + (n % 10) as u8) as char);
        n /= 10;
        if n == 0 {
            return s;
        }
    }
}

/// Vocabulary of single letters, `##` letters and a few longer pieces.
pub fn round_trip_vocab() -> SubwordVocab {
    let mut tokens = vec!["[UNK]".to_string(), "[CLS]".to_string()];
    for c in "abcdefghijklmnopqrstuvwxyzQ".chars() {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    for piece in ["ab", "##cd", "Qa", "##ef", "ghi"] {
        tokens.push(piece.to_string());
    }
    SubwordVocab::new(tokens, "[UNK]").expect("specials present")
}

/// spans -> IOB -> subwords -> gold path -> voting -> spans on one case.
pub fn data_round_trip_case(rng: &mut ChaCha8Rng, vocab: &SubwordVocab) -> Result<(), String> {
    let (words, set) = random_annotated_words(rng);
    let conv = words_to_iob(&words, &set);
    if !conv.unmatched.is_empty() {
        return Err(format!("unmatched {:?}", conv.unmatched));
    }
    let built = build_tagged_sentence(&words, &conv.labels, vocab, 512, "pl").map_err(|e| e.to_string())?;
    if built.truncated_words > 0 {
        return Err("sentence truncated".into());
    }
    let path = built.sentence.label_indices();
    let back = predictions_to_entities(&built.sentence, &path).map_err(|e| e.to_string())?;
    let mut a: Vec<_> = set.iter().collect();
    let mut b: Vec<_> = back.iter().collect();
    a.sort();
    b.sort();
    if a != b {
        return Err(format!("{words:?}: {a:?} became {b:?}"));
    }
    Ok(())
}

fn checkpoint_round_trip(seed: u64) -> Result<(), String> {
    let (mut model, samples) = gradient_fixture();
    model.meta.insert("check".into(), seed.to_string());
    let bytes = model.to_bytes();
    let back = Model::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back.to_bytes() != bytes {
        return Err("save -> load -> save changed bytes".into());
    }
    let (emb, mask, _, _) = &samples[0];
    let before = model.predict(emb, mask, 3).map_err(|e| e.to_string())?;
    let after = back.predict(emb, mask, 3).map_err(|e| e.to_string())?;
    if before != after {
        return Err("prediction changed after reload".into());
    }
    let mut tampered = bytes.clone();
    let mid = tampered.len() / 2;
    tampered[mid] ^= 0x40;
    if Model::from_bytes(&tampered).is_ok() {
        return Err("tampered checkpoint loaded".into());
    }
    Ok(())
}

fn embedding_round_trip(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
    let values: Vec<f32> = (0..3 * 5 * 4).map(|_| rng.gen_range(-4.0f32..4.0)).collect();
    let emb = LayeredEmbeddings::new(3, 4, tokens, values).map_err(|e| e.to_string())?;
    let bytes = emb.to_bytes();
    let back = LayeredEmbeddings::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back != emb {
        return Err("LEMB round trip changed values".into());
    }
    let mut bad = bytes;
    let last = bad.len() - 1;
    bad[last] ^= 1;
    if LayeredEmbeddings::from_bytes(&bad).is_ok() {
        return Err("corrupted LEMB loaded".into());
    }
    Ok(())
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run(options: SelfcheckOptions) -> Vec<CheckResult> {
    let seed = options.seed;
    vec![
        timed("crf_enumeration", || {
            crf_oracle(60, 5, 4, 11, seed).map(|_| "60 instances, T<=5, K<=4, n=11".into())
        }),
        timed("gradients", || {
            let (worst, detail) = gradient_check(options.perturb_transition_gradient)?;
            if worst <= 1e-4 {
                Ok(detail)
            } else {
                Err(detail)
            }
        }),
        timed("data_round_trip", || {
            let vocab = round_trip_vocab();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for case in 0..100 {
                data_round_trip_case(&mut rng, &vocab).map_err(|e| format!("case {case}: {e}"))?;
            }
            Ok("100 random annotation sets".into())
        }),
        timed("checkpoint_round_trip", || checkpoint_round_trip(seed).map(|_| "byte-identical".into())),
        timed("embedding_round_trip", || embedding_round_trip(seed).map(|_| "bit-identical".into())),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let results = run(SelfcheckOptions::default());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn perturbed_gradient_is_caught() {
        let (worst, _) = gradient_check(true).unwrap();
        assert!(worst > 1e-4);
    }

    #[test]
    fn enumeration_helper_counts_paths() {
        let paths = every_path(3, 2);
        assert_eq!(paths.len(), 8);
        assert_eq!(paths[1], [0, 0, 1]);
        assert_eq!(paths[6], [1, 1, 0]);
    }
}
