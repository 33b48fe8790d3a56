use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slavtag::corpus::{load_annotations, EntitySet};
use slavtag::dataset::{read_cache, write_cache};
use slavtag::labels::{Label, LabelInventory};
use slavtag::postprocess::vote_word_label;

const BIN: &str = env!("CARGO_BIN_EXE_slavtag");

fn run<S: AsRef<str>>(args: &[S]) -> Output {
    run_env(args, &[])
}

fn run_env<S: AsRef<str>>(args: &[S], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args.iter().map(|a| a.as_ref())).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok<S: AsRef<str>>(args: &[S]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated corpus of one document per language, prepared into `<dir>/cache`.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(sentences: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&[
            "synth",
            "--out",
            s(&f.corpus()),
            "--vocab",
            s(&f.vocab()),
            "--docs-per-language",
            "1",
            "--sentences-per-doc",
            &sentences.to_string(),
        ]);
        f.prepare(&f.cache());
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> PathBuf {
        self.path("corpus")
    }

    fn vocab(&self) -> PathBuf {
        self.path("vocab.txt")
    }

    fn cache(&self) -> PathBuf {
        self.path("cache")
    }

    fn prepare(&self, out: &Path) -> String {
        ok(&[
            "prepare",
            "--corpus",
            s(&self.corpus()),
            "--vocab",
            s(&self.vocab()),
            "--out",
            s(out),
            "--max-len",
            "32",
        ])
    }

    /// Small-model training arguments; a flag in `extra` other than `--set`
    /// replaces the default one.
    fn train_args(&self, out: &Path, extra: &[&str]) -> Vec<String> {
        let cache = self.cache();
        let cache = s(&cache);
        let mut args: Vec<String> = vec!["train".into()];
        for pair in [
            ["--train", cache],
            ["--dev", cache],
            ["--out", s(out)],
            ["--train-topics", "brexit"],
            ["--dev-topics", "brexit"],
            ["--synthetic-embeddings", "1,2,8"],
        ] {
            if !extra.contains(&pair[0]) {
                args.extend(pair.map(String::from));
            }
        }
        args.extend(
            [
            "--set",
            "encoder.lstm_hidden=8",
            "--set",
            "encoder.attn_heads=2",
            "--set",
            "encoder.key_dim=4",
            "--set",
            "encoder.value_dim=4",
            "--set",
            "train.batch_size=2",
            "--set",
            "train.max_epochs=2",
        ]
            .map(String::from),
        );
        args.extend(extra.iter().map(|a| a.to_string()));
        args
    }

    fn train(&self, out: &Path, extra: &[&str]) -> String {
        ok(&self.train_args(out, extra))
    }
}

fn history_rows(dir: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join("history.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn ann_files(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|e| e == "ann"))
        .collect();
    out.sort();
    out
}

fn write_tree(root: &Path, files: &[(&str, &str)]) {
    for (rel, body) in files {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, body).unwrap();
    }
}

#[test]
fn prepare_counts_documents_and_is_reproducible() {
    let f = Fixture::new(2);
    let cache = read_cache(&f.cache()).unwrap();
    assert_eq!(cache.documents.len(), 4);
    assert_eq!(fs::read_to_string(f.cache().join("warnings.txt")).unwrap(), "");
    let first = fs::read(f.cache().join("sentences.jsonl")).unwrap();
    let again = f.path("again");
    let out = f.prepare(&again);
    assert!(out.contains("warnings: 0"), "{out}");
    assert_eq!(fs::read(again.join("sentences.jsonl")).unwrap(), first);
    assert_eq!(
        fs::read(again.join("cache.meta")).unwrap(),
        fs::read(f.cache().join("cache.meta")).unwrap()
    );
}

#[test]
fn prepare_warns_about_unlocatable_annotations() {
    let f = Fixture::new(1);
    let ann = f.corpus().join("brexit/pl/ann/b000.ann");
    let mut body = fs::read_to_string(&ann).unwrap();
    body.push_str("Nieistniejący Byt\tORG\n");
    fs::write(&ann, body).unwrap();
    let out = f.prepare(&f.path("warned"));
    assert!(out.contains("warnings: 1"), "{out}");
    let warnings = fs::read_to_string(f.path("warned/warnings.txt")).unwrap();
    assert_eq!(warnings.lines().count(), 1);
    assert!(warnings.starts_with("UNMATCHED\tbrexit/pl/b000\tNieistniejący Byt\tORG"), "{warnings}");
}

#[test]
fn train_writes_history_config_and_reproducible_checkpoints() {
    let f = Fixture::new(1);
    let (a, b) = (f.path("run_a"), f.path("run_b"));
    f.train(&a, &[]);
    f.train(&b, &[]);
    assert_eq!(history_rows(&a).len(), 2);
    assert_eq!(fs::read(a.join("best.stck")).unwrap(), fs::read(b.join("best.stck")).unwrap());
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    let effective = fs::read_to_string(a.join("config.effective")).unwrap();
    assert!(effective.contains("encoder.lstm_hidden = 8"), "{effective}");
    assert!(effective.contains("train.max_epochs = 2"), "{effective}");
    assert!(effective.contains("data.train_topics = brexit"), "{effective}");

    let c = f.path("run_c");
    f.train(&c, &["--seed", "9"]);
    assert_ne!(fs::read(a.join("best.stck")).unwrap(), fs::read(c.join("best.stck")).unwrap());
}

#[test]
fn train_without_language_head_has_zero_classifier_loss() {
    let f = Fixture::new(1);
    let out = f.path("run");
    f.train(&out, &["--no-lang-clf"]);
    for row in history_rows(&out) {
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0, "{row:?}");
        assert_eq!(row[1], row[2]);
    }
    let with = f.path("with");
    f.train(&with, &[]);
    assert!(history_rows(&with).iter().all(|r| r[3].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn train_continues_from_best_checkpoint() {
    let f = Fixture::new(1);
    let out = f.path("run");
    f.train(&out, &[]);
    let before = fs::read(out.join("best.stck")).unwrap();
    f.train(&out, &["--continue"]);
    assert_ne!(fs::read(out.join("best.stck")).unwrap(), before);

    let changed = run(&f.train_args(&out, &["--continue", "--set", "encoder.lstm_hidden=6"]));
    assert_eq!(code(&changed), 1, "{}", String::from_utf8_lossy(&changed.stderr));
    let both = run(&f.train_args(&out, &["--continue", "--from-scratch"]));
    assert_eq!(code(&both), 1);
}

#[test]
fn train_rejects_bad_configuration() {
    let f = Fixture::new(1);
    let out = f.path("run");
    let bad = run(&f.train_args(&out, &["--set", "train.base_lr=-1"]));
    assert_eq!(code(&bad), 1);
    let unknown = run(&f.train_args(&out, &["--set", "nonsense.key=1"]));
    assert_eq!(code(&unknown), 1);
    let topics = run(&f.train_args(&out, &["--train-topics", "elsewhere"]));
    assert_eq!(code(&topics), 2);
}

#[test]
fn predict_writes_consistent_outputs() {
    let f = Fixture::new(2);
    let model = f.path("run");
    f.train(&model, &[]);
    let pred = f.path("pred");
    ok(&[
        "predict",
        "--model",
        s(&model.join("best.stck")),
        "--input",
        s(&f.cache()),
        "--out",
        s(&pred),
        "--nbest",
        "3",
        "--emit-lang",
    ]);
    let cache = read_cache(&f.cache()).unwrap();
    let names = LabelInventory::default().names();
    for doc in &cache.documents {
        let base = pred.join(&doc.key.topic).join(&doc.key.language).join(&doc.key.id);
        let iob = fs::read_to_string(base.with_extension("iob")).unwrap();
        let nbest = fs::read_to_string(base.with_extension("nbest")).unwrap();
        let lang = fs::read_to_string(base.with_extension("lang")).unwrap();
        assert!(base.with_extension("ann").is_file());
        assert_eq!(lang.lines().count(), doc.sentences.len());
        let blocks: Vec<&str> = nbest.split("\n\n").filter(|b| !b.is_empty()).collect();
        let iob_blocks: Vec<&str> = iob.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
        assert_eq!(blocks.len(), doc.sentences.len());
        for ((block, sentence), iob_block) in blocks.iter().zip(&doc.sentences).zip(&iob_blocks) {
            let lines: Vec<&str> = block.lines().collect();
            assert!(!lines.is_empty() && lines.len() <= 3);
            let scores: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
            assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
            // Each word's label is the vote over its pieces on the best path.
            let best: Vec<&str> = lines[0].split('\t').nth(2).unwrap().split(' ').collect();
            assert_eq!(best.len(), sentence.active_len());
            let words: Vec<&str> = iob_block.lines().map(|l| l.split('\t').nth(1).unwrap()).collect();
            assert_eq!(words.len(), sentence.words.len());
            let best: Vec<Label> = best
                .iter()
                .map(|n| Label::from_index(names.iter().position(|m| m == n).unwrap()).unwrap())
                .collect();
            for (w, label) in words.iter().enumerate() {
                let (start, end) = sentence.alignment[w];
                assert_eq!(names[vote_word_label(&best[start..end]).index()], *label, "word {w} of {}", doc.key);
            }
        }
    }
}

#[test]
fn predict_handles_empty_documents() {
    let f = Fixture::new(1);
    let model = f.path("run");
    f.train(&model, &[]);
    let mut cache = read_cache(&f.cache()).unwrap();
    for d in &mut cache.documents {
        d.sentences.clear();
        d.gold.clear();
    }
    let empty = f.path("empty");
    write_cache(&empty, &cache.documents, &cache.meta).unwrap();
    let pred = f.path("pred");
    ok(&["predict", "--model", s(&model.join("best.stck")), "--input", s(&empty), "--out", s(&pred)]);
    let anns = ann_files(&pred);
    assert_eq!(anns.len(), 4);
    for a in anns {
        assert_eq!(fs::read_to_string(a).unwrap(), "");
    }
}

#[test]
fn predict_rejects_mismatched_vocabulary_and_options() {
    let f = Fixture::new(1);
    let model = f.path("run");
    f.train(&model, &["--no-lang-clf"]);
    let ckpt = model.join("best.stck");
    let mut vocab = fs::read_to_string(f.vocab()).unwrap();
    vocab.push_str("zzextra\n");
    let other_vocab = f.path("other_vocab.txt");
    fs::write(&other_vocab, vocab).unwrap();
    let other = f.path("other");
    ok(&["prepare", "--corpus", s(&f.corpus()), "--vocab", s(&other_vocab), "--out", s(&other)]);
    let pred = f.path("pred");
    let mismatch = run(&["predict", "--model", s(&ckpt), "--input", s(&other), "--out", s(&pred)]);
    assert_eq!(code(&mismatch), 2, "{}", String::from_utf8_lossy(&mismatch.stderr));

    let lang = run(&["predict", "--model", s(&ckpt), "--input", s(&f.cache()), "--out", s(&pred), "--emit-lang"]);
    assert_eq!(code(&lang), 1);
    let zero = run(&["predict", "--model", s(&ckpt), "--input", s(&f.cache()), "--out", s(&pred), "--nbest", "0"]);
    assert_eq!(code(&zero), 1);
    let shape = run(&[
        "predict",
        "--model",
        s(&ckpt),
        "--input",
        s(&f.cache()),
        "--out",
        s(&pred),
        "--synthetic-embeddings",
        "1,3,8",
    ]);
    assert_eq!(code(&shape), 2);
}

#[test]
fn overfit_model_reproduces_training_annotations() {
    let f = Fixture::new(1);
    let model = f.path("run");
    f.train(
        &model,
        &[
            "--seed",
            "5",
            "--synthetic-embeddings",
            "1,3,8",
            "--set",
            "encoder.lstm_hidden=32",
            "--set",
            "encoder.key_dim=8",
            "--set",
            "encoder.value_dim=8",
            "--set",
            "encoder.residual=true",
            "--set",
            "encoder.dropout=0",
            "--set",
            "train.base_lr=1e-2",
            "--set",
            "train.max_epochs=200",
            "--set",
            "train.early_stop_patience=1000",
        ],
    );
    let pred = f.path("pred");
    ok(&["predict", "--model", s(&model.join("best.stck")), "--input", s(&f.cache()), "--out", s(&pred)]);
    let gold = ann_files(&f.corpus());
    let predicted = ann_files(&pred);
    assert_eq!(gold.len(), 4);
    assert_eq!(predicted.len(), 4);
    for (g, p) in gold.iter().zip(&predicted) {
        let g: EntitySet = load_annotations(g).unwrap();
        let p: EntitySet = load_annotations(p).unwrap();
        assert_eq!(p, g);
    }
    let scores = ok(&["eval", "--pred", s(&pred), "--gold", s(&f.cache()), "--mode", "exact"]);
    assert!(scores.contains("1.0000"), "{scores}");
}

/// Three documents: one fully correct, one with a missed location, one with
/// a spurious organization.
fn eval_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let gold = root.join("gold");
    let pred = root.join("pred");
    write_tree(
        &gold,
        &[
            ("brexit/pl/d1.iob", "Jan\tB-PER\nNowak\tI-PER\nmówi\tO\n\n"),
            ("brexit/pl/d1.ann", "Jan Nowak\tPER\n"),
            ("brexit/cs/d2.iob", "v\tO\nPraha\tB-LOC\nCentrum\tI-LOC\n\n"),
            ("brexit/cs/d2.ann", "Praha Centrum\tLOC\n"),
            ("brexit/ru/d3.iob", "Добрый\tO\nдень\tO\n\n"),
            ("brexit/ru/d3.ann", ""),
        ],
    );
    write_tree(
        &pred,
        &[
            ("brexit/pl/d1.iob", "Jan\tB-PER\nNowak\tI-PER\nmówi\tO\n\n"),
            ("brexit/pl/d1.ann", "Jan Nowak\tPER\n"),
            ("brexit/cs/d2.iob", "v\tO\nPraha\tO\nCentrum\tO\n\n"),
            ("brexit/cs/d2.ann", ""),
            ("brexit/ru/d3.iob", "Добрый\tB-ORG\nдень\tO\n\n"),
            ("brexit/ru/d3.ann", ""),
        ],
    );
    (pred, gold)
}

fn all_row(csv: &str) -> Vec<f64> {
    let line = csv.lines().find(|l| l.starts_with("avg/total,")).expect("total row");
    line.split(',').skip(1).take(3).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn eval_scores_the_three_document_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gold) = eval_fixture(dir.path());
    let csv = dir.path().join("word.csv");
    ok(&["eval", "--pred", s(&pred), "--gold", s(&gold), "--mode", "word", "--csv", s(&csv)]);
    let word = all_row(&fs::read_to_string(&csv).unwrap());
    let expect = [2.0 / 3.0, 0.5, 4.0 / 7.0];
    for (got, want) in word.iter().zip(expect) {
        assert!((got - want).abs() < 1e-4, "{word:?}");
    }
    ok(&["eval", "--pred", s(&pred), "--gold", s(&gold), "--mode", "exact", "--csv", s(&csv)]);
    let exact = all_row(&fs::read_to_string(&csv).unwrap());
    for (got, want) in exact.iter().zip([1.0, 0.5, 2.0 / 3.0]) {
        assert!((got - want).abs() < 1e-4, "{exact:?}");
    }
}

#[test]
fn eval_identical_and_disjoint_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, gold) = eval_fixture(dir.path());
    let csv = dir.path().join("out.csv");
    for mode in ["word", "exact", "partial"] {
        ok(&["eval", "--pred", s(&gold), "--gold", s(&gold), "--mode", mode, "--csv", s(&csv)]);
        assert_eq!(all_row(&fs::read_to_string(&csv).unwrap()), [1.0, 1.0, 1.0], "{mode}");
    }
    let disjoint = dir.path().join("disjoint");
    write_tree(
        &disjoint,
        &[
            ("brexit/pl/d1.ann", "Nowak\tORG\n"),
            ("brexit/cs/d2.ann", "Centrum\tPER\n"),
            ("brexit/ru/d3.ann", ""),
        ],
    );
    for mode in ["exact", "partial"] {
        ok(&["eval", "--pred", s(&disjoint), "--gold", s(&gold), "--mode", mode, "--csv", s(&csv)]);
        assert_eq!(all_row(&fs::read_to_string(&csv).unwrap()), [0.0, 0.0, 0.0], "{mode}");
    }
}

#[test]
fn eval_reports_missing_documents() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gold) = eval_fixture(dir.path());
    fs::remove_file(pred.join("brexit/cs/d2.ann")).unwrap();
    let out = run(&["eval", "--pred", s(&pred), "--gold", s(&gold), "--mode", "exact"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prediction: brexit/cs/d2"));
}

#[test]
fn selfcheck_and_exit_codes() {
    let out = run(&["selfcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checks passed"));
    let perturbed = run(&["selfcheck", "--perturb-transition-gradient"]);
    assert_eq!(code(&perturbed), 3);
    assert!(String::from_utf8_lossy(&perturbed.stdout).contains("FAIL"));
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["eval", "--mode", "word"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run_env(&["selfcheck"], &[("SLAVTAG_THREADS", "0")])), 1);
    assert_eq!(code(&run_env(&["selfcheck"], &[("SLAVTAG_THREADS", "1")])), 0);
}
