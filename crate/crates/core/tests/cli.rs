use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qe_core::cli::{AUGMENTED_FILE, CHECKPOINT_FILE, CONFIG_DIR_ENV, ENSEMBLE_FILE, PREDICTIONS_FILE, TRAIN_LOG_FILE};
use qe_core::data::{write_qe_dataset, QEPair};
use qe_core::synthetic::{generate, SyntheticConfig};

fn qe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qe")).args(args).env_remove(CONFIG_DIR_ENV).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(n: usize) -> Vec<QEPair> {
    generate(&SyntheticConfig { n_pairs: n, n_words: 30, n_common: 10, min_len: 3, max_len: 6, ..Default::default() }).unwrap().0
}

const TINY: &str = r#"
architecture = "mono"

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16
max_len = 24

[training]
batch_size = 4
peak_lr = 0.001
epochs = 1
eval_every_steps = 4
seed = 5
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        write_qe_dataset(f.path("train.tsv"), &dataset(40)).unwrap();
        fs::write(f.path("run.toml"), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str) -> Output {
        qe(&["train", "--config", s(&self.path("run.toml")), "--train", s(&self.path("train.tsv")), "--output", s(&self.path(out))])
    }
}

fn write_preds(path: &Path, scores: &[(usize, f64)]) {
    let body: String = scores.iter().map(|(i, v)| format!("{i}\t{v}\n")).collect();
    fs::write(path, body).unwrap();
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = Fixture::new();
    let o = f.train("run1");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("run1").join(CHECKPOINT_FILE).exists());
    let log = fs::read_to_string(f.path("run1").join(TRAIN_LOG_FILE)).unwrap();
    assert!(log.lines().count() > 1);
    assert!(stdout(&o).contains("best_eval_loss="));

    let again = f.train("run2");
    assert_eq!(code(&again), 0);
    assert_eq!(
        fs::read(f.path("run1").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(f.path("run2").join(CHECKPOINT_FILE)).unwrap()
    );
    // Nothing lands outside the output directories.
    let mut names: Vec<String> = fs::read_dir(f.dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["run.toml", "run1", "run2", "train.tsv"]);
}

#[test]
fn train_error_exit_codes() {
    let f = Fixture::new();
    let o = qe(&["train", "--config", s(&f.path("run.toml")), "--train", s(&f.path("missing.tsv")), "--output", s(&f.path("o"))]);
    assert_eq!(code(&o), 3);
    assert!(!o.stderr.is_empty());

    fs::write(f.path("bad.toml"), TINY.replace("batch_size = 4", "batch_size = 0")).unwrap();
    let o = qe(&["train", "--config", s(&f.path("bad.toml")), "--train", s(&f.path("train.tsv")), "--output", s(&f.path("o"))]);
    assert_eq!(code(&o), 2);

    fs::write(f.path("typo.toml"), "[training]\nbatchsize = 4\n").unwrap();
    let o = qe(&["train", "--config", s(&f.path("typo.toml")), "--train", s(&f.path("train.tsv"))]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&qe(&["frobnicate"])), 2);
    assert_eq!(code(&qe(&["train", "--seed", "notanumber"])), 2);
}

#[test]
fn predict_scores_every_row_in_order() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("m")), 0);
    let ckpt = f.path("m").join(CHECKPOINT_FILE);

    let test: Vec<QEPair> = dataset(1000);
    let body: String = std::iter::once("index\toriginal\ttranslation\n".to_string())
        .chain(test.iter().map(|p| format!("{}\t{}\t{}\n", p.index, p.original, p.translation)))
        .collect();
    fs::write(f.path("test.tsv"), body).unwrap();
    let o = qe(&["predict", "--checkpoint", s(&ckpt), "--input", s(&f.path("test.tsv")), "--output", s(&f.path("p"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = fs::read_to_string(f.path("p").join(PREDICTIONS_FILE)).unwrap();
    let idx: Vec<usize> = out.lines().map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(idx, (0..1000).collect::<Vec<_>>());

    fs::write(f.path("empty.tsv"), "").unwrap();
    let o = qe(&["predict", "--checkpoint", s(&ckpt), "--input", s(&f.path("empty.tsv")), "--output", s(&f.path("e"))]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(f.path("e").join(PREDICTIONS_FILE)).unwrap().len(), 0);

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(f.path("corrupt.qef"), &bytes).unwrap();
    let o = qe(&["predict", "--checkpoint", s(&f.path("corrupt.qef")), "--input", s(&f.path("test.tsv")), "--output", s(&f.path("c"))]);
    assert_eq!(code(&o), 2);

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    fs::write(f.path("future.qef"), &bytes).unwrap();
    let o = qe(&["predict", "--checkpoint", s(&f.path("future.qef")), "--input", s(&f.path("test.tsv")), "--output", s(&f.path("c"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_reports_metrics() {
    let f = Fixture::new();
    let gold = dataset(40);
    let gold_path = f.path("train.tsv");
    let exact: Vec<(usize, f64)> = gold.iter().map(|p| (p.index, p.z_score)).collect();
    write_preds(&f.path("exact.tsv"), &exact);
    let o = qe(&["evaluate", "--predictions", s(&f.path("exact.tsv")), "--gold", s(&gold_path)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "pearson_r=1"), "{out}");
    assert!(out.lines().any(|l| l == "n=40"));

    // Reverse the value order: highest gold gets the lowest prediction.
    let mut by_gold: Vec<&QEPair> = gold.iter().collect();
    by_gold.sort_by(|a, b| a.z_score.total_cmp(&b.z_score));
    let mut sorted_z: Vec<f64> = by_gold.iter().map(|p| p.z_score).collect();
    sorted_z.reverse();
    let reversed: Vec<(usize, f64)> = by_gold.iter().zip(&sorted_z).map(|(p, &z)| (p.index, z)).collect();
    write_preds(&f.path("rev.tsv"), &reversed);
    let o = qe(&["evaluate", "--predictions", s(&f.path("rev.tsv")), "--gold", s(&gold_path)]);
    let r: f64 = stdout(&o).lines().find_map(|l| l.strip_prefix("pearson_r=")).unwrap().parse().unwrap();
    assert!(r < -0.9, "{r}");

    write_preds(&f.path("shifted.tsv"), &exact.iter().map(|&(i, v)| (i + 1, v)).collect::<Vec<_>>());
    let o = qe(&["evaluate", "--predictions", s(&f.path("shifted.tsv")), "--gold", s(&gold_path)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn ensemble_and_augment() {
    let f = Fixture::new();
    write_preds(&f.path("a.tsv"), &[(0, 0.5), (1, 1.0)]);
    write_preds(&f.path("b.tsv"), &[(0, 0.0), (1, 2.0)]);
    let o = qe(&["ensemble", "--preds-a", s(&f.path("a.tsv")), "--preds-b", s(&f.path("b.tsv")), "--output", s(&f.path("ens"))]);
    assert_eq!(code(&o), 0);
    let got = qe_core::eval::read_predictions(f.path("ens").join(ENSEMBLE_FILE)).unwrap();
    assert!((got[0].score - 0.4).abs() < 1e-15 && (got[1].score - 1.2).abs() < 1e-15);

    let corpus: String = (0..2500).map(|i| format!("src {i}\ttgt {i}\n")).collect();
    fs::write(f.path("parallel.tsv"), corpus).unwrap();
    let o = qe(&[
        "augment",
        "--train",
        s(&f.path("train.tsv")),
        "--parallel",
        s(&f.path("parallel.tsv")),
        "--n",
        "2000",
        "--output",
        s(&f.path("aug")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(f.path("aug").join(AUGMENTED_FILE)).unwrap().lines().count();
    assert_eq!(rows, 1 + 40 + 2000);

    let o = qe(&["augment", "--train", s(&f.path("train.tsv")), "--parallel", s(&f.path("parallel.tsv")), "--n", "3000", "--output", s(&f.path("aug"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn selftest_passes() {
    let o = qe(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn config_directory_from_environment() {
    let f = Fixture::new();
    let o = Command::new(env!("CARGO_BIN_EXE_qe"))
        .args(["train", "--config", "run.toml", "--train", s(&f.path("train.tsv")), "--output", s(&f.path("env"))])
        .env(CONFIG_DIR_ENV, f.dir.path())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(f.path("env").join(CHECKPOINT_FILE).exists());
}
