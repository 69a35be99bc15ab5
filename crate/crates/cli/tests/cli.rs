//! Drives the `dephsic` binary as a subprocess.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dephsic::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use dephsic::dataset_io::{read_dataset, write_dataset};
use dephsic::skeleton::Dataset;
use dephsic::training::{evaluate, TrainConfig};
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[data]
num_joints = 5
num_frames = 6
train_per_class = 12
test_per_class = 6
[train]
epochs = 2
warmup_epochs = 1
batch_size = 16
base_channels = [8]
aux_channels = [4]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dephsic"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn single_line_failure(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    err
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        let f = Self { dir };
        ok(&[
            "generate",
            "--config",
            &f.s("small.toml"),
            "--out",
            &f.s("data"),
        ]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).display().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let mut args = vec![
            "train".to_string(),
            "--config".into(),
            self.s("small.toml"),
            "--train".into(),
            self.s("data/train.dataset"),
            "--test".into(),
            self.s("data/test.dataset"),
            "--out".into(),
            self.s(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let idx = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().to_string())
        .collect()
}

#[test]
fn generate_is_seed_deterministic() {
    let f = Fixture::new();
    ok(&[
        "generate",
        "--config",
        &f.s("small.toml"),
        "--out",
        &f.s("again"),
    ]);
    assert_eq!(
        read(&f.p("data/train.dataset")),
        read(&f.p("again/train.dataset"))
    );
    ok(&[
        "generate",
        "--config",
        &f.s("small.toml"),
        "--seed",
        "4",
        "--out",
        &f.s("other"),
    ]);
    assert_ne!(
        read(&f.p("data/train.dataset")),
        read(&f.p("other/train.dataset"))
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&read(&f.p("other/manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 4);
}

#[test]
fn bad_dimensions_and_unknown_flags_are_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x").display().to_string();
    single_line_failure(&["generate", "--joints", "0", "--out", &out]);
    let err = single_line_failure(&["generate", "--nonsense", "--out", &out]);
    assert!(err.contains("--nonsense"));
    fs::write(dir.path().join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    let cfg = dir.path().join("bad.toml").display().to_string();
    let err = single_line_failure(&["generate", "--config", &cfg, "--out", &out]);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn default_config_echo() {
    let f = Fixture::new();
    f.train("run", &[]);
    let m: serde_json::Value = serde_json::from_str(&read(&f.p("run/manifest.json"))).unwrap();
    let defaults = TrainConfig::default();
    assert_eq!(m["config"]["train"]["base_lr"], defaults.base_lr);
    assert_eq!(m["config"]["train"]["temperature"], 1.0);
    assert_eq!(m["config"]["train"]["hsic_sign"], -1);
    assert_eq!(m["config"]["train"]["momentum"], 0.9);
    // file value wins over the default, flag wins over the file
    assert_eq!(m["config"]["train"]["batch_size"], 16);
    f.train(
        "run2",
        &["--batch-size", "8", "--hsic-sign", "+1", "--delta", "9"],
    );
    let m: serde_json::Value = serde_json::from_str(&read(&f.p("run2/manifest.json"))).unwrap();
    assert_eq!(m["config"]["train"]["batch_size"], 8);
    assert_eq!(m["config"]["train"]["hsic_sign"], 1);
    assert_eq!(m["config"]["train"]["delta"], 9.0);
}

#[test]
fn ablation_flags_zero_the_disabled_terms() {
    let f = Fixture::new();
    f.train("plain", &["--no-hsic", "--no-distill"]);
    let metrics = read(&f.p("plain/metrics.csv"));
    for col in ["hsic", "l_d"] {
        assert!(csv_column(&metrics, col).iter().all(|v| v == "0"), "{col}");
    }
    // epoch rows are sample-weighted means of per-batch values, so the sum
    // identity holds only up to rounding
    for l in metrics.lines().skip(1) {
        let v: Vec<f64> = l.split(',').take(6).map(|x| x.parse().unwrap()).collect();
        assert!((v[5] - (v[1] + v[3])).abs() <= 1e-12 * v[5].abs());
    }
}

#[test]
fn training_twice_gives_identical_metrics() {
    let f = Fixture::new();
    f.train("a", &[]);
    f.train("b", &[]);
    let strip = |p: &str| -> Vec<String> {
        read(&f.p(p))
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip("a/metrics.csv"), strip("b/metrics.csv"));
    assert_eq!(
        read(&f.p("a/checkpoint.txt")),
        read(&f.p("b/checkpoint.txt"))
    );
    assert_eq!(
        read(&f.p("a/predictions.csv")),
        read(&f.p("b/predictions.csv"))
    );
}

#[test]
fn missing_inputs_fail_cleanly() {
    let f = Fixture::new();
    let err = single_line_failure(&["train", "--train", &f.s("nope.dataset"), "--out", &f.s("x")]);
    assert!(err.contains("nope.dataset"));
    let err = single_line_failure(&["train", "--out", &f.s("x")]);
    assert!(err.contains("--train"));
}

#[test]
fn eval_report_matches_library() {
    let f = Fixture::new();
    f.train("run", &[]);
    ok(&[
        "eval",
        "--checkpoint",
        &f.s("run/checkpoint.txt"),
        "--data",
        &f.s("data/test.dataset"),
        "--out",
        &f.s("ev"),
    ]);
    let model = read_checkpoint(&read(&f.p("run/checkpoint.txt")))
        .unwrap()
        .model;
    let data = read_dataset(&read(&f.p("data/test.dataset"))).unwrap();
    let oracle = evaluate(&model, &data).unwrap();

    let per_class = read(&f.p("ev/per_class.csv"));
    let counts = csv_column(&per_class, "count");
    let correct = csv_column(&per_class, "correct");
    for c in 0..data.num_classes {
        let n = oracle.labels.iter().filter(|&&l| l == c).count();
        let hit = oracle
            .labels
            .iter()
            .zip(&oracle.predictions)
            .filter(|&(&l, &p)| l == c && p == c)
            .count();
        assert_eq!(counts[c], n.to_string());
        assert_eq!(correct[c], hit.to_string());
    }
    let report = read(&f.p("ev/report.csv"));
    assert_eq!(
        csv_column(&report, "accuracy")[0],
        oracle.accuracy.to_string()
    );

    // a single prediction file fuses to the same accuracy
    ok(&[
        "ensemble",
        "--predictions",
        &f.s("ev/predictions.csv"),
        "--out",
        &f.s("ens"),
    ]);
    let ens = read(&f.p("ens/report.csv"));
    assert_eq!(
        csv_column(&ens, "accuracy").last().unwrap(),
        &oracle.accuracy.to_string()
    );
}

#[test]
fn eval_perfect_fixture_and_class_mismatch() {
    let f = Fixture::new();
    f.train("run", &[]);
    let mut model = read_checkpoint(&read(&f.p("run/checkpoint.txt")))
        .unwrap()
        .model;
    model.base.classifier_bias[[0, 0]] = 1e3;
    fs::write(
        f.p("biased.txt"),
        write_checkpoint(&model, CheckpointMeta { seed: 0, epoch: 0 }),
    )
    .unwrap();
    let data = read_dataset(&read(&f.p("data/test.dataset"))).unwrap();
    let class0: Vec<_> = data
        .sequences
        .iter()
        .filter(|s| s.label == Some(0))
        .cloned()
        .collect();
    let perfect = Dataset::new(class0, data.num_classes, data.split, data.graph.clone()).unwrap();
    fs::write(f.p("perfect.dataset"), write_dataset(&perfect)).unwrap();
    ok(&[
        "eval",
        "--checkpoint",
        &f.s("biased.txt"),
        "--data",
        &f.s("perfect.dataset"),
        "--out",
        &f.s("ev"),
    ]);
    assert_eq!(csv_column(&read(&f.p("ev/report.csv")), "accuracy")[0], "1");

    let four = Dataset::new(data.sequences.clone(), 4, data.split, data.graph.clone()).unwrap();
    fs::write(f.p("four.dataset"), write_dataset(&four)).unwrap();
    let err = single_line_failure(&[
        "eval",
        "--checkpoint",
        &f.s("run/checkpoint.txt"),
        "--data",
        &f.s("four.dataset"),
        "--out",
        &f.s("ev4"),
    ]);
    assert!(err.contains("classes"), "{err}");
}

#[test]
fn ensemble_rejects_mismatched_files() {
    let f = Fixture::new();
    f.train("run", &[]);
    let full = read(&f.p("run/predictions.csv"));
    let short: String = full.lines().take(5).map(|l| format!("{l}\n")).collect();
    fs::write(f.p("short.csv"), short).unwrap();
    let err = single_line_failure(&[
        "ensemble",
        "--predictions",
        &f.s("run/predictions.csv"),
        &f.s("short.csv"),
        "--out",
        &f.s("ens"),
    ]);
    assert!(err.contains("samples"), "{err}");
    fs::write(f.p("broken.csv"), full.replacen(",0,joint", ",x,joint", 1)).unwrap();
    let err = single_line_failure(&[
        "ensemble",
        "--predictions",
        &f.s("broken.csv"),
        "--out",
        &f.s("ens"),
    ]);
    assert!(err.contains("broken.csv:"), "{err}");
}

fn write_embeddings(path: &Path, rows: &[(usize, Vec<f64>)]) {
    let dim = rows[0].1.len();
    let mut s = String::from("sample_id,label");
    for j in 0..dim {
        s.push_str(&format!(",zhat_{j}"));
    }
    s.push('\n');
    for (i, (label, z)) in rows.iter().enumerate() {
        s.push_str(&format!("{i},{label}"));
        for v in z {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn hsic_row(f: &TempDir, out: &str, emb: &Path) -> (f64, f64) {
    let o = f.path().join(out).display().to_string();
    ok(&[
        "hsic-test",
        "--embeddings",
        &emb.display().to_string(),
        "--out",
        &o,
    ]);
    let text = read(&f.path().join(out).join("hsic.csv"));
    let stat = csv_column(&text, "statistic")[0].parse().unwrap();
    let p = csv_column(&text, "p_value")[0].parse().unwrap();
    (stat, p)
}

#[test]
fn hsic_test_cases() {
    let dir = TempDir::new().unwrap();
    let clustered: Vec<(usize, Vec<f64>)> = (0..30)
        .map(|i| (i % 3, vec![(i % 3) as f64 * 5.0, 0.0]))
        .collect();
    write_embeddings(&dir.path().join("c.csv"), &clustered);
    let (stat, p) = hsic_row(&dir, "c", &dir.path().join("c.csv"));
    assert!(stat > 0.0);
    assert!(p <= 0.01, "p = {p}");

    let constant: Vec<(usize, Vec<f64>)> = (0..30).map(|i| (i % 3, vec![1.5, -2.0])).collect();
    write_embeddings(&dir.path().join("k.csv"), &constant);
    let (stat, _) = hsic_row(&dir, "k", &dir.path().join("k.csv"));
    assert!(stat.abs() <= 1e-12, "{stat}");

    write_embeddings(&dir.path().join("t.csv"), &clustered[..4]);
    let t = dir.path().join("t.csv").display().to_string();
    let o = dir.path().join("t").display().to_string();
    let err = single_line_failure(&["hsic-test", "--embeddings", &t, "--out", &o]);
    assert!(err.contains("at least 5"), "{err}");
}

#[test]
fn exported_embeddings_match_forward_pass() {
    let f = Fixture::new();
    f.train("run", &[]);
    ok(&[
        "export-embeddings",
        "--checkpoint",
        &f.s("run/checkpoint.txt"),
        "--data",
        &f.s("data/test.dataset"),
        "--out",
        &f.s("emb"),
    ]);
    let text = read(&f.p("emb/embeddings.csv"));
    let model = read_checkpoint(&read(&f.p("run/checkpoint.txt")))
        .unwrap()
        .model;
    let data = read_dataset(&read(&f.p("data/test.dataset"))).unwrap();
    let seqs: Vec<_> = data.sequences.iter().collect();
    let feats = model.features(&seqs).unwrap();
    let dim = feats[0].z_hat.len();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), data.len());
    for (row, f) in rows.iter().zip(&feats) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), dim + 2);
        for (c, v) in cols[2..].iter().zip(f.z_hat.iter()) {
            let parsed: f64 = c.parse().unwrap();
            assert!(
                (parsed - v).abs() <= 1e-12 * v.abs().max(1.0),
                "{parsed} vs {v}"
            );
        }
    }
}
