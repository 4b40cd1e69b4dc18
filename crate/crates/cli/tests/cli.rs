use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use causalrec::experiment::{ExperimentConfig, SweepManifest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_causalrec"));
    c.env_remove("CAUSALREC_OUTPUT_DIR")
        .env_remove("CAUSALREC_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_config(dir: &Path, name: &str, causality: &str) -> PathBuf {
    let mask = if causality == "ae" {
        "mask_probability = 0.2\n"
    } else {
        ""
    };
    let text = format!(
        r#"schema_version = 1
seed = 3

[dataset]
kind = "synthetic"
max_len = 8

[dataset.spec]
n_items = 30
n_users = 60
mean_length = 10
length_spread = 3

[model]
causality = "{causality}"
hidden_size = 8
num_layers = 1
num_heads = 2
max_len = 8
dropout_hidden = 0.1
dropout_attention = 0.1
{mask}
[train]
batch_size = 32
max_epochs = 2

[[protocols]]
kind = "all_ranking"

[[protocols]]
kind = "popularity_sample"
sample_size = 10
"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn shipped_configs_parse() {
    for f in ["toy_ar.toml", "toy_ae.toml"] {
        ExperimentConfig::load(&configs_dir().join(f)).unwrap();
    }
    SweepManifest::load(&configs_dir().join("toy_sweep.toml")).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["train", "--bogus"])), 2);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn prepare_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.tsv");
    // Five users each with the same six items; one stray item seen once.
    let mut text = String::new();
    for u in 0..5 {
        for (t, i) in ["a", "b", "c", "d", "e", "f"].iter().enumerate() {
            text.push_str(&format!("u{u}\t{i}\t{t}\n"));
        }
    }
    text.push_str("u0\tz\t99\n");
    fs::write(&input, text).unwrap();
    let bundle = dir.path().join("data.bundle");
    let report = dir.path().join("report.json");
    let o = run(&[
        "prepare",
        "--input",
        input.to_str().unwrap(),
        "--output",
        bundle.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("users         5"), "{out}");
    assert!(out.contains("items         6"));
    assert!(out.contains("interactions  30"));
    assert!(out.contains("mean length   6.00"));
    assert!(bundle.exists() && report.exists());
}

#[test]
fn prepare_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("b");
    let o = run(&[
        "prepare",
        "--input",
        empty.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    assert!(!o.stderr.is_empty());
    let missing = dir.path().join("missing.tsv");
    let o = run(&[
        "prepare",
        "--input",
        missing.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn schema_version_mismatch_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "c.toml", "ar");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("schema_version = 1", "schema_version = 2");
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&run(&["train", cfg.to_str().unwrap()])), 5);
    fs::write(&cfg, "schema_version = 1\nseed = [\n").unwrap();
    assert_eq!(code(&run(&["train", cfg.to_str().unwrap()])), 4);
}

#[test]
fn train_evaluate_compare_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let ar_cfg = tiny_config(dir.path(), "ar.toml", "ar");
    let ae_cfg = tiny_config(dir.path(), "ae.toml", "ae");
    let ar_run = dir.path().join("runs/ar");
    let ae_run = dir.path().join("runs/ae");

    let o = run(&["train", &p(&ar_cfg), "--output", &p(&ar_run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("all_ranking"));
    // The output directory can also come from the environment.
    let o = bin()
        .args(["train", &p(&ae_cfg)])
        .env("CAUSALREC_OUTPUT_DIR", &ae_run)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "run.json", "log.jsonl", "model.ckpt"] {
        assert!(ae_run.join(f).exists(), "{f}");
    }

    let e1 = run(&[
        "evaluate",
        &p(&ar_run),
        "--protocol",
        "uniform:10",
        "--seed",
        "4",
    ]);
    let e2 = run(&[
        "evaluate",
        &p(&ar_run),
        "--protocol",
        "uniform:10",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&e1), 0, "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(stdout(&e1), stdout(&e2));

    let same = run(&["compare", &p(&ar_run), &p(&ar_run)]);
    assert_eq!(code(&same), 0);
    let body: Vec<String> = stdout(&same).lines().skip(1).map(str::to_string).collect();
    assert_eq!(body.len(), 12);
    assert!(
        body.iter()
            .all(|l| l.ends_with("0.00%") || l.ends_with("n/a")),
        "{body:?}"
    );

    let csv = dir.path().join("cmp.csv");
    let pair = run(&["compare", &p(&ar_run), &p(&ae_run), "--csv", &p(&csv)]);
    assert_eq!(code(&pair), 0);
    let header = stdout(&pair).lines().next().unwrap().to_string();
    assert!(header.find("AE").unwrap() < header.find("AR").unwrap());
    assert!(header.contains("Improv."));
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("protocol,metric,AE,AR,improvement"));

    let analysis = dir.path().join("analysis");
    let a = run(&[
        "analyze",
        "--run",
        &p(&ar_run),
        "--users",
        "4",
        "--output",
        &p(&analysis),
    ]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    for f in [
        "summary.csv",
        "spectra.csv",
        "reconstruction.csv",
        "dump/manifest.csv",
    ] {
        assert!(analysis.join(f).exists(), "{f}");
    }
    let again = dir.path().join("again");
    let b = run(&[
        "analyze",
        &p(&analysis.join("dump")),
        "--output",
        &p(&again),
    ]);
    assert_eq!(code(&b), 0, "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(
        fs::read_to_string(analysis.join("spectra.csv")).unwrap(),
        fs::read_to_string(again.join("spectra.csv")).unwrap()
    );
}

#[test]
fn tune_writes_leaderboard_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("sweep.toml");
    fs::write(
        &manifest,
        r#"schema_version = 1
seed = 2
strategy = "grid"

[dataset]
kind = "synthetic"
max_len = 8

[dataset.spec]
n_items = 30
n_users = 60
mean_length = 10
length_spread = 3

[train]
batch_size = 32

[space]
causality = ["ae", "ar"]
hidden_size = [8]
num_layers = [1]
num_heads = [2]
dropout_hidden = [0.1]
dropout_attention = [0.1]
mask_probability = [0.2]
loss = ["ce"]
learning_rate = [0.001, 0.01]
max_len = 8

[asha]
eta = 2
grace = 1
max_budget = 2
"#,
    )
    .unwrap();
    let out = dir.path().join("sweep");
    let o = bin()
        .args([
            "tune",
            manifest.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
        ])
        .env("CAUSALREC_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best"));
    for f in [
        "manifest.toml",
        "leaderboard.jsonl",
        "leaderboard.txt",
        "replay.jsonl",
        "best.toml",
        "best.ckpt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(out.join("leaderboard.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    ExperimentConfig::load(&out.join("best.toml")).unwrap();
}
