use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
rounds = 2
num_clients = 3
batch_size = 16
lr = 0.01
rank = 2
lora_start = 1
boundary_m = 3
num_classes = 3
d_in = 6
train_per_class = 30
test_per_class = 10
num_blocks = 4
d_hidden = 8
d_embed = 6
"#;

fn fedmodal(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmodal")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn zero_rounds_write_one_metrics_line() {
    let dir = setup();
    ok(&fedmodal(&["train", "--config", "tiny.toml", "--out", "run", "--rounds", "0"], dir.path()));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.contains("\"round\":0"));
    let cfg = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(cfg.contains("rounds = 0"));
}

#[test]
fn train_is_byte_reproducible_and_eval_replays_it() {
    let dir = setup();
    for out in ["a", "b"] {
        ok(&fedmodal(&["train", "--config", "tiny.toml", "--out", out, "--seed", "4"], dir.path()));
    }
    let a = fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    let eval = ok(&fedmodal(&["eval", "--run", "a"], dir.path()));
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let last: serde_json::Value =
        serde_json::from_str(std::str::from_utf8(&a).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(eval["global_accuracy"], last["global_accuracy"]);
    assert_eq!(eval["local_accuracy"], last["local_accuracy"]);
    assert_eq!(eval["seed"], 4);
}

#[test]
fn baselines_run_from_the_cli() {
    let dir = setup();
    for kind in ["zero_shot", "local_only", "weighted_only"] {
        ok(&fedmodal(&["train", "--config", "tiny.toml", "--out", kind, "--baseline", kind], dir.path()));
    }
    let zs = fs::read_to_string(dir.path().join("zero_shot/metrics.jsonl")).unwrap();
    assert_eq!(zs.lines().count(), 1);
    let out = fedmodal(&["train", "--config", "tiny.toml", "--baseline", "oracle"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partition_is_deterministic_and_validated() {
    let dir = setup();
    for out in ["p1", "p2"] {
        ok(&fedmodal(&["partition", "--config", "tiny.toml", "--out", out, "--partition", "dir"], dir.path()));
    }
    for f in ["partition.json", "partition_heatmap.csv"] {
        assert_eq!(fs::read(dir.path().join("p1").join(f)).unwrap(), fs::read(dir.path().join("p2").join(f)).unwrap());
    }
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("p1/partition.json")).unwrap()).unwrap();
    assert_eq!(json["partition"]["spec"]["alpha"], 0.1);
    assert_eq!(json["seed"], 0);

    let bad = fedmodal(&["partition", "--config", "tiny.toml", "--partition", "path:4"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bad_input_exits_with_two() {
    let dir = setup();
    let cases: [&[&str]; 5] = [
        &["train", "--config", "tiny.toml", "--no-such-key", "1"],
        &["train", "--config", "missing.toml"],
        &["train", "--config", "tiny.toml", "--rounds"],
        &["eval", "--run", "nowhere"],
        &["report", "nowhere.jsonl"],
    ];
    for args in cases {
        let out = fedmodal(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    fs::create_dir_all(dir.path().join("broken/checkpoint")).unwrap();
    fs::write(dir.path().join("broken/config.toml"), TINY).unwrap();
    fs::write(dir.path().join("broken/checkpoint/checkpoint.json"), "{").unwrap();
    assert_eq!(fedmodal(&["eval", "--run", "broken"], dir.path()).status.code(), Some(2));
}

#[test]
fn ablation_rows_and_consistency_with_train() {
    let dir = setup();
    ok(&fedmodal(
        &["ablate", "--config", "tiny.toml", "--out", "ab", "--axis", "ex_query", "--values", "on,off"],
        dir.path(),
    ));
    let csv = fs::read_to_string(dir.path().join("ab/ablate_ex_query.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    ok(&fedmodal(&["ablate", "--config", "tiny.toml", "--out", "one", "--axis", "mu", "--values", "0.1"], dir.path()));
    ok(&fedmodal(&["train", "--config", "tiny.toml", "--out", "t"], dir.path()));
    let train = fs::read_to_string(dir.path().join("t/metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(train.lines().last().unwrap()).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("one/ablate_mu.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let col = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
    assert_eq!(col("global_accuracy").parse::<f64>().unwrap(), last["global_accuracy"].as_f64().unwrap());

    let bad = fedmodal(&["ablate", "--config", "tiny.toml", "--axis", "depth", "--values", "1"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn report_passes_through_and_merges() {
    let dir = setup();
    ok(&fedmodal(&["train", "--config", "tiny.toml", "--out", "t"], dir.path()));
    let table = ok(&fedmodal(&["report", "t/metrics.jsonl"], dir.path()));
    assert_eq!(table.lines().count(), 1 + 3);

    ok(&fedmodal(&["ablate", "--config", "tiny.toml", "--out", "x", "--axis", "mu", "--values", "0,0.1"], dir.path()));
    ok(&fedmodal(&["ablate", "--config", "tiny.toml", "--out", "y", "--axis", "mu", "--values", "0.5"], dir.path()));
    ok(&fedmodal(&["report", "x/ablate_mu.csv", "y/ablate_mu.csv", "--out", "merged.csv"], dir.path()));
    let merged = fs::read_to_string(dir.path().join("merged.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 2 + 1);
}
