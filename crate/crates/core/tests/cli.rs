//! Drives the `nofe` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_nofe");

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk-synthetic.conf")
}

fn nofe(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn runs(out: &Path) -> Vec<Value> {
    let v: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    v["runs"].as_array().unwrap().clone()
}

fn histogram(out: &Path) -> Vec<usize> {
    fs::read_to_string(out.join("specialty-sizes.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn synthetic_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = desk_config();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["train-generalist", "build-nofe", "finetune", "eval"] {
        let o = nofe(out, &[cmd, "--config", cfg]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(!metrics.is_empty());
    let last: Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["stage"], "eval");
    assert!(last["top1"].as_f64().unwrap() > 0.5);
    for line in metrics.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for field in ["stage", "epoch", "step", "loss", "mapping_hash"] {
            assert!(rec.get(field).is_some(), "{field} missing in {line}");
        }
    }
    let runs = runs(out);
    assert_eq!(runs.len(), 4);
    for run in &runs {
        assert_eq!(run["status"], "ok");
        assert_eq!(run["seed"], 0);
        assert!(run["finished"].is_string());
        assert!(run["netspec_hashes"]["base"].is_string());
        for o in run["outputs"].as_array().unwrap() {
            assert!(Path::new(o.as_str().unwrap()).exists(), "{o} listed but missing");
        }
    }
    assert!(runs[1]["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("generalist.ckpt")));
}

#[test]
fn synth_containers_feed_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let small = write(
        out,
        "small.conf",
        "synth.classes = 4\nsynth.superclusters = 2\nsynth.per_class = 10\nsynth.image_size = 12\nnetspec.base = shipped:desk-synthetic\n",
    );
    assert_eq!(code(&nofe(out, &["synth", "--config", small.to_str().unwrap()])), 0);
    assert!(out.join("train.nofd").exists() && out.join("test.nofd").exists());
    let files = write(
        out,
        "files.conf",
        "data = files\ndata.train = train.nofd\ndata.test = test.nofd\nnetspec.base = shipped:desk-synthetic\nk = 2\n",
    );
    // the desk base net has 16 outputs; 4 classes is a configuration error
    let o = nofe(out, &["train-flat", "--config", files.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = nofe(out, &["train-generalist", "--config", files.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(histogram(out), vec![2, 2]);
}

#[test]
fn partition_identity_fully_balanced_halves() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.csv", "C=4,K=4\n1,0,0,0\n0,1,0,0\n0,0,1,0\n0,0,0,1\n");
    let o = nofe(dir.path(), &["partition", "--matrix", m.to_str().unwrap(), "--method", "fully-balanced", "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(histogram(dir.path()), vec![2, 2]);
}

#[test]
fn partition_elasso_lambda_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    // every row prefers column 1
    let m = write(out, "m.csv", "C=6,K=3\n0.2,0.7,0.1\n0.1,0.8,0.1\n0.3,0.4,0.3\n0.0,1.0,0.0\n0.25,0.5,0.25\n0.1,0.6,0.3\n");
    let m = m.to_str().unwrap();
    let o = nofe(out, &["partition", "--matrix", m, "--method", "elasso", "--lambda", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(histogram(out), vec![6, 0, 0]);
    let o = nofe(out, &["partition", "--matrix", m, "--method", "elasso", "--lambda", "1e6"]);
    assert_eq!(code(&o), 0);
    assert_eq!(histogram(out), vec![2, 2, 2]);
    let trace = fs::read_to_string(out.join("elasso-trace.csv")).unwrap();
    let values: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn partition_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "m.csv", "C=4,K=2\n0.6,0.4\n0.5,0.5\n0.4,0.6\n0.3,0.7\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = nofe(out, &["partition", "--matrix", m.to_str().unwrap(), "--method", "fully-balanced", "--seed", "5", "--deterministic"]);
        assert_eq!(code(&o), 0);
    }
    for f in ["mapping.csv", "specialty-sizes.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn count_params_reports_alexnet_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = nofe(dir.path(), &["count-params", "--netspec", "shipped:alexnet-caffe", "--k", "10"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("60965224"), "{text}");
    assert!(text.contains("40409960"), "{text}");
    let csv = fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nofe(dir.path(), &["gradcheck", "--seeds", "5"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&nofe(out, &["no-such-command"])), 1);
    assert_eq!(code(&nofe(out, &["eval"])), 1, "missing --config");
    let bad_key = write(out, "bad.conf", "netspec.base = shipped:desk-synthetic\nlamda = 3\n");
    let o = nofe(out, &["eval", "--config", bad_key.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("'lamda'"));
    let bad_value = write(out, "bad2.conf", "netspec.base = shipped:desk-synthetic\nk = four\n");
    let o = nofe(out, &["eval", "--config", bad_value.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("'k'"));
    let csv = write(out, "bad.csv", "C=3,K=2\n0.5,0.5\n0.1\n0.2,0.8\n");
    let o = nofe(out, &["partition", "--matrix", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert_eq!(code(&nofe(out, &["partition", "--matrix", "missing.csv"])), 2);
    // eval before any training: the checkpoint is missing
    let cfg = desk_config();
    assert_eq!(code(&nofe(out, &["eval", "--config", cfg.to_str().unwrap()])), 2);
    let runs = runs(out);
    assert!(runs.iter().all(|r| r["status"] == "failed" && r["error"].is_string()));
    assert_eq!(runs.last().unwrap()["exit_code"], 2);
}

#[test]
fn divergence_exits_3_with_last_finite_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    write(
        out,
        "hot.netspec",
        "INPUT:1x12x12\nCONV:1x8x3\nPOOL:2,2,MAX\nFC:16\nPOLICY { lr=1e30:2; momentum=0.9; decay=0; init=xavier; batch=32 }\n",
    );
    let cfg = write(out, "hot.conf", "netspec.base = hot.netspec\nk = 4\n");
    let o = nofe(out, &["train-generalist", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("generalist-last-finite.ckpt").exists());
    let run = runs(out).pop().unwrap();
    assert_eq!(run["status"], "failed");
    assert_eq!(run["exit_code"], 3);
    assert!(run["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .any(|o| o.as_str().unwrap().ends_with("generalist-last-finite.ckpt")));
}

#[test]
fn retrieval_table_has_k_rows_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = write(
        out,
        "r.conf",
        "synth.classes = 8\nsynth.superclusters = 2\nsynth.per_class = 20\nnetspec.base = small.netspec\nnetspec.branch = small-branch.netspec\nk = 2\nupdate_period = 0.5\nretrieve.k = 3\nretrieve.queries = 5\nretrieve.tag = trunk\n",
    );
    write(
        out,
        "small.netspec",
        "INPUT:1x12x12\nCONV:1x4x3\nPOOL:2,2,MAX\nFC:8\nPOLICY { lr=0.05:2; momentum=0.9; decay=0.0005; init=xavier; batch=16 }\n",
    );
    write(
        out,
        "small-branch.netspec",
        "CONV:1x4x3\nFC:c\nPOLICY { lr=0.05:1; momentum=0.9; decay=0.0005; init=xavier; batch=16 }\n",
    );
    let cfg = cfg.to_str().unwrap();
    for cmd in ["train-generalist", "build-nofe", "finetune", "retrieve"] {
        let o = nofe(out, &[cmd, "--config", cfg]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let table = fs::read_to_string(out.join("retrieval.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 * 3);
    let hashes = &runs(out)[0]["netspec_hashes"];
    assert_eq!(hashes["base"].as_str().unwrap().len(), 64);
}
