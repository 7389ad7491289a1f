use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
lr = 0.005
eval_every = 4
seeds = [0]

[data]
class_count = 4
per_class = 20
image_size = 8

[stream]
num_tasks = 2
batch_size = 8

[model]
image_size = 8
embed_dim = 16
num_heads = 2
num_layers = 1
num_classes = 4
"#;

fn olora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olora"))
        .args(args)
        .env("OLORA_THREADS", "1")
        .output()
        .expect("spawn olora")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited with a code")
}

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(code(&olora(&["train", "--bogus"])), 1);
    assert_eq!(code(&olora(&["train", "--method", "sgd"])), 1);
}

#[test]
fn help_exits_zero() {
    let out = olora(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay-detector"));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "no_such_field = 3\n").unwrap();
    let out = olora(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = write_tiny(dir.path());
    let out = olora(&["train", "--config", &cfg, "--lr=-1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = olora(&["replay-detector", "--input", "/nonexistent/losses.csv"]);
    assert_eq!(code(&out), 2);
    let out = olora(&["report", "/nonexistent/run", "--out", "/tmp"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn replay_detector_prints_events() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("loss.csv");
    // Rising then flat and low: a peak followed by a plateau.
    let losses = [1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2];
    let text: String = losses.iter().map(|l| format!("{l}\n")).collect();
    fs::write(&input, text).unwrap();
    let out = olora(&[
        "replay-detector",
        "--input",
        input.to_str().unwrap(),
        "--mean-threshold",
        "0.5",
        "--var-threshold",
        "0.05",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,mean,var,event"));
    assert_eq!(lines.count(), losses.len());
    assert!(csv.contains("peak"), "{csv}");
    assert!(csv.contains("plateau"), "{csv}");

    assert_eq!(code(&olora(&["replay-detector", "--input", input.to_str().unwrap(), "--preset", "nope"])), 1);
}

#[test]
fn gen_train_eval_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let stream = dir.path().join("stream");
    let runs = dir.path().join("runs");
    let report = dir.path().join("report");

    let out = olora(&["gen-data", "--config", &cfg, "--out", stream.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = olora(&[
        "train",
        "--config",
        &cfg,
        "--stream",
        stream.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("a run directory");
    for f in ["config.toml", "metrics.csv", "events.csv", "checkpoint.olra", "record.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let out = olora(&["eval", "--run", run.to_str().unwrap(), "--stream", stream.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("task,accuracy\n0,"), "{text}");
    assert!(text.contains("\nmean,"));

    let out = olora(&["report", run.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "curves.csv", "accuracy.svg"] {
        assert!(report.join(f).is_file(), "missing {f}");
    }
}
