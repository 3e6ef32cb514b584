use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qrn::checkpoint::read_manifest;

fn qrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrn"))
        .args(args)
        .output()
        .expect("run qrn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(dir: &Path, task: u32) {
    let out = qrn(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--task",
        &task.to_string(),
        "--train",
        "40",
        "--test",
        "20",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(data: &Path, config: &str, out: &Path) -> Output {
    qrn(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--task",
        "1",
        "--config",
        config,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(qrn(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(qrn(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("missing");
    let out = qrn(&["train", "--data", missing.to_str().unwrap(), "--task", "1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = write_config(dir.path(), "hidden_size = 0\n");
    let out = qrn(&["gradcheck", "--config", &bad]);
    assert_eq!(out.status.code(), Some(1));

    let unknown = write_config(dir.path(), "colour = blue\n");
    assert_eq!(qrn(&["bench", "--config", &unknown]).status.code(), Some(1));

    fs::write(dir.path().join("qa1_broken_train.txt"), "1 Mary went home.\nx Where?\thome\t1\n").unwrap();
    fs::write(dir.path().join("qa1_broken_test.txt"), "1 Mary went home.\n2 Where is Mary?\thome\t1\n").unwrap();
    let out = qrn(&["train", "--data", dir.path().to_str().unwrap(), "--task", "1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_values_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let config = write_config(
        dir.path(),
        "hidden_size = 100\nmax_epochs = 1\npatience_epochs = 1\nrestarts = 1\nprecision = f32\n",
    );
    let ckpt = dir.path().join("ckpt");
    let out = train(dir.path(), &config, &ckpt);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_manifest(&ckpt).unwrap();
    assert_eq!(manifest.model_config.qrn.hidden_size, 100);
    assert_eq!(manifest.train_config.max_epochs, 1);
    assert!(stdout(&out).contains("test_error="));

    let out = qrn(&["eval", "--data", dir.path().to_str().unwrap(), "--task", "1", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("error"));
}

#[test]
fn trace_of_an_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let config = write_config(dir.path(), "hidden_size = 8\nmax_epochs = 0\npatience_epochs = 1\nrestarts = 1\n");
    let ckpt = dir.path().join("ckpt");
    assert!(train(dir.path(), &config, &ckpt).status.success());
    let out = qrn(&[
        "trace",
        "--data",
        dir.path().to_str().unwrap(),
        "--task",
        "1",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--example",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# example\t0");
    let columns = lines[1].split('\t').count();
    let body: Vec<&&str> = lines[2..].iter().take_while(|l| !l.starts_with('#')).collect();
    assert!(!body.is_empty());
    for row in &body {
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells.len(), columns);
        for v in &cells[1..] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(text.contains("# question\t") && text.contains("# answer\t") && text.contains("# predicted\t"));

    let out = qrn(&["trace", "--data", dir.path().to_str().unwrap(), "--task", "1", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_reports_both_paths() {
    let out = qrn(&["bench", "--steps", "20", "--hidden", "8", "--batch", "4", "--repeats", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["seq_ms=", "par_ms=", "ratio=", "self_check=pass"] {
        assert!(text.contains(key), "{text}");
    }
}

#[test]
fn gradcheck_passes_and_guards_its_size() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "hidden_size = 6\nvector_gates = true\n");
    let out = qrn(&["gradcheck", "--config", &config, "--steps", "4"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("gradcheck=pass"));

    let big = write_config(dir.path(), "hidden_size = 50\n");
    assert_eq!(qrn(&["gradcheck", "--config", &big]).status.code(), Some(1));
    assert_eq!(qrn(&["gradcheck", "--steps", "0"]).status.code(), Some(1));
}

#[test]
fn training_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let config = write_config(
        dir.path(),
        "hidden_size = 8\nmax_epochs = 3\npatience_epochs = 3\nrestarts = 2\nseed = 9\n",
    );
    let strip = |o: &Output| -> Vec<String> {
        stdout(o)
            .lines()
            .filter(|l| !l.starts_with("checkpoint="))
            .map(|l| l.split(" wall_clock_s=").next().unwrap().to_string())
            .collect()
    };
    let a = train(dir.path(), &config, &dir.path().join("a"));
    let b = train(dir.path(), &config, &dir.path().join("b"));
    assert!(a.status.success() && b.status.success());
    assert_eq!(strip(&a), strip(&b));
}
