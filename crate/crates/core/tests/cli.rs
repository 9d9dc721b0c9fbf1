mod common;

use std::path::Path;
use std::process::{Command, Output};

fn cmgen(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmgen"))
        .env("CMGEN_OUT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_generate_evaluate_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let base = ["--config", cfg, "--out", "run", "--set", "curriculum.total_steps=200"];

    let out = cmgen(root.path(), &[&base[..], &["train"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = root.path().join("run");
    for name in ["loss.csv", "final.json", "config.toml"] {
        assert!(run.join(name).exists(), "{name} missing");
    }

    let out = cmgen(
        root.path(),
        &[&base[..], &["generate", "--checkpoint", "run/final.json", "--steps", "2", "--count", "50"]].concat(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("samples.cmg").exists());
    assert!(run.join("samples.cmg.meta.json").exists());

    let out = cmgen(root.path(), &[&base[..], &["evaluate", "--samples", "run/samples.cmg"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for metric in ["fid,", "w2,", "recall,", "rtf,"] {
        assert!(text.contains(metric), "{metric} missing from {text}");
    }
    let report = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(report.starts_with("# config_hash="));
    assert!(report.contains("metric,value"));

    // A different seed is a different config: refused unless overridden.
    let reseeded = [&base[..], &["--seed", "5", "evaluate", "--samples", "run/samples.cmg"]].concat();
    assert_eq!(code(&cmgen(root.path(), &reseeded)), 2);
    let forced = [&reseeded[..], &["--allow-hash-mismatch"]].concat();
    assert_eq!(code(&cmgen(root.path(), &forced)), 0);

    let out = cmgen(root.path(), &[&base[..], &["sweep-steps", "--checkpoint", "run/final.json"]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().count(), 4);
}

#[test]
fn resume_continues_the_log() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let base = ["--config", cfg, "--set", "curriculum.total_steps=300"];
    let first = [&base[..], &["--out", "a", "train", "--until", "100"]].concat();
    assert_eq!(code(&cmgen(root.path(), &first)), 0);
    let second = [&base[..], &["--out", "a", "train", "--resume", "a/final.json"]].concat();
    assert_eq!(code(&cmgen(root.path(), &second)), 0);
    let straight = [&base[..], &["--out", "b", "train"]].concat();
    assert_eq!(code(&cmgen(root.path(), &straight)), 0);
    let a = std::fs::read(root.path().join("a/loss.csv")).unwrap();
    let b = std::fs::read(root.path().join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn failures_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let bad_value = cmgen(root.path(), &["--set", "train.batch_size=0", "train"]);
    assert_eq!(code(&bad_value), 2);
    let unknown = cmgen(root.path(), &["--set", "nonsense.key=1", "train"]);
    assert_eq!(code(&unknown), 2);
    let missing_config = cmgen(root.path(), &["--config", "/nonexistent/cfg.toml", "train"]);
    assert_eq!(code(&missing_config), 4);
    let missing_ckpt = cmgen(root.path(), &["generate", "--checkpoint", "nowhere.json"]);
    assert_eq!(code(&missing_ckpt), 4);

    let garbage = root.path().join("garbage.cmg");
    std::fs::write(&garbage, b"CMG1\x05\x00").unwrap();
    let out = cmgen(
        root.path(),
        &["evaluate", "--samples", garbage.to_str().unwrap(), "--allow-hash-mismatch"],
    );
    assert_eq!(code(&out), 4);

    let diverge = cmgen(
        root.path(),
        &[
            "--out",
            "nan",
            "--set",
            "train.lr0=1e300",
            "--set",
            "train.lr_decay=1.0",
            "--set",
            "curriculum.total_steps=50",
            "train",
        ],
    );
    assert_eq!(code(&diverge), 3);
    assert!(root.path().join("nan/nan_dump.json").exists());
}

#[test]
fn padding_ablation_needs_variable_length_data() {
    let root = tempfile::tempdir().unwrap();
    let out = cmgen(root.path(), &["ablate-padding"]);
    assert_eq!(code(&out), 2);
}
