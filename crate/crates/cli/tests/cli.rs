//! End-to-end tests of the `carl-lab` binary: flag plumbing, exit codes,
//! artifact layout, and byte-level reproducibility of reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn carl_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carl-lab"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}:\n{}",
        out.status.code(),
        stderr(out)
    );
}

/// Recursively collects every file below `dir`, relative path -> contents.
fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .expect("directory exists")
            .map(|e| e.expect("entry reads").path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("path under root").to_path_buf();
                out.push((rel, fs::read(&path).expect("file reads")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

/// Byte-compares two run trees, skipping resolved `config.json` files:
/// those record flag values verbatim, including any paths that point into
/// the run directory itself.
fn assert_dirs_identical(a: &Path, b: &Path, what: &str) {
    let keep = |c: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        c.into_iter()
            .filter(|(p, _)| p.file_name().is_none_or(|n| n != "config.json"))
            .collect()
    };
    let ca = keep(dir_contents(a));
    let cb = keep(dir_contents(b));
    let names = |c: &[(PathBuf, Vec<u8>)]| c.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    assert_eq!(names(&ca), names(&cb), "{what}: file sets differ");
    for ((path, bytes_a), (_, bytes_b)) in ca.iter().zip(&cb) {
        assert_eq!(bytes_a, bytes_b, "{what}: {} differs between runs", path.display());
    }
}

#[test]
fn help_lists_every_subcommand_and_their_flags() {
    let top = carl_lab(&["--help"]);
    assert_success(&top, "--help");
    let text = stdout(&top);
    for sub in [
        "gen-data", "train-repr", "train-hrl", "eval", "embed", "nn-query", "sweep", "kball",
        "bisim", "env",
    ] {
        assert!(text.contains(sub), "top-level help misses `{sub}`:\n{text}");
    }

    let flags: &[(&str, &[&str])] = &[
        (
            "gen-data",
            &[
                "--episodes",
                "--horizon",
                "--noise",
                "--start-rooms",
                "--coverage-region",
                "--coverage-keep",
                "--imbalance-dir",
                "--imbalance-remove",
                "--out",
            ],
        ),
        (
            "train-repr",
            &["--data", "--variant", "--k", "--stride", "--tau", "--d", "--goal-mode", "--batch", "--steps", "--lr", "--out"],
        ),
        (
            "train-hrl",
            &["--data", "--algo", "--mode", "--lambda-aux", "--kappa", "--beta", "--gamma", "--k", "--steps", "--flow-through", "--pretrain", "--out"],
        ),
        ("eval", &["--agent", "--rooms", "--episodes", "--horizon", "--json", "--out"]),
        ("embed", &["--model", "--pairs", "--direction-pairs", "--out"]),
        ("nn-query", &["--model", "--state", "--goal", "--candidates", "--top", "--bin", "--json"]),
        (
            "sweep",
            &["--axis", "--values", "--seeds", "--train-rooms", "--test-rooms", "--repr-steps", "--hrl-steps", "--compare-baseline", "--out"],
        ),
        ("kball", &["--mdp", "--root", "--k"]),
        ("bisim", &["--m1", "--m2"]),
        ("env", &["--tabular"]),
    ];
    for (sub, expected) in flags {
        let out = carl_lab(&[sub, "--help"]);
        assert_success(&out, "subcommand help");
        let text = stdout(&out);
        for flag in *expected {
            assert!(text.contains(flag), "`{sub} --help` misses `{flag}`:\n{text}");
        }
    }
}

#[test]
fn kball_radius_zero_prints_the_singleton_root() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.json");
    let export = carl_lab(&["env", "--env", "rooms2x4", "--tabular", grid.to_str().unwrap()]);
    assert_success(&export, "env --tabular");

    let out = carl_lab(&["kball", "--mdp", grid.to_str().unwrap(), "--root", "12", "--k", "0"]);
    assert_success(&out, "kball");
    assert_eq!(stdout(&out).trim(), "{12}");
}

#[test]
fn bisim_reports_a_tabular_mdp_bisimilar_to_itself() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.json");
    let export = carl_lab(&["env", "--env", "rooms1x3", "--tabular", grid.to_str().unwrap()]);
    assert_success(&export, "env --tabular");

    let out = carl_lab(&["bisim", "--m1", grid.to_str().unwrap(), "--m2", grid.to_str().unwrap()]);
    assert_success(&out, "bisim");
    assert_eq!(stdout(&out).trim(), "bisimilar: true");
}

#[test]
fn unknown_flags_and_subcommands_exit_with_usage_errors() {
    let unknown_flag = carl_lab(&["env", "--no-such-flag"]);
    assert_eq!(unknown_flag.status.code(), Some(2), "unknown flag should be a usage error");

    let unknown_sub = carl_lab(&["frobnicate"]);
    assert_eq!(unknown_sub.status.code(), Some(2), "unknown subcommand should be a usage error");
}

#[test]
fn negative_k_fails_validation_naming_the_field() {
    let out = carl_lab(&["train-repr", "--k", "-1", "--data", "missing.bin", "--out", "unused"]);
    assert_eq!(out.status.code(), Some(1), "validation failure should exit 1");
    let err = stderr(&out);
    assert!(err.contains("model.k"), "error should name `model.k`:\n{err}");
}

#[test]
fn unknown_config_file_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"modle": {"k": 3}}"#).unwrap();

    let out = carl_lab(&[
        "env",
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("modle"), "error should quote the unknown key:\n{err}");
}

#[test]
fn flags_override_config_file_values_and_the_resolved_config_reproduces_them() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"env": "rooms2x4", "seed": 7, "data": {"episodes": 20, "horizon": 30}, "model": {"k": 2, "d": 6, "steps": 25, "batch": 32, "phi_hidden": [16], "psi_hidden": [8]}}"#,
    )
    .unwrap();

    let data_dir = dir.path().join("data");
    let gen = carl_lab(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert_success(&gen, "gen-data");
    let dataset = data_dir.join("dataset.bin");

    // --k 4 on the command line must beat the file's k = 2, while the file's
    // seed and shape settings survive into the resolved config.
    let run_a = dir.path().join("run_a");
    let train = carl_lab(&[
        "train-repr",
        "--config",
        config.to_str().unwrap(),
        "--k",
        "4",
        "--data",
        dataset.to_str().unwrap(),
        "--out",
        run_a.to_str().unwrap(),
    ]);
    assert_success(&train, "train-repr");

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["k"], 4, "flag should override the file value");
    assert_eq!(resolved["seed"], 7, "file seed should survive");
    assert_eq!(resolved["model"]["d"], 6, "file embedding dim should survive");

    // Re-running from the resolved config alone reproduces the checkpoint.
    let run_b = dir.path().join("run_b");
    let rerun = carl_lab(&[
        "train-repr",
        "--config",
        run_a.join("config.json").to_str().unwrap(),
        "--data",
        dataset.to_str().unwrap(),
        "--out",
        run_b.to_str().unwrap(),
    ]);
    assert_success(&rerun, "train-repr from resolved config");
    assert_dirs_identical(
        &run_a.join("checkpoints"),
        &run_b.join("checkpoints"),
        "resolved-config round trip",
    );
}

#[test]
fn data_training_and_evaluation_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let base: Vec<String> = ["--env", "rooms2x4", "--seed", "5"]
        .iter()
        .map(|s| s.to_string())
        .collect();

    let run_once = |tag: &str| -> PathBuf {
        let root = dir.path().join(tag);
        let data_dir = root.join("data");
        let mut gen: Vec<String> = vec!["gen-data".into()];
        gen.extend(base.clone());
        gen.extend([
            "--episodes".into(),
            "25".into(),
            "--horizon".into(),
            "30".into(),
            "--out".into(),
            data_dir.to_str().unwrap().into(),
        ]);
        let gen_args: Vec<&str> = gen.iter().map(String::as_str).collect();
        assert_success(&carl_lab(&gen_args), "gen-data");

        let dataset = data_dir.join("dataset.bin");
        let repr_dir = root.join("repr");
        let mut repr: Vec<String> = vec!["train-repr".into()];
        repr.extend(base.clone());
        repr.extend([
            "--data".into(),
            dataset.to_str().unwrap().into(),
            "--k".into(),
            "2".into(),
            "--d".into(),
            "6".into(),
            "--steps".into(),
            "25".into(),
            "--batch".into(),
            "32".into(),
            "--out".into(),
            repr_dir.to_str().unwrap().into(),
        ]);
        let repr_args: Vec<&str> = repr.iter().map(String::as_str).collect();
        assert_success(&carl_lab(&repr_args), "train-repr");

        let hrl_dir = root.join("hrl");
        let mut hrl: Vec<String> = vec!["train-hrl".into()];
        hrl.extend(base.clone());
        hrl.extend([
            "--data".into(),
            dataset.to_str().unwrap().into(),
            "--mode".into(),
            "pretrain".into(),
            "--pretrain".into(),
            repr_dir.join("checkpoints").join("repr").to_str().unwrap().into(),
            "--k".into(),
            "2".into(),
            "--steps".into(),
            "25".into(),
            "--batch".into(),
            "32".into(),
            "--out".into(),
            hrl_dir.to_str().unwrap().into(),
        ]);
        let hrl_args: Vec<&str> = hrl.iter().map(String::as_str).collect();
        assert_success(&carl_lab(&hrl_args), "train-hrl");

        let eval_dir = root.join("eval");
        let mut eval: Vec<String> = vec!["eval".into()];
        eval.extend(base.clone());
        eval.extend([
            "--agent".into(),
            hrl_dir.join("checkpoints").join("agent").to_str().unwrap().into(),
            "--episodes".into(),
            "4".into(),
            "--horizon".into(),
            "20".into(),
            "--out".into(),
            eval_dir.to_str().unwrap().into(),
        ]);
        let eval_args: Vec<&str> = eval.iter().map(String::as_str).collect();
        assert_success(&carl_lab(&eval_args), "eval");
        root
    };

    let first = run_once("first");
    let second = run_once("second");
    assert_dirs_identical(&first, &second, "full pipeline rerun");
}
