//! Drives the installed binary the way a user would: real subcommands,
//! real config files, real exit codes.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_docpress");

fn micro_config_json() -> &'static str {
    r#"{
  "reading": {"image_h": 40, "image_w": 96, "cell": 8, "min_lines": 1, "max_lines": 2,
              "min_chars": 2, "max_chars": 5, "noise": 0.08, "background_styles": 4,
              "train": 6, "val": 3, "test": 3, "master_seed": 7},
  "kie": {"image_h": 40, "image_w": 96, "cell": 8, "min_lines": 1, "max_lines": 3,
          "min_chars": 2, "max_chars": 8, "noise": 0.08, "background_styles": 4,
          "train": 4, "val": 2, "test": 2, "master_seed": 7},
  "teacher_model": {"image_h": 40, "image_w": 96, "patch": 8, "d_enc": 16, "d_dec": 16,
                    "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 2, "d_ff": 32,
                    "vocab_size": 65, "max_len": 40, "adapter_bottleneck": null},
  "small_model": {"image_h": 40, "image_w": 96, "patch": 8, "d_enc": 8, "d_dec": 16,
                  "n_enc_layers": 1, "n_dec_layers": 1, "n_heads": 2, "d_ff": 32,
                  "vocab_size": 65, "max_len": 40, "adapter_bottleneck": 8},
  "train": {"upstream_steps": 3, "distill_steps": 3, "kie_steps": 2, "batch_size": 2,
            "eval_every": 2, "eval_samples": 2, "warmup_steps": 2},
  "sparsity": 0.5, "probe_samples": 2, "master_seed": 11, "zero_timings": true
}"#
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary should launch")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn help_lists_the_subcommands() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "train", "evaluate", "cka", "report"] {
        assert!(text.contains(cmd), "--help missing {cmd}");
    }
}

#[test]
fn contract_errors_exit_one_and_io_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("micro.json");
    std::fs::write(&config, micro_config_json()).unwrap();
    let out_dir = dir.path().join("out");

    let bad_variant = run(&["train", "gigantic"], &config, &out_dir);
    assert_eq!(bad_variant.status.code(), Some(1));
    assert!(stderr_of(&bad_variant).contains("unknown variant"));

    let missing_dep = run(&["train", "hole"], &config, &out_dir);
    assert_eq!(missing_dep.status.code(), Some(1));
    assert!(stderr_of(&missing_dep).contains("train teacher"), "{}", stderr_of(&missing_dep));

    let missing_config = run(&["gen-data"], &dir.path().join("absent.json"), &out_dir);
    assert_eq!(missing_config.status.code(), Some(2));

    let mangled = dir.path().join("mangled.json");
    std::fs::write(&mangled, "{ not json").unwrap();
    let bad_config = run(&["gen-data"], &mangled, &out_dir);
    assert_eq!(bad_config.status.code(), Some(2));
    assert!(stderr_of(&bad_config).contains("mangled.json"));
}

#[test]
fn micro_experiment_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("micro.json");
    std::fs::write(&config, micro_config_json()).unwrap();
    let out_dir = dir.path().join("out");

    let gen = run(&["gen-data"], &config, &out_dir);
    assert!(gen.status.success(), "{}", stderr_of(&gen));
    assert!(out_dir.join("data").join("reading.train.jsonl").exists());
    assert!(out_dir.join("data").join("kie.test.jsonl").exists());

    let train = run(&["train", "teacher"], &config, &out_dir);
    assert!(train.status.success(), "{}", stderr_of(&train));
    assert!(out_dir.join("runs").join("teacher").join("model.dnth").exists());
    assert!(out_dir.join("runs").join("teacher").join("history.csv").exists());
    assert!(out_dir.join("runs").join("teacher").join("kie").join("model.dnth").exists());

    let eval = run(&["evaluate", "teacher", "reading", "test"], &config, &out_dir);
    assert!(eval.status.success(), "{}", stderr_of(&eval));
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("mean N-TED accuracy"), "{stdout}");
    assert!(out_dir.join("eval").join("teacher.reading.test.csv").exists());

    let cka = run(&["cka", "teacher", "teacher"], &config, &out_dir);
    assert!(cka.status.success(), "{}", stderr_of(&cka));
    let stdout = String::from_utf8_lossy(&cka.stdout);
    assert!(stdout.contains("1.0000"), "self-similarity index: {stdout}");

    // The ledger still lacks the KIE evaluation, so the report must
    // refuse and name the exact command.
    let report = run(&["report"], &config, &out_dir);
    assert_eq!(report.status.code(), Some(1));
    assert!(stderr_of(&report).contains("evaluate teacher kie test"), "{}", stderr_of(&report));

    let eval_kie = run(&["evaluate", "teacher", "kie", "test"], &config, &out_dir);
    assert!(eval_kie.status.success(), "{}", stderr_of(&eval_kie));

    let report = run(&["report"], &config, &out_dir);
    assert!(report.status.success(), "{}", stderr_of(&report));
    let md = String::from_utf8_lossy(&report.stdout);
    assert!(md.contains("| teacher |"), "{md}");
    assert!(out_dir.join("report").join("report.md").exists());
    assert!(out_dir.join("report").join("config.csv").exists());
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("micro.json");
    std::fs::write(&config, micro_config_json()).unwrap();

    // Same seed twice → identical manifests; different seed → different.
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    for (out, seed) in [(&out_a, "5"), (&out_b, "5"), (&out_c, "6")] {
        let st = Command::new(BIN)
            .args(["gen-data", "--seed", seed])
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    let read = |p: &Path| std::fs::read(p.join("data").join("reading.train.jsonl")).unwrap();
    assert_eq!(read(&out_a), read(&out_b));
    assert_ne!(read(&out_a), read(&out_c));
}
