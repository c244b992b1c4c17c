use std::path::PathBuf;
use std::process::{Command, Output};

fn ijepa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ijepa"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn ijepa")
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(ijepa(&["--help"]).status.code(), Some(0));
    assert_eq!(ijepa(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(ijepa(&[]).status.code(), Some(2));
    assert_eq!(ijepa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ijepa(&["pretrain"]).status.code(), Some(2));
    assert_eq!(ijepa(&["gradcheck", "--probes", "many"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = ijepa(&[
        "pretrain",
        "--config",
        "/nonexistent/run.cfg",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn bad_config_key_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[optim]\nbatch_size = 8\nlr_peek = 1\n").unwrap();
    let out = ijepa(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:3:") && err.contains("optim.lr_peek"), "{err}");
}

#[test]
fn sample_masks_matches_golden() {
    let out = ijepa(&["sample-masks", "--grid", "14x14", "--seed", "7", "--count", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sample_masks_14x14_seed7.json");
    let stdout = String::from_utf8(out.stdout).unwrap();
    if std::env::var_os("IJEPA_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &stdout).unwrap();
    }
    assert_eq!(stdout, std::fs::read_to_string(&golden).unwrap());
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["samples"].as_array().unwrap().len(), 3);
    assert!(!out.stderr.is_empty());
}

#[test]
fn sample_masks_rejects_bad_grid() {
    let out = ijepa(&["sample-masks", "--grid", "14by14"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let mut files = vec![configs().join("vit_h14.cfg"), configs().join("desk.cfg")];
    for e in std::fs::read_dir(configs().join("ablations")).unwrap() {
        files.push(e.unwrap().path());
    }
    assert!(files.len() >= 11);
    for f in files {
        ijepa_parse(&f);
    }
}

fn ijepa_parse(path: &std::path::Path) {
    ijepa::config::parse_config(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

#[test]
fn pretrain_probe_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(
        &cfg,
        "[run]\nmax_steps = 2\n[data]\ncount = 32\n[optim]\nbatch_size = 8\nepochs = 2\nwarmup_epochs = 1\n\
         [probe]\nepochs = 5\ndata_count = 80\nlr_grid = 0.1\nwd_grid = 0.001\nheads = linear\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = ijepa(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("ckpt_2").exists() && run.join("manifest.json").exists());

    let out = ijepa(&[
        "probe",
        "--ckpt",
        run.join("ckpt_2").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["probe"]["best"]["accuracy"].as_f64().is_some());

    let out = ijepa(&["report", "--run", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("step,loss"));
    assert_eq!(csv.lines().count(), 3);
}
