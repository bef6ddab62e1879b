//! End-to-end checks of the `bevdistill` binary: subcommands, file
//! outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bevdistill"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let text = r#"{
  "grid": {"rho_min": 0.0, "rho_max": 16.0, "rho_bins": 16, "theta_bins": 16,
           "z_min": -2.0, "z_max": 2.0, "z_bins": 8},
  "c_v": 6, "c_b": 6,
  "vpd_layers": [2, 3],
  "lwd": {"enabled": true, "k_rho": 4, "k_theta": 6, "m": 2},
  "loss_weights": {"beta1": 2.0, "beta2": 2.0, "beta3": 1.0},
  "temperature": 2.0,
  "learning_rate": 0.01,
  "batch_size": 2,
  "epochs": 2,
  "seed": 13,
  "optimizer": "adam",
  "dataset": {"synthetic": {"scenes": 6, "val_scenes": 2}},
  "ablation": {"logit_kd": true, "vpd": true, "compression_mode": "z_conv",
               "domain_transfer": true, "cross_attention": true}
}"#;
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn expect_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());

    // teacher
    let teacher_dir = dir.path().join("teacher");
    let out = bin()
        .args(["pretrain-teacher", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&teacher_dir)
        .output()
        .unwrap();
    expect_success(&out);
    let teacher_ckpt = teacher_dir.join("teacher.json");
    assert!(teacher_ckpt.exists());
    let metrics = fs::read_to_string(teacher_dir.join("teacher_metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,wce,lovasz,vpd,lwd,logit,total,train_miou"));
    assert_eq!(metrics.lines().count(), 3); // header + 2 epochs

    // checkpoint save -> load -> save produces identical bytes
    let first = fs::read(&teacher_ckpt).unwrap();
    let reloaded = bevdistill::train::Checkpoint::load(&teacher_ckpt).unwrap();
    let resaved = teacher_dir.join("teacher_resaved.json");
    reloaded.save(&resaved).unwrap();
    assert_eq!(first, fs::read(&resaved).unwrap());

    // student
    let student_dir = dir.path().join("student");
    let out = bin()
        .args(["train-student", "--config"])
        .arg(&config)
        .arg("--teacher")
        .arg(&teacher_ckpt)
        .arg("--out")
        .arg(&student_dir)
        .output()
        .unwrap();
    expect_success(&out);
    let student_ckpt = student_dir.join("student.json");
    assert!(student_ckpt.exists());
    let metrics = fs::read_to_string(student_dir.join("student_metrics.csv")).unwrap();
    // every logged step satisfies the combined-objective arithmetic
    for line in metrics.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (wce, lovasz, vpd, lwd, logit, total) = (v[1], v[2], v[3], v[4], v[5], v[6]);
        let expect = wce + lovasz + 2.0 * vpd + 2.0 * lwd + 1.0 * logit;
        assert!((total - expect).abs() < 1e-10, "{line}");
    }

    // evaluate both checkpoints
    for (ckpt, tag) in [(&teacher_ckpt, "et"), (&student_ckpt, "es")] {
        let eval_dir = dir.path().join(tag);
        let out = bin()
            .args(["evaluate", "--config"])
            .arg(&config)
            .arg("--model")
            .arg(ckpt)
            .arg("--out")
            .arg(&eval_dir)
            .output()
            .unwrap();
        expect_success(&out);
        let report = fs::read_to_string(eval_dir.join("eval_report.csv")).unwrap();
        assert!(report.starts_with("class,iou"));
        assert!(report.contains("miou,"));
    }

    // export maps with labels + model
    let synth_dir = dir.path().join("data");
    let out = bin()
        .args(["synth-data", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&synth_dir)
        .output()
        .unwrap();
    expect_success(&out);
    assert!(synth_dir.join("scans/0000.bin").exists());
    assert!(synth_dir.join("labels/0000.label").exists());
    assert!(synth_dir.join("remap.json").exists());

    let maps_dir = dir.path().join("maps");
    let out = bin()
        .args(["export-maps", "--config"])
        .arg(&config)
        .arg("--scan")
        .arg(synth_dir.join("scans/0000.bin"))
        .arg("--labels")
        .arg(synth_dir.join("labels/0000.label"))
        .arg("--model")
        .arg(&student_ckpt)
        .arg("--out")
        .arg(&maps_dir)
        .output()
        .unwrap();
    expect_success(&out);
    for name in ["height_map.csv", "height_map.pgm", "error_map.csv", "error_map.pgm"] {
        assert!(maps_dir.join(name).exists(), "{name}");
    }
    let pgm = fs::read(maps_dir.join("height_map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    let csv = fs::read_to_string(maps_dir.join("height_map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn synth_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (out_dir, seed) in [(&a, "21"), (&b, "21"), (&c, "22")] {
        let out = bin()
            .args(["synth-data", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out_dir)
            .args(["--seed", seed])
            .output()
            .unwrap();
        expect_success(&out);
    }
    let read = |d: &Path| fs::read(d.join("scans/0000.bin")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // unknown key
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"mystery": 1}"#).unwrap();
    let out = bin()
        .args(["pretrain-teacher", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // vpd enabled with empty layer subset
    let config = small_config(dir.path());
    let mut value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    value["vpd_layers"] = serde_json::json!([]);
    let empty_layers = dir.path().join("empty_layers.json");
    fs::write(&empty_layers, serde_json::to_string(&value).unwrap()).unwrap();
    let out = bin()
        .args(["pretrain-teacher", "--config"])
        .arg(&empty_layers)
        .arg("--out")
        .arg(dir.path().join("o2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // CLI misuse is a validation error too
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    // a checkpoint that is not valid JSON
    let broken = dir.path().join("broken.json");
    fs::write(&broken, b"not json").unwrap();
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--model")
        .arg(&broken)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_subcommand_reports_cases() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out_dir = dir.path().join("grad");
    let out = bin()
        .args(["gradcheck", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    expect_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for case in [
        "domain_transfer",
        "cross_attention",
        "vpd_loss",
        "height_embed",
        "two_stage_compress",
        "lwd_loss",
        "weighted_ce",
        "lovasz_softmax",
        "logit_kd",
        "total_objective",
    ] {
        assert!(stdout.contains(case), "missing case {case}");
    }
    assert_eq!(stdout.matches("PASS").count(), 10);
    assert!(stdout.contains("all 10 cases pass"));
    assert!(out_dir.join("gradcheck.txt").exists());
}
