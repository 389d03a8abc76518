use std::path::Path;
use std::process::{Command, Output};

fn noisycl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisycl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_blobs(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[data]\ndataset = \"blobs\"\ntasks = 1\nblobs_train_per_class = 150\nblobs_test_per_class = 50\n\
         [model]\nhidden = [8, 8]\n\
         [buffers]\ndelay = 100\nclean = 60\nnoisy = 30\n\
         [warmup]\nepochs = 2\n\
         [finetune]\nepochs = 2\n\
         [run]\nseeds = [0, 1]\n",
    )
    .unwrap();
    path
}

#[test]
fn dump_config_prints_defaults() {
    let out = noisycl(&["dump-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in [
        "delay = 500",
        "clean = 500",
        "noisy = 1000",
        "clean_intake = 25",
        "noisy_intake = 50",
        "momentum = 0.9",
        "weight_decay = 0.0005",
    ] {
        assert!(text.contains(needle), "missing `{needle}` in\n{text}");
    }
}

#[test]
fn unknown_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[warmup]\nepochz = 3\n").unwrap();
    let out = noisycl(&["run", "-c", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epochz"), "{err}");
}

#[test]
fn bad_flag_prints_usage() {
    let out = noisycl(&["run", "--frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_data_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    std::fs::write(&cfg, "[data]\nmnist_dir = \"/nonexistent/mnist\"\n").unwrap();
    let out = noisycl(&["run", "-c", cfg.to_str().unwrap(), "-o", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/mnist/train-images-idx3-ubyte"), "{err}");
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_blobs(dir.path());
    let sweep = dir.path().join("sweep");
    let out = noisycl(&[
        "sweep",
        "-c",
        cfg.to_str().unwrap(),
        "--rates",
        "0.2,0.4",
        "-o",
        sweep.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells: Vec<_> = ["symmetric_0.2", "symmetric_0.4"]
        .iter()
        .map(|c| sweep.join(c))
        .collect();
    for cell in &cells {
        for file in [
            "config.resolved",
            "metrics.json",
            "timing.json",
            "separation_log.csv",
            "finetune_log.csv",
        ] {
            assert!(cell.join(file).exists(), "{} lacks {file}", cell.display());
        }
    }
    assert_eq!(std::fs::read_dir(&sweep).unwrap().count(), 2);

    let report = dir.path().join("report");
    let mut args = vec!["report", "--plots", "-o", report.to_str().unwrap()];
    args.extend(cells.iter().map(|c| c.to_str().unwrap()));
    let out = noisycl(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(report.join("symmetric_0.2_accuracy.svg").exists());
    let svg = std::fs::read_to_string(report.join("symmetric_0.4_accuracy.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cells[0].join("metrics.json")).unwrap()).unwrap();
    let seeds = metrics["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 2);
    let mean = seeds.iter().map(|s| s["overall_acc"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((mean - metrics["mean_overall_acc"].as_f64().unwrap()).abs() < 1e-9);
}
