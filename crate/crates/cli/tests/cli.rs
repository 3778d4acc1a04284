use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn qfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("qfit runs")
}

fn ok(args: &[&str]) -> String {
    let out = qfit(args);
    assert!(
        out.status.success(),
        "qfit {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Reference config shrunk to seconds of work, written into `dir`.
fn small_config(dir: &Path, edit: impl FnOnce(&mut toml::Table)) -> PathBuf {
    let mut t: toml::Table = ok(&["default-config"]).parse().unwrap();
    t.insert("n_train".into(), 1500.into());
    t.insert("n_val".into(), 200.into());
    t.insert("n_test".into(), 600.into());
    t.insert("n_init_repetitions".into(), 2.into());
    t.insert("n_fitref_voxels".into(), 40.into());
    t.insert("output_dir".into(), dir.join("out").to_string_lossy().into_owned().into());
    let train = t["train"].as_table_mut().unwrap();
    train.insert("max_epochs".into(), 4.into());
    train.insert("patience_epochs".into(), 4.into());
    edit(&mut t);
    let path = dir.join("config.toml");
    std::fs::write(&path, toml::to_string(&t).unwrap()).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn simulate_writes_every_split_reproducibly() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    let stdout = ok(&["simulate", "--config", cfg]);

    let data = dir.path().join("out/adc/data");
    let mut files: Vec<PathBuf> = Vec::new();
    for snr in ["30", "20", "10", "7.5", "5"] {
        for split in ["train", "val", "test"] {
            let p = data.join(format!("snr_{snr}/{split}.csv"));
            assert!(p.exists(), "{}", p.display());
            files.push(p);
        }
    }
    files.push(data.join("MANIFEST.json"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("MANIFEST.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 15);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    // Every estimate is printed as a signed percentage off the truth.
    for line in stdout.lines().filter(|l| l.contains("sigma_estimated")) {
        let pct: f64 = line.rsplit('(').next().unwrap().trim_end_matches("%)").parse().unwrap();
        assert!(pct.abs() < 2.0, "{line}");
    }

    let before: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    ok(&["simulate", "--config", cfg]);
    let after: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(before == after, "rerun changed outputs");
}

#[test]
fn full_pipeline_on_one_snr() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    let one = ["--config", cfg, "--snr", "10"];
    let run = |cmd: &str| ok(&[&[cmd][..], &one[..]].concat());
    run("simulate");
    run("train");

    let train = dir.path().join("out/adc/train/snr_10");
    for loss in ["mse", "nlr"] {
        let history = read_csv(&train.join(format!("history_{loss}.csv")));
        assert!(history.len() <= 4 + 1);
        assert_eq!(&history[0][0], "0");
    }
    let init = read_csv(&train.join("common_init.csv"));
    let losses: Vec<f64> = init.iter().map(|r| r[2].parse().unwrap()).collect();
    let chosen = init.iter().position(|r| &r[3] == "true").unwrap();
    assert!(losses.iter().all(|&l| losses[chosen] <= l));

    let checkpoints: Vec<Vec<u8>> = ["common_init", "mse", "nlr"]
        .iter()
        .map(|n| std::fs::read(train.join(format!("{n}.json"))).unwrap())
        .collect();
    let manifest = std::fs::read(dir.path().join("out/adc/train/MANIFEST.json")).unwrap();
    run("train");
    for (n, before) in ["common_init", "mse", "nlr"].iter().zip(&checkpoints) {
        assert!(&std::fs::read(train.join(format!("{n}.json"))).unwrap() == before, "{n} changed");
    }
    assert_eq!(std::fs::read(dir.path().join("out/adc/train/MANIFEST.json")).unwrap(), manifest);

    run("evaluate");
    let eval = read_csv(&dir.path().join("out/adc/evaluate/snr_10/eval_nlr.csv"));
    for param in ["S0", "D"] {
        let rows = eval
            .iter()
            .filter(|r| &r[0] == "marginal" && &r[1] == param && &r[3] == "bias_mean")
            .count();
        assert_eq!(rows, 10, "{param}");
    }

    run("fitref");
    let fit = read_csv(&dir.path().join("out/adc/fitref/snr_10/fit_mle.csv"));
    let schema = |rows: &[csv::StringRecord]| -> BTreeSet<(String, String)> {
        rows.iter().map(|r| (r[0].to_string(), r[3].to_string())).collect()
    };
    assert_eq!(schema(&fit), schema(&eval));
    let header = csv::Reader::from_path(dir.path().join("out/adc/fitref/snr_10/fit_lsq.csv"))
        .unwrap()
        .headers()
        .unwrap()
        .clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["section", "param", "key", "metric", "value"]);
    assert!(dir.path().join("out/adc/fitref/snr_10/agreement_nlr_mle.json").exists());
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |t| {
        t.insert("snr_list".into(), toml::Value::Array(vec![10.0.into()]));
        t["train"].as_table_mut().unwrap().insert("max_epochs".into(), 1.into());
        t["train"].as_table_mut().unwrap().insert("patience_epochs".into(), 1.into());
    });
    let cfg = cfg.to_str().unwrap();
    ok(&["simulate", "--config", cfg]);
    ok(&["train", "--config", cfg]);
    ok(&["simulate", "--config", cfg, "--model", "ivim"]);
    let ivim_train = dir.path().join("out/ivim/train/snr_10");
    std::fs::create_dir_all(&ivim_train).unwrap();
    for loss in ["mse", "nlr"] {
        std::fs::copy(
            dir.path().join(format!("out/adc/train/snr_10/{loss}.json")),
            ivim_train.join(format!("{loss}.json")),
        )
        .unwrap();
    }
    let out = qfit(&["evaluate", "--config", cfg, "--model", "ivim"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("adc network"));
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("not_a_dir");
    std::fs::write(&blocker, "").unwrap();
    let cfg = small_config(dir.path(), |t| {
        t.insert("output_dir".into(), blocker.join("out").to_string_lossy().into_owned().into());
    });
    let out = qfit(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!qfit(&["train"]).status.success());
}

#[test]
fn evaluate_without_checkpoints_fails() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = cfg.to_str().unwrap();
    ok(&["simulate", "--config", cfg, "--snr", "5"]);
    let out = qfit(&["evaluate", "--config", cfg, "--snr", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("qfit train"));
}

#[test]
fn bessel_check_table() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    ok(&["bessel-check", "--config", cfg.to_str().unwrap()]);
    let rows = read_csv(&dir.path().join("out/bessel_check/bessel_check.csv"));
    let col = |r: &csv::StringRecord, i: usize| -> f64 { r[i].parse().unwrap() };
    let mut series_beyond_100 = Vec::new();
    for r in &rows {
        let x = col(r, 0);
        assert!(!r[6].contains("proposed"), "proposed method non-finite at {x}");
        assert!(col(r, 2) < 1e-6, "x = {x}");
        if x == 0.1 {
            assert!(col(r, 3) >= 1e3 * col(r, 2).max(f64::EPSILON));
        }
        if x >= 100.0 {
            series_beyond_100.push(col(r, 4));
        }
    }
    assert!(series_beyond_100.windows(2).all(|w| w[1] >= w[0]), "{series_beyond_100:?}");
    assert!(series_beyond_100.last().unwrap() > &series_beyond_100[0]);
    assert!(dir.path().join("out/bessel_check/MANIFEST.json").exists());
}
