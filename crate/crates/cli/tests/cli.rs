use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ddan_core::TrainConfig;

fn ddan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ddan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path) {
    let o = ddan(&[
        "generate-data",
        "--domains",
        "4",
        "--ids-per-domain",
        "6",
        "--images-per-id",
        "4",
        "--shape",
        "3x16x16",
        "--seed",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn read_kv(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn help_lists_every_config_key_once() {
    for sub in ["train", "pipeline"] {
        let text = stdout(&ddan(&[sub, "--help"]));
        for key in TrainConfig::KEYS {
            let flag = format!("--{} <VALUE>", key.replace('_', "-"));
            assert_eq!(text.matches(&flag).count(), 1, "{sub}: {flag}");
        }
        assert!(text.contains("--config <FILE>"));
    }
    // every flag in the training section maps back to a key
    let text = stdout(&ddan(&["train", "--help"]));
    let section = text.split("Training configuration:").nth(1).unwrap();
    let flags: Vec<&str> = section
        .lines()
        .filter_map(|l| l.trim_start().split_whitespace().next())
        .filter(|w| w.starts_with("--") && *w != "--config")
        .collect();
    assert_eq!(flags.len(), TrainConfig::KEYS.len());
    for f in flags {
        assert!(TrainConfig::KEYS.contains(&f[2..].replace('-', "_").as_str()), "{f}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ddan(&["train", "--data", "x", "--out", "y", "--no-such-flag", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = ddan(&["train", "--data", "x", "--out", "y", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate") && stderr(&o).contains("batch_p"));

    let o = ddan(&["train", "--data", "x", "--out", "y", "--epochs", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn data_and_numeric_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = ddan(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("manifest.tsv"));

    let bad = dir.path().join("feats.bin");
    fs::write(&bad, b"not a feature file").unwrap();
    let o = ddan(&["plot", "--features", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let data = dir.path().join("data");
    generate(&data);
    let o = ddan(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("nan").to_str().unwrap(),
        "--epochs",
        "3",
        "--base-lr",
        "1e300",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn subcommands_chain_and_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    generate(&dir.path().join("data"));
    for out in ["a", "b"] {
        let o = ddan(&["train", "--data", &p("data"), "--only-domains", "0,1,2", "--out", &p(out), "--epochs", "2", "--seed", "5", "--central", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let la = fs::read_to_string(dir.path().join("a/losses.tsv")).unwrap();
    assert_eq!(la, fs::read_to_string(dir.path().join("b/losses.tsv")).unwrap());
    assert_eq!(la.lines().next().unwrap(), "epoch\tstep\tide\ttriplet\tda_t\tda_d\tse\tlr");
    assert_eq!(
        fs::read(dir.path().join("a/ckpt_0002.bin")).unwrap(),
        fs::read(dir.path().join("b/ckpt_0002.bin")).unwrap()
    );

    // resume one more epoch
    let o = ddan(&["train", "--data", &p("data"), "--only-domains", "0,1,2", "--out", &p("a"), "--resume", &p("a/ckpt_0002.bin"), "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("a/ckpt_0003.bin").exists());
    assert!(fs::read_to_string(dir.path().join("a/losses.tsv")).unwrap().lines().any(|l| l.starts_with("3\t")));

    let o = ddan(&["embed", "--checkpoint", &p("b/ckpt_0002.bin"), "--data", &p("data"), "--out", &p("f/feats.bin")]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = ddan(&["select-central", "--features", &p("f/feats.bin"), "--projections", "16", "--seed", "3", "--matrix-out", &p("m.tsv"), "--data", &p("data")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let central: u32 = text.lines().last().unwrap().strip_prefix("central: ").unwrap().parse().unwrap();
    assert!(central < 4);
    assert_eq!(fs::read_to_string(p("m.tsv")).unwrap().lines().count(), 5);
    let manifest = ddan_core::data_synth::DatasetManifest::read(p("data")).unwrap();
    assert_eq!(manifest.central_domain, central);

    let report = p("report.tsv");
    let o = ddan(&["evaluate", "--checkpoint", &p("b/ckpt_0002.bin"), "--data", &p("data"), "--only-domains", "3", "--splits", "3", "--seed", "2", "--report", &report]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(&report).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().last().unwrap().starts_with("mean\t"));

    let o = ddan(&["plot", "--features", &p("f/feats.bin"), "--out", &p("plot")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("plot/proj.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 96);
    assert!(dir.path().join("plot/proj.png").exists());
}

#[test]
fn pipeline_with_forced_central_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ddan(&[
        "pipeline",
        "--out",
        out.to_str().unwrap(),
        "--domains",
        "4",
        "--ids-per-domain",
        "6",
        "--images-per-id",
        "4",
        "--shape",
        "3x16x16",
        "--epochs",
        "1",
        "--central",
        "2",
        "--splits",
        "2",
        "--ablation",
        "ide,ide+tri,ide+tri+da,full",
        "--ablation-seeds",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("central: 2 (forced)"));
    let run = read_kv(&out.join("run.tsv"));
    let get = |k: &str| run.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    assert_eq!(get("central").as_deref(), Some("forced"));
    assert_eq!(get("central_domain").as_deref(), Some("2"));
    assert!(!out.join("matrix.tsv").exists());
    for f in ["losses.tsv", "report.tsv", "proj.csv", "proj.png", "ablation.tsv", "data/manifest.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ablation = fs::read_to_string(out.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = ablation.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["ide", "ide+tri", "ide+tri+da", "full"]) {
        assert_eq!(row.split('\t').next(), Some(name));
    }
}

#[test]
fn pipeline_selects_a_central_domain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ddan(&[
        "pipeline",
        "--out",
        out.to_str().unwrap(),
        "--domains",
        "4",
        "--ids-per-domain",
        "6",
        "--images-per-id",
        "4",
        "--shape",
        "3x16x16",
        "--epochs",
        "1",
        "--baseline-epochs",
        "1",
        "--splits",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = read_kv(&out.join("run.tsv"));
    let get = |k: &str| run.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
    assert_eq!(get("central"), "selected");
    // domain 3 is held out
    assert!(get("central_domain").parse::<u32>().unwrap() < 3);
    assert_eq!(fs::read_to_string(out.join("matrix.tsv")).unwrap().lines().count(), 4);
    assert!(out.join("feats.bin").exists());
}
