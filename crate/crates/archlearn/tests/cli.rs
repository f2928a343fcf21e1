use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use archlearn::checkpoint::load_checkpoint;
use archlearn::commands::RunReport;
use serde_json::Value;

const BLOBS: &str = r#"{
  "arch": "fc:12 fc:10 out:3",
  "data": {"source": "blobs", "classes": 3, "dim": 6, "separation": 6.0, "seed": 5,
           "train_per_class": 60, "val_per_class": 10, "test_per_class": 20},
  "train": {"lr": 0.05, "gate_lr": 2.0, "batch_size": 16, "epochs": 6, "seed": 3, "eval_every": 5},
  "reg": {"mode": "suggest", "reference_width": 10, "base_lambda3": 0.02}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_archlearn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "-q", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    run(&args)
}

fn report(out: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &a, &[]).status.success());
    assert!(train(&cfg, &b, &[]).status.success());
    for f in ["model.ckpt", "pruned.ckpt", "metrics.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r = report(&a);
    assert_eq!(r.config_hash.len(), 64);
    assert_eq!(r.config["arch"], "fc:12 fc:10 out:3");
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.contains(&format!("# config_hash: {}", r.config_hash)));
    assert!(csv.contains("iter,loss,r_binarize,r_complexity,phi_json,val_acc"));
    assert!(csv.contains("# preprocessing:"));
}

#[test]
fn learned_run_shrinks_and_baseline_does_not() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let al = dir.path().join("al");
    assert!(train(&cfg, &al, &["--set", "train.epochs=30"]).status.success());
    let r = report(&al);
    assert!(r.arch.phi_after.iter().sum::<usize>() < r.arch.phi_before.iter().sum::<usize>(), "{:?}", r.arch);
    assert!(r.arch.params_after < r.arch.params_before);
    assert!(r.surgery_deviation <= 1e-4);
    let pruned = load_checkpoint(&al.join("pruned.ckpt")).unwrap().network;
    assert_eq!(archlearn_core::surgery::param_count(&pruned), r.arch.params_after);

    let base = dir.path().join("base");
    let out = train(
        &cfg,
        &base,
        &["--set", "reg.mode=none", "--set", "train.init.learn_width=false", "--set", "train.init.learn_depth=false"],
    );
    assert!(out.status.success());
    let r = report(&base);
    assert_eq!(r.arch.phi_after, r.arch.phi_before);
    assert!(r.arch.acc_after.unwrap() > 0.9, "{:?}", r.arch.acc_after);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let (full, part, rest) = (dir.path().join("full"), dir.path().join("part"), dir.path().join("rest"));
    assert!(train(&cfg, &full, &["--set", "train.epochs=4"]).status.success());
    assert!(train(&cfg, &part, &["--set", "train.epochs=2"]).status.success());
    let resume = part.join("model.ckpt");
    let out = train(&cfg, &rest, &["--set", "train.epochs=4", "--resume", resume.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = load_checkpoint(&full.join("model.ckpt")).unwrap();
    let b = load_checkpoint(&rest.join("model.ckpt")).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!((a.iteration, a.rng_state, a.momentum), (b.iteration, b.rng_state, b.momentum));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), &BLOBS.replace("fc:12 fc:10 out:3", "fc:12 fc:10"));
    let o = train(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), &BLOBS.replace("\"lr\": 0.05", "\"lr\": \"x\""));
    let o = train(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.lr") && err.contains("line 5"), "{err}");

    let o = train(&dir.path().join("missing.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(4));

    let cfg = write_config(dir.path(), BLOBS);
    let o = train(&cfg, &out, &["--set", "train.lr=1e6", "--set", "train.epochs=50"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(out.join("last_finite.ckpt").exists());

    assert_eq!(run(&["report"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn svd_baseline_full_rank_keeps_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let out = dir.path().join("r");
    assert!(train(&cfg, &out, &["--set", "reg.mode=none"]).status.success());
    let ck = out.join("model.ckpt");
    let svd = |extra: &[&str]| {
        let mut args =
            vec!["svd-baseline", "--checkpoint", ck.to_str().unwrap(), "-c", cfg.to_str().unwrap(), "--layer", "1"];
        args.extend(extra);
        run(&args)
    };
    let o = svd(&["--rank", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((r["acc_after"].as_f64().unwrap() - r["acc_before"].as_f64().unwrap()).abs() <= 0.0005);
    assert_eq!(r["params_after"], r["params_before"].as_u64().unwrap() - 120 + 10 * 22);

    let o = svd(&["--match-params", "300"]);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["params_after"].as_u64().unwrap() >= 300);
    assert_eq!(svd(&["--rank", "0"]).status.code(), Some(3));
    assert_eq!(svd(&["--rank", "11"]).status.code(), Some(3));
}

#[test]
fn sweeps_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &BLOBS.replace("fc:12 fc:10 out:3", "(fc:8)*n out:4").replace("\"classes\": 3", "\"classes\": 4"),
    );
    let out = dir.path().join("depth");
    let o = run(&["sweep-depth", "-q", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--n", "1,3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep_depth.json")).unwrap()).unwrap();
    let rows = s["rows"].as_array().unwrap();
    assert_eq!(rows[0]["initial_depth"], 2);
    assert_eq!(rows[1]["initial_depth"], 4);
    for r in rows {
        assert!(r["final_depth"].as_u64() <= r["initial_depth"].as_u64());
    }

    let out = dir.path().join("classes");
    let o = run(&[
        "sweep-classes",
        "-q",
        "-c",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--classes",
        "2,4",
        "--set",
        "arch_vars.n=1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep_classes.json")).unwrap()).unwrap();
    assert_eq!(s["rows"].as_array().unwrap().len(), 2);
    assert_eq!(s["rows"][1]["k"], 4);

    let m1 = out.join("k2/metrics.csv");
    let m2 = out.join("k4/metrics.csv");
    let plot = dir.path().join("plot.csv");
    let o = run(&[
        "report",
        m1.to_str().unwrap(),
        m2.to_str().unwrap(),
        m1.to_str().unwrap(),
        "--plot",
        plot.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let merged: Value = serde_json::from_slice(&o.stdout).unwrap();
    let groups = merged.as_object().unwrap();
    assert_eq!(groups.len(), 2);
    assert!(groups.values().any(|g| g["runs"].as_array().unwrap().len() == 2));
    let plot = std::fs::read_to_string(plot).unwrap();
    assert!(plot.starts_with("run,config_hash,iter,loss,phi_0,phi_1\n"), "{plot}");
}

#[test]
fn parallel_sweep_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let (a, b) = (dir.path().join("seq"), dir.path().join("par"));
    let c = cfg.to_str().unwrap();
    assert!(run(&["sweep-classes", "-q", "-c", c, "--out", a.to_str().unwrap(), "--classes", "2,3"]).status.success());
    assert!(run(&["sweep-classes", "-q", "-c", c, "--out", b.to_str().unwrap(), "--classes", "2,3", "--jobs", "2"])
        .status
        .success());
    for f in ["k2/model.ckpt", "k3/metrics.csv", "sweep_classes.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn suggest_lambdas_prints_weights() {
    let o = run(&["suggest-lambdas", "--arch", "conv:20x5x5 pool:2 conv:50x5x5 pool:2 fc:500 out:10"]);
    assert!(o.status.success());
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["lambda3"], 1e-5);
    assert_eq!(r["lambda1"], 2.5e-5);
}
