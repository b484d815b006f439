//! The `lca` binary end to end on synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lca::harness::{DatasetConfig, RunConfig, SyntheticSpec};
use lca::optim::{LayerOverride, OptimConfig};

fn toy(dir: &Path, run_id: &str) -> RunConfig {
    let mut cfg = RunConfig::mnist_fc_desk(run_id, 3);
    cfg.arch = vec![4, 8, 3];
    cfg.iterations = 60;
    cfg.dataset = DatasetConfig::Synthetic(SyntheticSpec {
        n: 300,
        d: 4,
        c: 3,
        separation: 3.0,
        seed: 1,
    });
    cfg.optimizer = OptimConfig::sgd(0.05, 0.9, 32);
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(format!("{}.toml", cfg.run_id));
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

fn lca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lca"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lca(args);
    assert!(
        out.status.success(),
        "lca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    lca(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_and_integrate(cfg_path: &Path) {
    ok(&["train", "-c", s(cfg_path)]);
    ok(&["lca", "-c", s(cfg_path)]);
}

fn read_losses(train_csv: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(train_csv).unwrap();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "train_loss").unwrap();
    rdr.records()
        .filter_map(|r| r.unwrap().get(col).and_then(|v| v.parse().ok()))
        .collect()
}

#[test]
fn pipeline_writes_reports_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(dir.path(), "toy");
    let p = write_config(dir.path(), &cfg);
    train_and_integrate(&p);
    let run = dir.path().join("toy");
    let lcam = run.join("toy.lcam");
    let traj = run.join("toy.lcat");
    let out = ok(&["analyze", "--lcam", s(&lcam), "--trajectory", s(&traj)]);
    assert!(out.contains("helped"), "{out}");

    let report = run.join("report");
    let mut csvs = 0;
    for e in std::fs::read_dir(&report).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "csv") {
            let text = std::fs::read_to_string(&path).unwrap();
            let first = text.lines().next().unwrap();
            assert!(first.starts_with("# run_id=toy, config_hash="), "{}: {first}", path.display());
            assert!(first.contains(&cfg.config_hash()), "{first}");
            assert!(first.contains("tol=0.001") && first.contains("max_depth=6"), "{first}");
            csvs += 1;
        }
    }
    assert!(csvs >= 5, "only {csvs} CSV reports");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["provenance"]["run_id"], "toy");

    for what in ["params", "layers"] {
        let o = dir.path().join(format!("{what}.csv"));
        ok(&["export", "--what", what, "--lcam", s(&lcam), "--out", s(&o)]);
        assert!(std::fs::read_to_string(&o).unwrap().starts_with("# run_id=toy"));
    }
    let o = dir.path().join("snap.csv");
    ok(&["export", "--what", "snapshot", "--trajectory", s(&traj), "--from", "60", "--out", s(&o)]);
    let o = dir.path().join("m.csv");
    let msg = ok(&["export", "--what", "matrix", "--lcam", s(&lcam), "--from", "2", "--to", "4", "--out", s(&o)]);
    assert!(msg.contains(&format!("wrote {} rows", 2 * 4 * 8 + 2 * 8 + 2 * 8 * 3 + 2 * 3)), "{msg}");
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for sub in ["a", "b"] {
        let d = dir.path().join(sub);
        std::fs::create_dir_all(&d).unwrap();
        let p = write_config(&d, &toy(&d, "same"));
        train_and_integrate(&p);
        let run = d.join("same");
        hashes.push((
            std::fs::read(run.join("same.lcat")).unwrap(),
            std::fs::read(run.join("same.lcam")).unwrap(),
        ));
    }
    assert!(hashes[0].0 == hashes[1].0, "trajectory files differ");
    assert!(hashes[0].1 == hashes[1].1, "LCA files differ");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "run_id = 3\n").unwrap();
    assert_eq!(code(&["train", "-c", s(&bad)]), 4);
    assert_eq!(code(&["train", "--desk", "--lr=-1"]), 4);
    assert_eq!(code(&["train", "--no-such-flag"]), 4);
    assert_eq!(code(&["--help"]), 0);

    let mut cfg = toy(dir.path(), "blowup");
    cfg.optimizer.lr = 1e300;
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&["train", "-c", s(&p)]), 3);

    let mut cfg = toy(dir.path(), "strict");
    cfg.lca.max_depth = 0;
    cfg.lca.gate_pct = 1e-9;
    let p = write_config(dir.path(), &cfg);
    ok(&["train", "-c", s(&p)]);
    assert_eq!(code(&["lca", "-c", s(&p)]), 2);
    // artifacts are kept for inspection
    assert!(dir.path().join("strict/strict.lcam").exists());

    assert_eq!(code(&["analyze", "--lcam", s(&dir.path().join("missing.lcam"))]), 1);
}

#[test]
fn fully_frozen_network_keeps_a_flat_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path(), "frozen");
    for l in 0..2 {
        cfg.optimizer = cfg.optimizer.with_layer(
            format!("dense_{l}"),
            LayerOverride {
                frozen: true,
                ..Default::default()
            },
        );
    }
    let p = write_config(dir.path(), &cfg);
    train_and_integrate(&p);
    let losses = read_losses(&dir.path().join("frozen/frozen.train.csv"));
    assert!(losses.len() >= 2);
    assert!(losses.iter().all(|l| l.to_bits() == losses[0].to_bits()), "{losses:?}");
    let o = dir.path().join("params.csv");
    ok(&["export", "--what", "params", "--lcam", s(&dir.path().join("frozen/frozen.lcam")), "--out", s(&o)]);
    let text = std::fs::read_to_string(&o).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    for r in rdr.records() {
        let r = r.unwrap();
        assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
    }
}

fn final_loss(dir: &Path, run_id: &str, separation: f64) -> f64 {
    let mut cfg = toy(dir, run_id);
    cfg.iterations = 300;
    if let DatasetConfig::Synthetic(spec) = &mut cfg.dataset {
        spec.separation = separation;
        spec.n = 600;
    }
    let p = write_config(dir, &cfg);
    ok(&["train", "-c", s(&p)]);
    *read_losses(&dir.join(run_id).join(format!("{run_id}.train.csv"))).last().unwrap()
}

#[test]
fn separation_controls_the_reachable_loss() {
    let dir = tempfile::tempdir().unwrap();
    let chance = final_loss(dir.path(), "chance", 0.0);
    assert!((chance - 3f64.ln()).abs() < 0.05, "loss {chance} vs ln 3");
    let easy = final_loss(dir.path(), "easy", 8.0);
    assert!(easy < 0.1, "loss {easy}");
}

#[test]
fn template_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["desk", "synthetic"] {
        let text = ok(&["template", "--kind", kind]);
        let cfg = RunConfig::from_toml(&text).unwrap();
        let p = dir.path().join(format!("{kind}.toml"));
        std::fs::write(&p, &text).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }
}

#[test]
fn experiment_summarizes_every_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy(dir.path(), "exp");
    cfg.iterations = 30;
    let p = write_config(dir.path(), &cfg);
    let out = ok(&["experiment", "-c", s(&p), "--preset", "freeze-last", "--seeds", "0,1", "--sequential"]);
    assert!(out.contains("baseline") && out.contains("freeze-last"), "{out}");
    let exp = dir.path().join("exp-freeze-last");
    for f in ["comparison.csv", "runs.csv", "experiment.json"] {
        assert!(exp.join(f).exists(), "{f} missing");
    }
    assert_eq!(code(&["experiment", "-c", s(&p), "--preset", "nope"]), 4);
}
