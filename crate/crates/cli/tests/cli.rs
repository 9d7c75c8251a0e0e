use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
num_points = 300
num_ref_views = 12
num_query_views = 3
num_holdout_views = 1
descriptor_dim = 12
world_seed = 4
code_dim = 8
blocks = 2
codes_per_block = 4
encoder_hidden = 8
block_hidden = 8
head_hidden = 8
epochs_stage1 = 2
epochs_stage2 = 1
epochs_adapt = 1
passes_per_epoch = 1
ransac_iters = 50
";

fn neumap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neumap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = neumap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    ok(&["gen", "--config", c, "--out", p(&d.join("world"))]);
    let data = d.join("world/dataset.nmds");
    let manifest: String = std::fs::read_to_string(d.join("world/manifest.json")).unwrap();
    assert!(manifest.contains("\"reference_views\": 12"));

    for run in ["a", "b"] {
        let r = d.join(run);
        ok(&["train", "--config", c, "--data", p(&data), "--out", p(&r.join("s1"))]);
        ok(&[
            "prune", "--config", c, "--scene", p(&r.join("s1/scene.nmap")), "--retain", "0.5",
            "--out", p(&r.join("pruned.nmap")), "--report", p(&r.join("prune.csv")),
        ]);
        ok(&[
            "finetune", "--config", c, "--data", p(&data), "--scene", p(&r.join("pruned.nmap")),
            "--weights", p(&r.join("s1/weights.nmwt")), "--out", p(&r.join("s2")),
        ]);
        let summary = ok(&[
            "eval", "--config", c, "--data", p(&data), "--scene", p(&r.join("s2/scene.nmap")),
            "--weights", p(&r.join("s2/weights.nmwt")), "--out", p(&r.join("eval")),
        ]);
        assert!(summary.contains("(0.25 m, 2 deg)"));
        ok(&[
            "localize", "--config", c, "--data", p(&data), "--scene", p(&r.join("s2/scene.nmap")),
            "--weights", p(&r.join("s2/weights.nmwt")), "--out", p(&r.join("poses.csv")),
        ]);
        ok(&[
            "adapt", "--config", c, "--set", "init_seed=5", "--data", p(&data),
            "--weights", p(&r.join("s2/weights.nmwt")), "--out", p(&r.join("adapted")),
        ]);
    }
    for f in [
        "s1/scene.nmap", "s1/weights.nmwt", "s1/train_log.csv", "pruned.nmap", "prune.csv",
        "s2/scene.nmap", "s2/weights.nmwt", "eval/queries.csv", "eval/summary.csv", "poses.csv",
        "adapted/scene.nmap",
    ] {
        let (a, b) = (std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let poses = std::fs::read_to_string(d.join("a/poses.csv")).unwrap();
    assert_eq!(poses.lines().count(), 4);
    assert_eq!(poses.lines().next().unwrap().split(',').count(), 18);

    let scene = d.join("a/s2/scene.nmap");
    let info = ok(&["inspect", "--scene", p(&scene), "--weights", p(&d.join("a/s2/weights.nmwt"))]);
    assert!(info.contains("size_bytes"));
    let voxel = info
        .lines()
        .find(|l| l.starts_with("  ") && l.contains("origin"))
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();
    let out = neumap(&[
        "heatmap", "--data", p(&data), "--scene", p(&scene), "--weights", p(&d.join("a/s2/weights.nmwt")),
        "--view", "0", "--voxel", &voxel, "--block", "0", "--code", "0", "--out", p(&d.join("hm")),
    ]);
    // code 0 may have been pruned; either way the outcome is a clean exit code
    match out.status.code() {
        Some(0) => assert!(d.join("hm.csv").exists()),
        Some(2) => assert!(String::from_utf8_lossy(&out.stderr).contains("pruned")),
        other => panic!("heatmap exit {other:?}"),
    }
}

#[test]
fn exit_codes() {
    assert_eq!(neumap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(neumap(&["gen"]).status.code(), Some(1));
    assert_eq!(neumap(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.cfg");
    std::fs::write(&bad, "num_pointz = 5\n").unwrap();
    let out = neumap(&["gen", "--config", p(&bad), "--out", p(&d.join("w"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_pointz"));
    assert_eq!(neumap(&["gen", "--set", "num_points=-3", "--out", p(&d.join("w"))]).status.code(), Some(2));
    assert_eq!(neumap(&["inspect", "--scene", p(&d.join("missing.nmap"))]).status.code(), Some(2));
    std::fs::write(d.join("junk.nmap"), b"NMAPjunk").unwrap();
    assert_eq!(neumap(&["inspect", "--scene", p(&d.join("junk.nmap"))]).status.code(), Some(2));

    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&["gen", "--config", p(&cfg), "--out", p(&d.join("w"))]);
    let out = neumap(&[
        "train", "--config", p(&cfg), "--set", "lr_agnostic=1e300", "--set", "lr_codes=1e300",
        "--data", p(&d.join("w/dataset.nmds")), "--out", p(&d.join("t")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
