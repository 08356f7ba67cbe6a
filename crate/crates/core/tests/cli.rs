//! End-to-end command-line behaviour on a tiny fixture.

use std::path::Path;
use std::process::{Command, Output};

use deepattr::dataset::DatasetManifest;
use deepattr::evaluator::load_records;

fn deepattr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepattr"))
        .args(args)
        .env_remove("DEEPATTR_WORKSPACE")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> Output {
    deepattr(&[
        "synth", "--out", s(dir), "--size", "16", "--sources", "2", "--samples-per-source", "12", "--seed", seed,
    ])
}

#[test]
fn synth_is_repeatable_and_validates() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert!(synth(&a, "4").status.success());
    assert!(synth(&b, "4").status.success());
    let (ma, mb) = (DatasetManifest::load(&a).unwrap(), DatasetManifest::load(&b).unwrap());
    assert_eq!(ma.digest(), mb.digest());
    ma.validate().unwrap();
    for (ra, rb) in ma.rows.iter().zip(&mb.rows) {
        assert_eq!(std::fs::read(ma.abs_path(ra)).unwrap(), std::fs::read(mb.abs_path(rb)).unwrap());
    }
    assert_eq!(ma.external_sources(), ["gm2"]);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(deepattr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(deepattr(&["synth", "--out", "/tmp/x", "--size", "20"]).status.code(), Some(1));
}

#[test]
fn run_eval_probe_and_cam_grid() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let ws = t.path().join("ws");
    assert!(synth(&data, "0").status.success());
    let common = [
        "--dataset", s(&data), "--workspace", s(&ws), "--seeds", "2021", "--max-epochs", "1", "--batch-size", "8",
        "--individual", "jpeg", "--baselines", "gandct-conv",
    ];
    let run = |phases: &str, extra: &[&str]| {
        let mut args = vec!["run", "--phases", phases];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        deepattr(&args)
    };
    let out = run("II", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phase I"), "{}", String::from_utf8_lossy(&out.stderr));

    assert!(run("I,II", &[]).status.success());
    let p1 = ws.join("seed-2021/phase1/primary.dattr");
    let before = std::fs::read(&p1).unwrap();
    assert!(run("I,II,III,IV", &[]).status.success());
    assert_eq!(std::fs::read(&p1).unwrap(), before);
    assert!(ws.join("config.json").is_file());

    let bundle = ws.join("seed-2021/phase4/multi/bundle.dattr");
    let report = t.path().join("report.txt");
    let out = deepattr(&[
        "eval", "--bundle", s(&bundle), "--dataset", s(&data), "--splits", "test,val", "--augment", "jpeg", "--out",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    for label in ["# clean/test", "# clean/val", "# jpeg/test", "# jpeg/val", "EXA\tgm2\tdetection"] {
        assert!(text.contains(label), "missing {label}");
    }
    assert!(text.lines().any(|l| l.starts_with("detection\t") && l.split('\t').nth(1).unwrap().contains('.')));
    let records = load_records(&report.with_extension("clean.test.records.jsonl")).unwrap();
    assert!(!records.is_empty());
    let mismatch = deepattr(&[
        "eval", "--bundle", s(&bundle), "--dataset", s(&data), "--representation", "dct", "--out", s(&report),
    ]);
    assert_eq!(mismatch.status.code(), Some(1));

    let m = DatasetManifest::load(&data).unwrap();
    let img = m.abs_path(&m.rows[0]);
    let cams = t.path().join("cams");
    let missing = t.path().join("nope.png");
    let out = deepattr(&["probe", "--bundle", s(&bundle), s(&img), s(&missing), s(&img), "--cam", s(&cams)]);
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
    let sidecar = std::fs::read_to_string(cams.join("heatmaps.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 2 * 3);

    let grid = t.path().join("grid");
    let out = deepattr(&[
        "cam-grid", "--bundle", s(&bundle), "--dataset", s(&data), "--per-source", "4", "--out", s(&grid),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(grid.join("gm0/grid.primary.png").is_file());
    assert!(grid.join("real/grid.gm1.png").is_file());
}
