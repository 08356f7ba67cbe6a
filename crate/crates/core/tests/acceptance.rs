//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! `DEEPATTR_ACCEPTANCE=1,9,10` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use deepattr::augment::*;
use deepattr::dataset::{DatasetManifest, EncodedSplit, Split};
use deepattr::evaluator::*;
use deepattr::model_zoo::{build_primary, build_secondary, load_bundle, ModelBundle};
use deepattr::preprocess::{dct2d, idct2d, ImageBuffer, Representation};
use deepattr::rng::{seeded, substream};
use deepattr::synth_fixtures::{gen_dataset, FixtureConfig, DEFAULT_AMPLITUDE, SIBLING_CORRELATION};
use deepattr::trainer::*;
use rand::Rng;

mod common;
use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn numeric_core() -> Outcome {
    let t = Instant::now();
    let fwd = forward_oracle_error(101, 300);
    let fd = gradient_fd_error(102, 120);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        fwd < 1e-10 && fd.worst_rel < 1e-5 && fd.worst_null_abs < 1e-8 && fd.configs >= 100 && secs < 120.0,
        format!(
            "loop-oracle max abs err {fwd:.2e} (tol 1e-10); FD max rel err {:.2e} (tol 1e-5) over {} entries in {} configs, {} exact-zero entries within {:.1e} abs; {secs:.1}s (< 120s)",
            fd.worst_rel,
            fd.entries - fd.null_entries,
            fd.configs,
            fd.null_entries,
            fd.worst_null_abs
        ),
    )
}

fn dct() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(201);
    let (mut def, mut inv, mut parseval) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let x = rand_tensor(&[16, 16], &mut rng).map(|v| 127.5 + 127.5 * v);
        let d = dct2d(&x).unwrap();
        def = def.max(d.max_abs_diff(&naive_dct(&x)));
        inv = inv.max(idct2d(&d).unwrap().max_abs_diff(&x));
        let energy = |t: &deepattr::Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((energy(&x) - energy(&d)).abs() / energy(&x));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        def < 1e-9 && inv < 1e-9 && parseval < 1e-9 && secs < 30.0,
        format!("16x16 definition err {def:.2e}, round trip {inv:.2e}, Parseval rel {parseval:.2e} (tol 1e-9); {secs:.1}s (< 30s)"),
    )
}

fn augmentation() -> Outcome {
    let t = Instant::now();
    let cfg = AugmentationConfig::default();
    let mut rng = seeded(301);
    let trials = 100_000;
    let hits = (0..trials).filter(|_| draw_coins(&cfg, &mut rng).iter().any(|&c| c)).count();
    let rate = hits as f64 / trials as f64;
    let rate_ok = (rate - 0.9375).abs() <= 0.005;

    let kernel_err = cfg
        .blur_kernels
        .iter()
        .map(|&k| (gaussian_kernel(k).unwrap().iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let grey = ImageBuffer::filled(128, 128, [128, 128, 128]);
    let mut worst_var = 0.0f64;
    for (i, target) in [cfg.noise_variance.0, 10.0, cfg.noise_variance.1].into_iter().enumerate() {
        let (out, _) = noise_with_variance(&grey, target, &mut seeded(310 + i as u64)).unwrap();
        let d: Vec<f64> = out.data().iter().map(|&v| v as f64 - 128.0).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        worst_var = worst_var.max((var - target).abs() / target);
    }

    let mut half_ok = true;
    for (n, which) in [(10usize, Individual::Jpeg), (64, Individual::Crop), (37, Individual::Jpeg)] {
        let items: Vec<(String, ImageBuffer)> = (0..n)
            .map(|i| {
                let mut r = seeded(320 + i as u64);
                let data = (0..24 * 24 * 3).map(|_| r.random_range(0..=255)).collect();
                (format!("img{i}"), ImageBuffer::new(24, 24, 3, data).unwrap())
            })
            .collect();
        let out = individually_augment(&items, which, &cfg, 330).unwrap();
        let perturbed = out.iter().filter(|(_, rec)| !rec.is_empty()).count();
        let untouched_equal = items.iter().zip(&out).all(|((_, a), (b, rec))| !rec.is_empty() || a == b);
        half_ok &= perturbed == n.div_ceil(2) && untouched_equal;
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        rate_ok && kernel_err < 1e-12 && worst_var < 0.10 && half_ok && secs < 120.0,
        format!(
            ">=1 augmentation rate {} over {trials} (93.75 +/- 0.5); kernel sum err {kernel_err:.1e}; worst noise variance dev {}; exactly-half {half_ok}; {secs:.1}s (< 120s)",
            pct(rate),
            pct(worst_var)
        ),
    )
}

/// The spec-scale workspace shared by criteria 4, 5 and 7.
struct ToyRun {
    ws: Workspace,
    phase1_secs: f64,
    phase3_secs: f64,
}

fn toy_run(root: &Path) -> ToyRun {
    let data = root.join("data");
    let fixture = FixtureConfig {
        size: 64,
        sources: 3,
        amplitude: 8.0,
        samples_per_source: 600,
        seed: 0,
        ..FixtureConfig::default()
    };
    gen_dataset(&fixture, &data).unwrap();
    let cfg = RunConfig {
        dataset: data,
        workspace: root.join("ws"),
        model_seeds: vec![2021],
        individual: vec![Individual::Jpeg],
        baselines: Vec::new(),
        max_epochs: 30,
        ..RunConfig::default()
    };
    let ws = Workspace::open(cfg).unwrap();
    let mut secs = BTreeMap::new();
    for phase in Phase::ALL {
        let t = Instant::now();
        run_phase(&ws, phase, false).unwrap();
        secs.insert(phase, t.elapsed().as_secs_f64());
    }
    ToyRun {
        phase1_secs: secs[&Phase::I],
        phase3_secs: secs[&Phase::III],
        ws,
    }
}

fn detection(run: &ToyRun) -> Outcome {
    let bundle = load_bundle(&run.ws.phase1_path(2021)).unwrap();
    let records = evaluate_split(&bundle, &run.ws.manifest, Split::Test).unwrap();
    let m = binary_metrics(&records, &Positive::AnyFake);
    let tele = std::fs::read_to_string(run.ws.phase1_path(2021).with_file_name("primary.telemetry.jsonl")).unwrap();
    let epochs = tele.lines().count();
    outcome(
        m.f1 >= 0.95 && epochs <= 30 && run.phase1_secs < 600.0,
        format!("clean test F1 {} (>= 95%) after {epochs} epochs (<= 30); {:.0}s (< 600s)", pct(m.f1), run.phase1_secs),
    )
}

fn mean_recall(bundle: &ModelBundle, m: &DatasetManifest, sources: &[String]) -> f64 {
    let records = evaluate_split(bundle, m, Split::Test).unwrap();
    sources
        .iter()
        .map(|s| binary_metrics(&records, &Positive::Source(s.clone())).recall)
        .sum::<f64>()
        / sources.len() as f64
}

fn attribution(run: &ToyRun) -> Outcome {
    let bundle = load_bundle(&run.ws.phase3_path(2021)).unwrap();
    let records = evaluate_split(&bundle, &run.ws.manifest, Split::Test).unwrap();
    let external = evaluate_split(&bundle, &run.ws.manifest, Split::External).unwrap();
    let mut pass = run.phase3_secs < 900.0;
    let mut parts = Vec::new();
    for s in run.ws.sources() {
        let f1 = binary_metrics(&records, &Positive::Source(s.clone())).f1;
        let exa = external_accuracy(&external, &ExternalTask::Attribution(s.clone())).unwrap();
        pass &= f1 >= 0.90 && exa >= 0.95;
        parts.push(format!("{s} F1 {} EXA {}", pct(f1), pct(exa)));
    }
    outcome(
        pass,
        format!(
            "{} (F1 >= 90%, EXA on {} >= 95%); {:.0}s (< 900s)",
            parts.join(", "),
            run.ws.manifest.external_sources().join(","),
            run.phase3_secs
        ),
    )
}

fn degradation(run: &ToyRun) -> Outcome {
    let sources = run.ws.sources();
    let phase3 = load_bundle(&run.ws.phase3_path(2021)).unwrap();
    let multi = run.ws.dataset(Some(Policy::Multi)).unwrap();
    let jpeg = run.ws.dataset(Some(Policy::Individual(Individual::Jpeg))).unwrap();
    let clean = mean_recall(&phase3, &run.ws.manifest, &sources);
    let on_multi = mean_recall(&phase3, &multi, &sources);
    let refit = load_bundle(&run.ws.phase4_path(2021, Policy::Multi)).unwrap();
    let refit_multi = mean_recall(&refit, &multi, &sources);
    let jpeg_bundle = load_bundle(&run.ws.phase4_path(2021, Policy::Individual(Individual::Jpeg))).unwrap();
    let on_jpeg = mean_recall(&jpeg_bundle, &jpeg, &sources);
    let drop = clean - on_multi;
    let gap = (clean - on_jpeg).abs();
    outcome(
        drop >= 0.20 && gap <= 0.10,
        format!(
            "mean recall clean {} vs multi {} (drop {:.1}pp >= 20); phase-IV multi refit on multi {}; phase-IV jpeg on jpeg {} (gap {:.1}pp <= 10)",
            pct(clean),
            pct(on_multi),
            100.0 * drop,
            pct(refit_multi),
            pct(on_jpeg),
            100.0 * gap
        ),
    )
}

/// Outcome of one detection-then-attribution experiment on a small fixture.
struct Transfer {
    recall: BTreeMap<String, f64>,
    secondary_epochs: usize,
    scratch_epochs: usize,
}

const THRESHOLD: f64 = 0.1;
const CAP: usize = 30;

fn transfer(data: &Path, seed: u64, with_scratch: bool) -> Transfer {
    let m = DatasetManifest::load(data).unwrap();
    let size = m.size;
    let enc = |split| EncodedSplit::load(&m, split, Representation::Pixel, size, None).unwrap();
    let (tr, va, te) = (enc(Split::Train), enc(Split::Val), enc(Split::Test));
    let set = |e: &EncodedSplit, labels| TrainSet::shared(e.inputs.clone(), labels).unwrap();
    let cfg = |task| TrainConfig {
        max_epochs: CAP,
        patience: CAP,
        model_seed: seed,
        ..TrainConfig::new(task)
    };

    let mut primary = build_primary(Representation::Pixel, size, &mut substream(seed, "primary")).unwrap();
    train(&mut primary, &set(&tr, tr.detection_labels()), &set(&va, va.detection_labels()), &cfg(Task::Detection)).unwrap();
    primary.freeze();
    let mut bundle = ModelBundle::new(primary.clone(), None);
    let mut secondary_epochs = 0;
    for s in m.train_sources() {
        let mut sec = build_secondary(&primary, &mut substream(seed, &format!("secondary/{s}"))).unwrap();
        let (a, b) = (set(&tr, tr.source_labels(&s)), set(&va, va.source_labels(&s)));
        let report = train_secondary(&primary, &mut sec, &a, &b, &cfg(Task::Attribution), true).unwrap();
        if s == "gm0" {
            secondary_epochs = report.epochs_to(THRESHOLD).unwrap_or(CAP);
        }
        bundle.add_secondary(&s, sec).unwrap();
    }
    let records = records_for(&bundle, &te).unwrap();
    let recall = m
        .train_sources()
        .into_iter()
        .map(|s| {
            let r = binary_metrics(&records, &Positive::Source(s.clone())).recall;
            (s, r)
        })
        .collect();

    let mut scratch_epochs = 0;
    if with_scratch {
        let mut scratch = build_primary(Representation::Pixel, size, &mut substream(seed, "scratch")).unwrap();
        let report = train(&mut scratch, &set(&tr, tr.source_labels("gm0")), &set(&va, va.source_labels("gm0")), &cfg(Task::Attribution)).unwrap();
        scratch_epochs = report.epochs_to(THRESHOLD).unwrap_or(CAP);
    }
    Transfer {
        recall,
        secondary_epochs,
        scratch_epochs,
    }
}

fn small_fixture(root: &Path, name: &str, sibling: Option<f64>, amplitude: f64) -> std::path::PathBuf {
    let dir = root.join(name);
    let fixture = FixtureConfig {
        size: 32,
        sources: 3,
        samples_per_source: 300,
        amplitude,
        sibling,
        seed: 1,
        ..FixtureConfig::default()
    };
    gen_dataset(&fixture, &dir).unwrap();
    dir
}

fn transfer_efficiency(root: &Path) -> Outcome {
    let data = small_fixture(root, "indep", None, DEFAULT_AMPLITUDE);
    let runs: Vec<Transfer> = MODEL_SEEDS.iter().map(|&s| transfer(&data, s, true)).collect();
    let mean = |f: &dyn Fn(&Transfer) -> usize| runs.iter().map(f).sum::<usize>() as f64 / runs.len() as f64;
    let sec = mean(&|t| t.secondary_epochs);
    let scratch = mean(&|t| t.scratch_epochs);
    let ratio = sec / scratch.max(1e-9);
    outcome(
        ratio <= 0.5,
        format!(
            "epochs to val BCE <= {THRESHOLD}: secondary {sec:.1} vs from-scratch {scratch:.1} (ratio {ratio:.2} <= 0.5; seeds {MODEL_SEEDS:?}, cap {CAP})"
        ),
    )
}

fn sibling(root: &Path) -> Outcome {
    let data = small_fixture(root, "sibling", Some(SIBLING_CORRELATION), DEFAULT_AMPLITUDE);
    let runs: Vec<Transfer> = MODEL_SEEDS.iter().map(|&s| transfer(&data, s, false)).collect();
    let avg = |s: &str| runs.iter().map(|t| t.recall[s]).sum::<f64>() / runs.len() as f64;
    let pair = (avg("gm0") + avg("gm1")) / 2.0;
    let indep = avg("gm2");
    outcome(
        pair < indep,
        format!(
            "seed-averaged recall sibling pair {} < independent {}; per seed {:?}",
            pct(pair),
            pct(indep),
            runs.iter().map(|t| &t.recall).collect::<Vec<_>>()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..1000u64 {
        let n = 1 + (seed as usize * 7919) % 200;
        if let Err(e) = check_table(&random_table(9000 + seed, n)) {
            failures.push(format!("table {seed}: {e}"));
        }
    }
    outcome(
        failures.is_empty(),
        match failures.first() {
            None => "1000 randomized tables agree exactly with counting oracles".to_string(),
            Some(f) => format!("{} mismatching tables, first {f}", failures.len()),
        },
    )
}

fn cam_identities() -> Outcome {
    let (id, grad, informative) = cam_identity_errors(100, 64);
    outcome(
        id < 1e-9 && grad < 1e-9 && informative >= 100,
        format!("CAM mean + bias vs logit max err {id:.2e}; Grad-CAM vs ReLU CAM max err {grad:.2e} (tol 1e-9) over 100 probes, {informative} informative maps"),
    )
}

fn tiny_run(root: &Path) -> (Vec<(String, String)>, Lineage) {
    let data = root.join("data");
    let fixture = FixtureConfig {
        size: 16,
        sources: 2,
        samples_per_source: 16,
        seed: 11,
        ..FixtureConfig::default()
    };
    gen_dataset(&fixture, &data).unwrap();
    let cfg = RunConfig {
        dataset: data,
        workspace: root.join("ws"),
        max_epochs: 2,
        batch_size: 8,
        individual: vec![Individual::Jpeg, Individual::Crop],
        baselines: vec!["gandct-conv".into()],
        ..RunConfig::default()
    };
    let ws = Workspace::open(cfg).unwrap();
    for phase in Phase::ALL {
        run_phase(&ws, phase, false).unwrap();
    }
    let lineage = Lineage::load(&ws.root).unwrap();
    lineage.verify(&ws.root).unwrap();
    let digests = lineage.entries.iter().map(|e| (e.artifact.clone(), e.digest.clone())).collect();
    (digests, lineage)
}

fn determinism(root: &Path) -> Outcome {
    let (a, lineage) = tiny_run(&root.join("a"));
    let (b, _) = tiny_run(&root.join("b"));
    let mut linked = 0;
    let mut missing = Vec::new();
    for e in lineage.entries.iter().filter(|e| e.phase == Phase::IV) {
        let parent = e.parent.as_deref().and_then(|p| lineage.find(p));
        match parent {
            Some(p) if p.phase == Phase::II && p.models.get("primary") == e.models.get("primary") => linked += 1,
            Some(p) if p.phase == Phase::III && e.variant == "multi" => linked += 1,
            _ => missing.push(e.artifact.clone()),
        }
    }
    let phase4 = lineage.entries.iter().filter(|e| e.phase == Phase::IV).count();
    let individual_linked = lineage
        .entries
        .iter()
        .filter(|e| e.phase == Phase::IV && e.variant != "multi")
        .all(|e| e.parent.as_deref().and_then(|p| lineage.find(p)).is_some_and(|p| p.phase == Phase::II));
    outcome(
        a == b && missing.is_empty() && phase4 > 0 && individual_linked,
        format!(
            "{} artifacts, digests identical across runs: {}; {linked}/{phase4} phase-IV artifacts linked, individual variants to phase-II primaries: {individual_linked}",
            a.len(),
            a == b
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("DEEPATTR_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let mut toy: Option<Result<ToyRun, String>> = None;
    let mut results = Vec::new();
    let names = [
        "numeric-core oracles",
        "DCT correctness",
        "augmentation statistics",
        "toy end-to-end detection",
        "toy attribution",
        "transfer-learning efficiency",
        "augmentation degradation",
        "sibling-source confusability",
        "decision/metric oracles",
        "CAM identities",
        "determinism and lineage",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        if matches!(n, 4 | 5 | 7) && toy.is_none() {
            toy = Some(
                catch_unwind(AssertUnwindSafe(|| toy_run(&root.join("toy")))).map_err(|e| panic_text(&*e)),
            );
        }
        let res = catch_unwind(AssertUnwindSafe(|| match n {
            1 => numeric_core(),
            2 => dct(),
            3 => augmentation(),
            4 | 5 | 7 => match toy.as_ref().unwrap() {
                Err(e) => outcome(false, format!("toy pipeline failed: {e}")),
                Ok(run) => match n {
                    4 => detection(run),
                    5 => attribution(run),
                    _ => degradation(run),
                },
            },
            6 => transfer_efficiency(&root.join("c6")),
            8 => sibling(&root.join("c8")),
            9 => metric_oracles(),
            10 => cam_identities(),
            _ => determinism(&root.join("c11")),
        }))
        .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_text(&*e))));
        let verdict = if res.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [PRIMARY] {name}: {verdict} | {} | {:.1}s", res.detail, t.elapsed().as_secs_f64());
        results.push(res.pass);
    }
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

fn panic_text(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
