//! Independent oracles shared by the property tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use deepattr::evaluator::*;
use deepattr::localization::{cam, grad_cam, min_max};
use deepattr::model_zoo::{build_primary, build_secondary, ModelGraph};
use deepattr::preprocess::Representation;
use deepattr::rng::{seeded, substream};
use deepattr::nn::layers::{avg_pool2d, conv2d, dense, global_avg_pool};
use deepattr::nn::{sigmoid_bce, softmax_ce, BatchNorm2d, Conv2d, Dense, Layer, Mode, Sequential};
use deepattr::Tensor;
use rand::Rng;

pub const SOURCES: [&str; 3] = ["gm0", "gm1", "gm2"];

/// Scores biased towards the threshold so ties and flips are common.
fn score(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.5,
        1 => 0.0,
        2 => 1.0,
        _ => rng.random_range(0.0..1.0),
    }
}

pub fn random_table(seed: u64, n: usize) -> Vec<PredictionRecord> {
    let mut rng = seeded(seed);
    let truths = ["real", "gm0", "gm1", "gm2"];
    (0..n)
        .map(|i| {
            let sec: BTreeMap<String, f64> = SOURCES.iter().map(|s| (s.to_string(), score(&mut rng))).collect();
            let truth = truths[rng.random_range(0..truths.len())];
            PredictionRecord::new(format!("img{i}"), truth, score(&mut rng), sec)
        })
        .collect()
}

/// Brute-force counts straight from the raw scores.
pub fn oracle_counts(records: &[PredictionRecord], source: Option<&str>) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        let (pred, rel) = match source {
            None => (r.primary > 0.5, r.truth != "real"),
            Some(s) => (r.secondaries[s] > 0.5, r.truth == s),
        };
        if pred && rel {
            tp += 1;
        } else if pred {
            fp += 1;
        } else if rel {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

pub fn oracle_prf(c: (usize, usize, usize, usize)) -> (f64, f64, f64) {
    let (tp, fp, fn_, _) = c;
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

pub fn oracle_decision(r: &PredictionRecord) -> String {
    if r.primary <= 0.5 {
        return "real".into();
    }
    let mut best: Option<(&str, f64)> = None;
    for s in SOURCES {
        let v = r.secondaries[s];
        if v > 0.5 && best.is_none_or(|(_, b)| v > b) {
            best = Some((s, v));
        }
    }
    best.map_or("real".into(), |(s, _)| s.to_string())
}

/// Checks one record table against every oracle; returns the first mismatch.
pub fn check_table(records: &[PredictionRecord]) -> Result<(), String> {
    for r in records {
        let pos: Vec<&str> = SOURCES.iter().copied().filter(|s| r.secondaries[*s] > 0.5).collect();
        let expect = (
            r.primary > 0.5,
            r.primary > 0.5 && pos.is_empty(),
            pos.len() > 1,
            r.primary <= 0.5 && !pos.is_empty(),
        );
        let got = (r.primary_positive, r.failed_attribution, r.multiple_attribution, r.contradiction);
        if expect != got {
            return Err(format!("{}: flags {got:?}, oracle {expect:?}", r.id));
        }
        if r.positive_attributions.iter().map(String::as_str).collect::<Vec<_>>() != pos {
            return Err(format!("{}: positive attributions differ", r.id));
        }
        if multiclass_decision(r) != oracle_decision(r) {
            return Err(format!("{}: multiclass {} vs {}", r.id, multiclass_decision(r), oracle_decision(r)));
        }
    }
    let check = |name: &str, m: &BinaryMetrics, c: (usize, usize, usize, usize)| {
        let (p, r, f) = oracle_prf(c);
        if (m.tp, m.fp, m.fn_, m.tn) != c || m.precision != p || m.recall != r || m.f1 != f {
            return Err(format!("{name}: {m:?} vs counts {c:?}"));
        }
        Ok(())
    };
    check("detection", &binary_metrics(records, &Positive::AnyFake), oracle_counts(records, None))?;
    for s in SOURCES {
        check(s, &binary_metrics(records, &Positive::Source(s.into())), oracle_counts(records, Some(s)))?;
    }
    let n = records.len() as f64;
    let cr = records
        .iter()
        .filter(|r| r.primary <= 0.5 && SOURCES.iter().any(|s| r.secondaries[*s] > 0.5))
        .count() as f64
        / n;
    if contradiction_rate(records) != cr {
        return Err(format!("CR {} vs {cr}", contradiction_rate(records)));
    }
    let acc = records.iter().filter(|r| oracle_decision(r) == r.truth).count() as f64 / n;
    if multiclass_accuracy(records) != acc {
        return Err(format!("ACC {} vs {acc}", multiclass_accuracy(records)));
    }
    let ext: Vec<PredictionRecord> = records
        .iter()
        .map(|r| PredictionRecord::new(r.id.clone(), "gm3", r.primary, r.secondaries.clone()))
        .collect();
    let det = records.iter().filter(|r| r.primary > 0.5).count() as f64 / n;
    if external_accuracy(&ext, &ExternalTask::Detection).map_err(|e| e.to_string())? != det {
        return Err("detection EXA".into());
    }
    for s in SOURCES {
        let spec = records.iter().filter(|r| r.secondaries[s] <= 0.5).count() as f64 / n;
        if external_accuracy(&ext, &ExternalTask::Attribution(s.into())).map_err(|e| e.to_string())? != spec {
            return Err(format!("attribution EXA {s}"));
        }
    }
    Ok(())
}

pub fn random_input(shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Primary and secondary in f64 with randomized batchnorm statistics so the
/// eval-mode path is non-trivial.
pub fn cam_models(seed: u64, size: usize) -> (ModelGraph<f64>, ModelGraph<f64>) {
    let p: ModelGraph<f64> = build_primary(Representation::Pixel, size, &mut substream(seed, "p")).unwrap();
    let s = build_secondary(&p, &mut substream(seed, "s")).unwrap();
    let mut rng = substream(seed, "bn");
    let mut jitter = |g: &ModelGraph<f64>| {
        let mut g = g.clone();
        for layer in &mut g.net.layers {
            for (field, t) in layer.state_mut() {
                for v in t.data_mut() {
                    *v = match field {
                        "running_var" | "gamma" => rng.random_range(0.5..1.5),
                        "weight" => *v,
                        _ => rng.random_range(-0.2..0.2),
                    };
                }
            }
        }
        g
    };
    (jitter(&p), jitter(&s))
}

/// Largest violation of the CAM/logit identity, largest violation of the
/// Grad-CAM relation, and how many Grad-CAM comparisons had a non-constant map,
/// over `probes` random inputs (each probing a primary and a secondary).
pub fn cam_identity_errors(probes: usize, size: usize) -> (f64, f64, usize) {
    let (mut id_err, mut grad_err, mut informative) = (0.0f64, 0.0f64, 0);
    for i in 0..probes as u64 {
        let (p, s) = cam_models(i, size);
        let x = random_input([3, size, size], 1000 + i);
        let xb = Tensor::stack(&[&x]).unwrap();
        let feats = p.branch_features(&xb).unwrap().index_axis0(0);
        for (g, input) in [(&p, &x), (&s, &feats)] {
            let m = cam(g, input, 0, "o").unwrap();
            let deepattr::nn::Layer::Dense(d) = g.net.layers.last().unwrap() else { unreachable!() };
            let logit = g.logits(&Tensor::stack(&[input]).unwrap()).unwrap().data()[0];
            id_err = id_err.max((m.raw_mean() + d.bias.data()[0] - logit).abs());
            let gc = grad_cam(g, input, 0, "o").unwrap();
            let relu: Vec<f64> = m.raw.iter().map(|v| v.max(0.0)).collect();
            let expect = min_max(&relu);
            informative += usize::from(expect.iter().any(|&v| v != 0.5));
            for (a, b) in gc.normalized.iter().zip(&expect) {
                grad_err = grad_err.max((a - b).abs());
            }
        }
    }
    (id_err, grad_err, informative)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops straight from the definition of padded cross-correlation.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize) -> Tensor<f64> {
    let [b, c, h, wd] = *x.shape() else { panic!() };
    let [co, ci, k, _] = *w.shape() else { panic!() };
    assert_eq!(c, ci);
    let pad = k as isize / 2;
    let ho = (h + 2 * pad as usize - k) / stride + 1;
    let wo = (wd + 2 * pad as usize - k) / stride + 1;
    let mut out = vec![0.0; b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + i) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![b, co, ho, wo], out).unwrap()
}

pub fn random_layer(kind: usize, c: usize, rng: &mut impl Rng) -> (Layer<f64>, usize) {
    match kind {
        0 => {
            let co = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let bias = rng.random_bool(0.5).then(|| rand_tensor(&[co], rng));
            (
                Layer::Conv2d(Conv2d::new(rand_tensor(&[co, c, 3, 3], rng), bias, stride).unwrap()),
                co,
            )
        }
        1 => {
            let mut bn = BatchNorm2d::new(c);
            bn.gamma = rand_tensor(&[c], rng).map(|v| v + 1.5);
            bn.beta = rand_tensor(&[c], rng);
            bn.running_mean = rand_tensor(&[c], rng);
            bn.running_var = rand_tensor(&[c], rng).map(|v| v.abs() + 0.5);
            (Layer::BatchNorm2d(bn), c)
        }
        2 => (Layer::LeakyRelu { alpha: 0.2 }, c),
        3 => (Layer::AvgPool2d { size: 2 }, c),
        _ => unreachable!(),
    }
}

/// Scalar objective `sum(r ⊙ net(x))` with a fixed random projection `r`.
pub fn objective(net: &Sequential<f64>, x: &Tensor<f64>, r: &Tensor<f64>, mode: Mode) -> f64 {
    let mut n = net.clone();
    let y = n.forward(x, mode).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Gradient entries whose analytic and numeric values are both below this are
/// treated as exact zeros (e.g. a conv bias in front of train-mode batchnorm).
pub const NULL_GRADIENT: f64 = 1e-6;

/// Finite-difference check over `configs` random two-layer graphs with a head.
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    /// Worst relative error over entries of non-negligible magnitude.
    pub worst_rel: f64,
    /// Worst absolute error over null entries.
    pub worst_null_abs: f64,
    pub null_entries: usize,
    pub entries: usize,
    pub configs: usize,
}

fn fd_record(report: &mut FdReport, fd: f64, analytic: f64) {
    report.entries += 1;
    if fd.abs().max(analytic.abs()) < NULL_GRADIENT {
        report.null_entries += 1;
        report.worst_null_abs = report.worst_null_abs.max((fd - analytic).abs());
    } else {
        report.worst_rel = report.worst_rel.max(rel_err(fd, analytic));
    }
}

pub fn gradient_fd_error(seed: u64, configs: usize) -> FdReport {
    let mut rng = seeded(seed);
    let h = 1e-5;
    let mut report = FdReport::default();
    for trial in 0..configs {
        let b = rng.random_range(2..4);
        let c = rng.random_range(1..4);
        let size = 4;
        let first = trial % 4;
        let second = rng.random_range(0..4);
        let (l1, c1) = random_layer(first, c, &mut rng);
        let (l2, c2) = random_layer(second, c1, &mut rng);
        let mut layers = vec![l1, l2];
        // close each graph with a head so dense/GAP/flatten are covered too
        let spatial = Sequential::new(layers.clone())
            .output_shape(&[c, size, size])
            .unwrap();
        let feat = match trial % 3 {
            0 => {
                layers.push(Layer::GlobalAvgPool);
                c2
            }
            _ => {
                layers.push(Layer::Flatten);
                spatial.iter().product()
            }
        };
        let out = 2;
        layers.push(Layer::Dense(
            Dense::new(rand_tensor(&[out, feat], &mut rng), rand_tensor(&[out], &mut rng)).unwrap(),
        ));
        let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
        let net = Sequential::new(layers);
        let x = rand_tensor(&[b, c, size, size], &mut rng);
        let r = rand_tensor(&[b, out], &mut rng);

        let mut work = net.clone();
        work.forward(&x, mode).unwrap();
        let grads = work.backward(&r).unwrap();

        // parameters
        let n_params = net.params().len();
        for pi in 0..n_params {
            let len = net.params()[pi].len();
            for j in 0..len {
                let mut plus = net.clone();
                plus.params_mut()[pi].data_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data_mut()[j] -= h;
                let fd = (objective(&plus, &x, &r, mode) - objective(&minus, &x, &r, mode)) / (2.0 * h);
                fd_record(&mut report, fd, grads.params[pi].data()[j]);
            }
        }
        // input
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (objective(&net, &xp, &r, mode) - objective(&net, &xm, &r, mode)) / (2.0 * h);
            fd_record(&mut report, fd, grads.input.data()[j]);
        }
        report.configs += 1;
    }
    report
}

/// Largest absolute deviation of conv, pooling, dense and the two losses from
/// direct loop evaluations over `trials` random configurations.
pub fn forward_oracle_error(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (b, c) = (rng.random_range(1..4), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let co = rng.random_range(1..6);
        let k = [1, 3, 5][trial % 3];
        let stride = 1 + (trial / 3) % 2;
        let x = rand_tensor(&[b, c, h, w], &mut rng);
        let wt = rand_tensor(&[co, c, k, k], &mut rng);
        let bias = rand_tensor(&[co], &mut rng);
        let layer = Conv2d::new(wt.clone(), Some(bias.clone()), stride).unwrap();
        worst = worst.max(conv2d(&x, &layer).unwrap().max_abs_diff(&naive_conv(&x, &wt, Some(&bias), stride)));

        let (ph, pw) = (2 * rng.random_range(1..5), 2 * rng.random_range(1..5));
        let x = rand_tensor(&[b, c, ph, pw], &mut rng);
        let pooled = avg_pool2d(&x, 2).unwrap();
        let gap = global_avg_pool(&x).unwrap();
        for p in 0..b * c {
            let plane = &x.data()[p * ph * pw..][..ph * pw];
            for y in 0..ph / 2 {
                for xx in 0..pw / 2 {
                    let mut s = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += plane[(2 * y + dy) * pw + 2 * xx + dx];
                    }
                    worst = worst.max((pooled.data()[(p * ph / 2 + y) * pw / 2 + xx] - s / 4.0).abs());
                }
            }
            worst = worst.max((gap.data()[p] - plane.iter().sum::<f64>() / (ph * pw) as f64).abs());
        }

        let (n, i, o) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..5));
        let xin = rand_tensor(&[n, i], &mut rng);
        let dw = rand_tensor(&[o, i], &mut rng);
        let db = rand_tensor(&[o], &mut rng);
        let y = dense(&xin, &Dense::new(dw.clone(), db.clone()).unwrap()).unwrap();
        for r in 0..n {
            for q in 0..o {
                let acc = db.data()[q] + (0..i).map(|j| dw.data()[q * i + j] * xin.data()[r * i + j]).sum::<f64>();
                worst = worst.max((y.data()[r * o + q] - acc).abs());
            }
        }

        let z = rand_tensor(&[n, 1], &mut rng).map(|v| v * 8.0);
        let t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let bce = sigmoid_bce(&z, &Tensor::from_vec(vec![n, 1], t.clone()).unwrap()).unwrap();
        let direct = z
            .data()
            .iter()
            .zip(&t)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        worst = worst.max((bce.loss - direct).abs());

        let kc = rng.random_range(2..7);
        let z = rand_tensor(&[n, kc], &mut rng).map(|v| v * 5.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..kc)).collect();
        let ce = softmax_ce(&z, &labels).unwrap();
        let direct = z
            .data()
            .chunks(kc)
            .zip(&labels)
            .map(|(row, &l)| -(row[l].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / n as f64;
        worst = worst.max((ce.loss - direct).abs());
    }
    worst
}

/// O(S⁴) double sum over the orthonormal DCT-II definition.
pub fn naive_dct(x: &Tensor<f64>) -> Tensor<f64> {
    let n = x.shape()[0];
    let a = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let pi = std::f64::consts::PI;
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x.data()[i * n + j]
                        * (pi * (2 * i + 1) as f64 * u as f64 / (2 * n) as f64).cos()
                        * (pi * (2 * j + 1) as f64 * v as f64 / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = a(u) * a(v) * acc;
        }
    }
    Tensor::from_vec(vec![n, n], out).unwrap()
}
