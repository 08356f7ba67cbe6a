//! Verdicts and metrics: flag derivation, multiclass compatibility mode,
//! precision/recall/F1, external accuracy and self-contradiction rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, EncodedSplit, Split, REAL_SOURCE};
use crate::error::{Error, Result};
use crate::model_zoo::{ModelBundle, ModelGraph};
use crate::preprocess::{model_input, standardize, ImageBuffer, Representation};
use crate::tensor::Tensor;

/// Sigmoid outputs strictly above this value are positive.
pub const THRESHOLD: f64 = 0.5;

const PROBE_CHUNK: usize = 64;

pub fn is_positive(score: f64) -> bool {
    score > THRESHOLD
}

/// Scores of one image plus the flags derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// `real` or a source id.
    pub truth: String,
    pub primary: f64,
    pub secondaries: BTreeMap<String, f64>,
    pub primary_positive: bool,
    pub positive_attributions: BTreeSet<String>,
    pub failed_attribution: bool,
    pub multiple_attribution: bool,
    pub contradiction: bool,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, truth: impl Into<String>, primary: f64, secondaries: BTreeMap<String, f64>) -> Self {
        let primary_positive = is_positive(primary);
        let positive_attributions: BTreeSet<String> = secondaries
            .iter()
            .filter(|(_, &s)| is_positive(s))
            .map(|(k, _)| k.clone())
            .collect();
        PredictionRecord {
            id: id.into(),
            truth: truth.into(),
            primary,
            failed_attribution: primary_positive && positive_attributions.is_empty(),
            multiple_attribution: positive_attributions.len() > 1,
            contradiction: !primary_positive && !positive_attributions.is_empty(),
            primary_positive,
            positive_attributions,
            secondaries,
        }
    }

    /// Recomputes the flags from the scores; false when a stored flag disagrees.
    pub fn is_consistent(&self) -> bool {
        *self == PredictionRecord::new(self.id.clone(), self.truth.clone(), self.primary, self.secondaries.clone())
    }

    /// Highest-scoring secondary; ties go to the first name in order.
    pub fn top_source(&self) -> Option<&str> {
        self.secondaries
            .iter()
            .fold(None, |best: Option<(&String, f64)>, (k, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k, v)),
            })
            .map(|(k, _)| k.as_str())
    }

    pub fn is_fake(&self) -> bool {
        self.truth != REAL_SOURCE
    }
}

/// Compatibility multiclass verdict: `real` unless the primary fires and at
/// least one secondary fires, in which case the top-scoring source.
pub fn multiclass_decision(record: &PredictionRecord) -> String {
    if !record.primary_positive || record.failed_attribution {
        return REAL_SOURCE.to_string();
    }
    record.top_source().unwrap_or(REAL_SOURCE).to_string()
}

/// Scores a batch `(B, C, S, S)` through the primary and every secondary.
pub fn probe_batch(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<Vec<(f64, BTreeMap<String, f64>)>> {
    let primary = bundle.primary.predict(x)?;
    let feats = bundle.primary.branch_features(x)?;
    let mut per_source = Vec::new();
    for (name, g) in bundle.secondaries() {
        per_source.push((name, g.predict(&feats)?));
    }
    Ok(primary
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = per_source.iter().map(|(n, v)| (n.to_string(), v[i][0])).collect();
            (p[0], s)
        })
        .collect())
}

/// Probes one already-encoded image `(C, S, S)` in representation `repr`.
pub fn probe(
    bundle: &ModelBundle,
    id: &str,
    truth: &str,
    repr: Representation,
    x: &Tensor<f32>,
) -> Result<PredictionRecord> {
    let want = bundle.primary.input.representation;
    if repr != want {
        return Err(Error::InvalidArgument(format!(
            "image is in {repr} representation, bundle expects {want}"
        )));
    }
    let batch = Tensor::stack(&[x])?;
    let (p, s) = probe_batch(bundle, &batch)?.pop().expect("one row");
    Ok(PredictionRecord::new(id, truth, p, s))
}

/// Encodes a decoded image for `bundle` (resize, representation, spectrum stats).
pub fn encode_for(bundle: &ModelBundle, img: &ImageBuffer) -> Result<Tensor<f32>> {
    let spec = bundle.primary.input;
    model_input(&standardize(img, spec.size)?, spec.representation, bundle.stats.as_ref())
}

pub fn probe_image(bundle: &ModelBundle, id: &str, truth: &str, img: &ImageBuffer) -> Result<PredictionRecord> {
    let x = encode_for(bundle, img)?;
    probe(bundle, id, truth, bundle.primary.input.representation, &x)
}

/// Records for every row of `split`.
pub fn evaluate_split(bundle: &ModelBundle, manifest: &DatasetManifest, split: Split) -> Result<Vec<PredictionRecord>> {
    let spec = bundle.primary.input;
    let enc = EncodedSplit::load(manifest, split, spec.representation, spec.size, bundle.stats.as_ref())?;
    records_for(bundle, &enc)
}

pub fn records_for(bundle: &ModelBundle, enc: &EncodedSplit) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(enc.len());
    for (c, chunk) in enc.inputs.chunks(PROBE_CHUNK).enumerate() {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        for (j, (p, s)) in probe_batch(bundle, &Tensor::stack(&refs)?)?.into_iter().enumerate() {
            let i = c * PROBE_CHUNK + j;
            out.push(PredictionRecord::new(enc.ids[i].clone(), enc.sources[i].clone(), p, s));
        }
    }
    Ok(out)
}

/// Argmax class names of a softmax model over `classes`.
pub fn classify(model: &ModelGraph<f32>, classes: &[String], enc: &EncodedSplit) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(enc.len());
    for chunk in enc.inputs.chunks(PROBE_CHUNK) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        for row in model.predict(&Tensor::stack(&refs)?)? {
            if row.len() != classes.len() {
                return Err(Error::Shape(format!("model emits {} classes, {} named", row.len(), classes.len())));
            }
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            out.push(classes[best].clone());
        }
    }
    Ok(out)
}

/// Which images count as relevant (and which prediction counts as positive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Positive {
    /// Detection: every fake is relevant; the primary decides.
    AnyFake,
    /// Attribution: images of this source are relevant; its secondary decides.
    Source(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

impl BinaryMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        BinaryMetrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            degenerate: tp + fp == 0 || tp + fn_ == 0,
        }
    }
}

fn predicted(record: &PredictionRecord, positive: &Positive) -> bool {
    match positive {
        Positive::AnyFake => record.primary_positive,
        Positive::Source(s) => record.secondaries.get(s).is_some_and(|&v| is_positive(v)),
    }
}

fn relevant(record: &PredictionRecord, positive: &Positive) -> bool {
    match positive {
        Positive::AnyFake => record.is_fake(),
        Positive::Source(s) => &record.truth == s,
    }
}

pub fn binary_metrics(records: &[PredictionRecord], positive: &Positive) -> BinaryMetrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for r in records {
        match (predicted(r, positive), relevant(r, positive)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    BinaryMetrics::from_counts(tp, fp, fn_, tn)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExternalTask {
    /// Sensitivity of the primary.
    Detection,
    /// Specificity of the named secondary.
    Attribution(String),
}

/// External accuracy over records that all come from one held-out source.
pub fn external_accuracy(records: &[PredictionRecord], task: &ExternalTask) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no external records".into()))?;
    if let Some(r) = records.iter().find(|r| r.truth != first.truth) {
        return Err(Error::InvalidArgument(format!(
            "external records mix sources {} and {}",
            first.truth, r.truth
        )));
    }
    let hits = match task {
        ExternalTask::Detection => records.iter().filter(|r| r.primary_positive).count(),
        ExternalTask::Attribution(s) => {
            if &first.truth == s {
                return Err(Error::InvalidArgument(format!("source {s} is not external to its own secondary")));
            }
            records.iter().filter(|r| !predicted(r, &Positive::Source(s.clone()))).count()
        }
    };
    Ok(hits as f64 / records.len() as f64)
}

pub fn contradiction_rate(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.contradiction).count() as f64 / records.len() as f64
}

pub fn multiclass_accuracy(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| multiclass_decision(r) == r.truth).count() as f64 / records.len() as f64
}

/// Every metric for one evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub count: usize,
    pub detection: BinaryMetrics,
    pub attribution: BTreeMap<String, BinaryMetrics>,
    pub multiclass_accuracy: f64,
    pub contradiction_rate: f64,
    pub failed_attribution_rate: f64,
    pub multiple_attribution_rate: f64,
    /// Detection EXA per external source.
    pub exa_detection: BTreeMap<String, f64>,
    /// Attribution EXA per (external source, secondary).
    pub exa_attribution: BTreeMap<String, BTreeMap<String, f64>>,
    pub degenerate: bool,
}

impl MetricsReport {
    /// `external` may be empty; its records are grouped by true source.
    pub fn compute(label: &str, records: &[PredictionRecord], external: &[PredictionRecord]) -> Result<Self> {
        let sources: BTreeSet<&String> = records.iter().flat_map(|r| r.secondaries.keys()).collect();
        let detection = binary_metrics(records, &Positive::AnyFake);
        let attribution: BTreeMap<String, BinaryMetrics> = sources
            .iter()
            .map(|s| ((*s).clone(), binary_metrics(records, &Positive::Source((*s).clone()))))
            .collect();
        let mut groups: BTreeMap<&str, Vec<PredictionRecord>> = BTreeMap::new();
        for r in external {
            groups.entry(&r.truth).or_default().push(r.clone());
        }
        let mut exa_detection = BTreeMap::new();
        let mut exa_attribution = BTreeMap::new();
        for (src, rs) in &groups {
            exa_detection.insert(src.to_string(), external_accuracy(rs, &ExternalTask::Detection)?);
            let mut per = BTreeMap::new();
            for s in rs[0].secondaries.keys() {
                per.insert(s.clone(), external_accuracy(rs, &ExternalTask::Attribution(s.clone()))?);
            }
            exa_attribution.insert(src.to_string(), per);
        }
        let n = records.len().max(1) as f64;
        Ok(MetricsReport {
            label: label.to_string(),
            count: records.len(),
            degenerate: detection.degenerate || attribution.values().any(|m| m.degenerate),
            detection,
            attribution,
            multiclass_accuracy: multiclass_accuracy(records),
            contradiction_rate: contradiction_rate(records),
            failed_attribution_rate: records.iter().filter(|r| r.failed_attribution).count() as f64 / n,
            multiple_attribution_rate: records.iter().filter(|r| r.multiple_attribution).count() as f64 / n,
            exa_detection,
            exa_attribution,
        })
    }

    /// Table-style text with percentages to one decimal.
    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut s = String::new();
        let _ = writeln!(s, "# {} (n={})", self.label, self.count);
        let _ = writeln!(s, "task\tPRC\tREC\tF1");
        let mut row = |name: &str, m: &BinaryMetrics| {
            let _ = writeln!(s, "{name}\t{}\t{}\t{}", pct(m.precision), pct(m.recall), pct(m.f1));
        };
        row("detection", &self.detection);
        for (k, m) in &self.attribution {
            row(k, m);
        }
        let _ = writeln!(s, "ACC\t{}", pct(self.multiclass_accuracy));
        let _ = writeln!(s, "CR\t{}", pct(self.contradiction_rate));
        let _ = writeln!(s, "FAILED\t{}", pct(self.failed_attribution_rate));
        let _ = writeln!(s, "MULTI\t{}", pct(self.multiple_attribution_rate));
        for (src, v) in &self.exa_detection {
            let _ = writeln!(s, "EXA\t{src}\tdetection\t{}", pct(*v));
            for (sec, a) in &self.exa_attribution[src] {
                let _ = writeln!(s, "EXA\t{src}\t{sec}\t{}", pct(*a));
            }
        }
        if self.degenerate {
            let _ = writeln!(s, "note\tzero-denominator precision or recall reported as 0.0");
        }
        s
    }
}

/// Writes records as JSON lines.
pub fn save_records(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads records written by [`save_records`], rejecting inconsistent flags.
pub fn load_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: PredictionRecord = serde_json::from_str(line)?;
        if !r.is_consistent() {
            return Err(Error::Manifest(format!("{}:{}: flags disagree with scores", path.display(), i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(primary: f64, sec: &[(&str, f64)]) -> PredictionRecord {
        PredictionRecord::new("x", "gm0", primary, sec.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    #[test]
    fn flag_examples() {
        let r = rec(0.9, &[("a", 0.2), ("b", 0.1)]);
        assert!(r.primary_positive && r.failed_attribution && !r.contradiction);
        assert_eq!(multiclass_decision(&r), "real");
        let r = rec(0.3, &[("a", 0.8), ("b", 0.1)]);
        assert!(r.contradiction && !r.failed_attribution);
        assert_eq!(multiclass_decision(&r), "real");
        let r = rec(0.9, &[("a", 0.8), ("b", 0.7)]);
        assert!(r.multiple_attribution);
        assert_eq!(multiclass_decision(&r), "a");
        let r = rec(0.9, &[("a", 0.6), ("b", 0.9)]);
        assert_eq!(multiclass_decision(&r), "b");
        assert!(!rec(0.5, &[]).primary_positive);
    }

    #[test]
    fn hand_confusion_matrix() {
        let m = BinaryMetrics::from_counts(8, 2, 2, 5);
        assert!((m.precision - 0.8).abs() < 1e-12 && (m.recall - 0.8).abs() < 1e-12 && (m.f1 - 0.8).abs() < 1e-12);
        let d = BinaryMetrics::from_counts(0, 0, 3, 1);
        assert!(d.degenerate && d.f1 == 0.0);
    }

    #[test]
    fn external_accuracy_rejects_mixed_sources() {
        let mut a = rec(0.9, &[("gm0", 0.1)]);
        a.truth = "gm3".into();
        let mut b = a.clone();
        assert_eq!(external_accuracy(&[a.clone(), b.clone()], &ExternalTask::Detection).unwrap(), 1.0);
        assert_eq!(
            external_accuracy(&[a.clone()], &ExternalTask::Attribution("gm0".into())).unwrap(),
            1.0
        );
        b.truth = "gm4".into();
        assert!(external_accuracy(&[a, b], &ExternalTask::Detection).is_err());
    }

    #[test]
    fn report_formats_one_decimal() {
        let recs: Vec<_> = (0..50)
            .map(|i| if i == 0 { rec(0.2, &[("gm0", 0.9)]) } else { rec(0.9, &[("gm0", 0.9)]) })
            .collect();
        let r = MetricsReport::compute("test", &recs, &[]).unwrap();
        assert!((r.contradiction_rate - 0.02).abs() < 1e-12);
        assert!(r.to_text().contains("CR\t2.0"));
    }
}
