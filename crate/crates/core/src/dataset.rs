//! Dataset manifests: a versioned, tab-separated listing of image files with
//! label, source, split, content hash and optional augmentation record.
//!
//! ```text
//! #deepattr-manifest v1
//! #seed=0 size=64 notes=...
//! path<TAB>label<TAB>source<TAB>split<TAB>sha256<TAB>augmentation
//! ```
//!
//! Paths are relative to the manifest's directory. The augmentation column is
//! `-` or a JSON [`AugmentationRecord`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_set, AugmentationConfig, AugmentationRecord, Policy};
use crate::error::{Error, Result};
use crate::preprocess::{
    fit_spectrum_stats, load_image, log_spectrum, model_input, standardize, ImageBuffer, Representation,
    SpectrumStats,
};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#deepattr-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const REAL_SOURCE: &str = "real";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    External,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::External => "external",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "external" => Ok(Split::External),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: Label,
    pub source: String,
    pub split: Split,
    pub sha256: String,
    pub augmentation: Option<AugmentationRecord>,
}

impl ManifestRow {
    /// Image id: the file stem of the path.
    pub fn id(&self) -> &str {
        let name = self.path.rsplit('/').next().unwrap_or(&self.path);
        name.split('.').next().unwrap_or(name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub notes: String,
    pub rows: Vec<ManifestRow>,
    /// Directory that row paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Checks path uniqueness, label/source consistency and that external
    /// sources never appear in training or validation splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut external = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path {:?}", row.path)));
            }
            if row.path.is_empty() || row.path.contains('\t') || row.path.contains('\n') {
                return Err(Error::Manifest(format!("invalid path {:?}", row.path)));
            }
            let fake = row.source != REAL_SOURCE;
            if fake != (row.label == Label::Fake) {
                return Err(Error::Manifest(format!(
                    "{}: label {:?} inconsistent with source {:?}",
                    row.path, row.label, row.source
                )));
            }
            if row.split == Split::External {
                if !fake {
                    return Err(Error::Manifest(format!("{}: real image in external split", row.path)));
                }
                external.insert(row.source.as_str());
            }
        }
        for row in &self.rows {
            if matches!(row.split, Split::Train | Split::Val) && external.contains(row.source.as_str()) {
                return Err(Error::Manifest(format!(
                    "{}: external source {:?} leaks into {}",
                    row.path,
                    row.source,
                    row.split.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let notes = self.notes.replace(['\n', '\t'], " ");
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "#seed={} size={} notes={notes}", self.seed, self.size);
        for r in &self.rows {
            let aug = match &r.augmentation {
                Some(rec) => serde_json::to_string(rec).expect("records serialize"),
                None => "-".to_string(),
            };
            let label = match r.label {
                Label::Real => "real",
                Label::Fake => "fake",
            };
            let _ = writeln!(s, "{}\t{label}\t{}\t{}\t{}\t{aug}", r.path, r.source, r.split.name(), r.sha256);
        }
        s
    }

    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Manifest(format!("missing {MANIFEST_HEADER:?} header")));
        }
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::Manifest("missing metadata line".into()))?;
        let (mut seed, mut size, mut notes) = (None, None, String::new());
        let mut rest = meta;
        while !rest.is_empty() {
            let (key, tail) = rest
                .split_once('=')
                .ok_or_else(|| Error::Manifest(format!("malformed metadata {meta:?}")))?;
            if key == "notes" {
                notes = tail.to_string();
                break;
            }
            let (value, tail) = tail.split_once(' ').unwrap_or((tail, ""));
            let bad = || Error::Manifest(format!("bad {key} value {value:?}"));
            match key {
                "seed" => seed = Some(value.parse().map_err(|_| bad())?),
                "size" => size = Some(value.parse().map_err(|_| bad())?),
                _ => return Err(Error::Manifest(format!("unknown metadata key {key:?}"))),
            }
            rest = tail;
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Manifest(format!("row {}: expected 6 fields, got {}", n + 1, f.len())));
            }
            let label = match f[1] {
                "real" => Label::Real,
                "fake" => Label::Fake,
                other => return Err(Error::Manifest(format!("row {}: unknown label {other:?}", n + 1))),
            };
            let augmentation = match f[5] {
                "-" => None,
                json => Some(serde_json::from_str(json).map_err(|e| Error::Manifest(format!("row {}: {e}", n + 1)))?),
            };
            rows.push(ManifestRow {
                path: f[0].to_string(),
                label,
                source: f[2].to_string(),
                split: f[3].parse()?,
                sha256: f[4].to_string(),
                augmentation,
            });
        }
        let m = DatasetManifest {
            seed: seed.ok_or_else(|| Error::Manifest("metadata lacks seed".into()))?,
            size: size.ok_or_else(|| Error::Manifest("metadata lacks size".into()))?,
            notes,
            rows,
            root: root.to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads `path`, which may be the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::parse(&text, file.parent().unwrap_or(Path::new(".")))
    }

    pub fn save(&self) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        std::fs::write(&file, self.to_text()).map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Fake sources seen in training, sorted.
    pub fn train_sources(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .rows_in(Split::Train)
            .filter(|r| r.label == Label::Fake)
            .map(|r| r.source.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        v.sort();
        v
    }

    /// Sources that only occur in the external split, sorted.
    pub fn external_sources(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .rows_in(Split::External)
            .map(|r| r.source.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        v.sort();
        v
    }

    pub fn abs_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.path)
    }

    /// Loads every image of `split`, verifying content hashes.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.rows_in(split).map(|r| self.load_row(r)).collect()
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<Sample> {
        let path = self.abs_path(row);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != row.sha256 {
            return Err(Error::Manifest(format!("{}: content hash mismatch", row.path)));
        }
        Ok(Sample {
            id: row.id().to_string(),
            image: load_image(&path)?,
            label: row.label,
            source: row.source.clone(),
        })
    }
}

/// One decoded image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuffer,
    pub label: Label,
    pub source: String,
}

/// Writes `img` as `root/rel` (PNG) and returns the manifest row for it.
pub fn write_png_row(
    root: &Path,
    rel: &str,
    img: &ImageBuffer,
    label: Label,
    source: &str,
    split: Split,
    augmentation: Option<AugmentationRecord>,
) -> Result<ManifestRow> {
    let path = root.join(rel);
    img.save_png(&path)?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(ManifestRow {
        path: rel.to_string(),
        label,
        source: source.to_string(),
        split,
        sha256: hex::encode(Sha256::digest(&bytes)),
        augmentation,
    })
}

/// Materializes an augmented copy of `splits` of `base` under `out`, keeping
/// ids, labels, sources and splits. JPEG outputs are stored losslessly after
/// decoding so every augmented image is read back exactly as produced.
pub fn materialize_augmented(
    base: &DatasetManifest,
    splits: &[Split],
    policy: Policy,
    cfg: &AugmentationConfig,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let mut rows = Vec::new();
    for &split in splits {
        let samples = base.load_split(split)?;
        let items: Vec<(String, ImageBuffer)> =
            samples.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
        let augmented = augment_set(&items, policy, cfg, seed)?;
        for (s, (img, rec)) in samples.iter().zip(augmented) {
            let rel = format!("images/{}.png", s.id);
            rows.push(write_png_row(out, &rel, &img, s.label, &s.source, split, Some(rec))?);
        }
    }
    let m = DatasetManifest {
        seed: base.seed,
        size: base.size,
        notes: format!("{} augmentation of {} (seed {seed})", policy, base.digest()),
        rows,
        root: out.to_path_buf(),
    };
    m.save()?;
    Ok(m)
}

/// A split decoded into model inputs, with per-image ground truth.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub sources: Vec<String>,
    pub inputs: Arc<Vec<Tensor<f32>>>,
}

impl EncodedSplit {
    /// Standardizes every sample to `size` and converts it for `repr`.
    pub fn encode(samples: &[Sample], repr: Representation, size: usize, stats: Option<&SpectrumStats>) -> Result<Self> {
        let mut inputs = Vec::with_capacity(samples.len());
        for s in samples {
            inputs.push(model_input(&standardize(&s.image, size)?, repr, stats)?);
        }
        Ok(EncodedSplit {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            sources: samples.iter().map(|s| s.source.clone()).collect(),
            inputs: Arc::new(inputs),
        })
    }

    pub fn load(manifest: &DatasetManifest, split: Split, repr: Representation, size: usize, stats: Option<&SpectrumStats>) -> Result<Self> {
        Self::encode(&manifest.load_split(split)?, repr, size, stats)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// 1 for fakes, 0 for reals.
    pub fn detection_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| (l == Label::Fake) as usize).collect()
    }

    /// 1 for images of `source`, 0 for reals and every other source.
    pub fn source_labels(&self, source: &str) -> Vec<usize> {
        self.sources.iter().map(|s| (s == source) as usize).collect()
    }

    /// Index into `classes` of each image's source; unknown sources are an error.
    pub fn class_labels(&self, classes: &[String]) -> Result<Vec<usize>> {
        self.sources
            .iter()
            .map(|s| {
                classes
                    .iter()
                    .position(|c| c == s)
                    .ok_or_else(|| Error::InvalidArgument(format!("source {s:?} not among classes {classes:?}")))
            })
            .collect()
    }
}

/// Per-coefficient statistics of the log spectra of a split.
pub fn fit_split_stats(manifest: &DatasetManifest, split: Split, size: usize) -> Result<SpectrumStats> {
    let spectra = manifest
        .load_split(split)?
        .iter()
        .map(|s| log_spectrum(&standardize(&s.image, size)?))
        .collect::<Result<Vec<_>>>()?;
    fit_spectrum_stats(&spectra)
}
