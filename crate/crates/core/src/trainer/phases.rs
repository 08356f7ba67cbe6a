//! The four experimental phases over a workspace directory.
//!
//! ```text
//! <workspace>/config.json                 effective run configuration
//! <workspace>/lineage.jsonl               one LineageEntry per artifact
//! <workspace>/data/<variant>/             materialized augmented datasets
//! <workspace>/seed-<s>/phase1/primary.dattr
//! <workspace>/seed-<s>/phase2/<variant>/primary.dattr
//! <workspace>/seed-<s>/phase3/bundle.dattr, phase3/baselines/<name>.dattr
//! <workspace>/seed-<s>/phase4/<variant>/bundle.dattr
//! <workspace>/seed-<s>/**/<model>.telemetry.jsonl
//! <workspace>/seed-<s>/phaseN/DONE
//! ```
//!
//! `<variant>` is `multi` or an individual augmentation (`jpeg`, `crop`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentationConfig, Individual, Policy};
use crate::dataset::{fit_split_stats, materialize_augmented, DatasetManifest, EncodedSplit, Split, REAL_SOURCE};
use crate::error::{Error, Result};
use crate::model_zoo::{build_baseline, build_primary, build_secondary, load_bundle, save_bundle, Decision, ModelBundle};
use crate::preprocess::{Representation, SpectrumStats};
use crate::rng::substream;

use super::{train, train_secondaries, FeatureCache, SecondaryJob, Task, TrainConfig, TrainReport, TrainSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
    III,
    IV,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::I, Phase::II, Phase::III, Phase::IV];

    pub fn number(self) -> usize {
        self as usize + 1
    }

    fn prerequisite(self) -> Option<Phase> {
        match self {
            Phase::I => None,
            Phase::II => Some(Phase::I),
            Phase::III => Some(Phase::II),
            Phase::IV => Some(Phase::III),
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
            Phase::IV => "IV",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Phase::I),
            "II" | "2" => Ok(Phase::II),
            "III" | "3" => Ok(Phase::III),
            "IV" | "4" => Ok(Phase::IV),
            other => Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        }
    }
}

/// Declarative description of a run. Every hyperparameter has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub workspace: PathBuf,
    pub representation: Representation,
    /// Model input size; 0 means the dataset's image size.
    pub size: usize,
    pub data_seed: u64,
    pub model_seeds: Vec<u64>,
    pub augment_seed: u64,
    pub individual: Vec<Individual>,
    pub baselines: Vec<String>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub detection_lr: f64,
    pub attribution_lr: f64,
    pub cache_features: bool,
    pub threads: usize,
    pub augmentation: AugmentationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            workspace: PathBuf::new(),
            representation: Representation::Pixel,
            size: 0,
            data_seed: super::DATA_SEED,
            model_seeds: super::MODEL_SEEDS.to_vec(),
            augment_seed: super::DATA_SEED,
            individual: vec![Individual::Jpeg, Individual::Crop],
            baselines: vec!["gandct-conv".into(), "ganfp-postpool".into()],
            batch_size: super::DEFAULT_BATCH,
            max_epochs: super::MAX_EPOCHS,
            patience: super::DEFAULT_PATIENCE,
            detection_lr: super::DETECTION_LR,
            attribution_lr: super::ATTRIBUTION_LR,
            cache_features: true,
            threads: 1,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let manifest = if self.dataset.is_dir() {
            self.dataset.join(crate::dataset::MANIFEST_FILE)
        } else {
            self.dataset.clone()
        };
        if !manifest.is_file() {
            return Err(Error::InvalidArgument(format!("dataset manifest {} does not exist", manifest.display())));
        }
        if self.workspace.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("workspace path is empty".into()));
        }
        if self.model_seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one model seed is required".into()));
        }
        for b in &self.baselines {
            crate::model_zoo::Architecture::baseline(b)?;
        }
        self.train_config(Task::Detection, self.model_seeds[0]).validate()
    }

    pub fn train_config(&self, task: Task, model_seed: u64) -> TrainConfig {
        TrainConfig {
            task,
            lr: match task {
                Task::Detection => self.detection_lr,
                Task::Attribution => self.attribution_lr,
            },
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            data_seed: self.data_seed,
            model_seed,
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// `multi` followed by the configured individual variants.
    pub fn variants(&self) -> Vec<Policy> {
        std::iter::once(Policy::Multi)
            .chain(self.individual.iter().map(|&i| Policy::Individual(i)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub phase: Phase,
    pub seed: u64,
    pub variant: String,
    /// Path relative to the workspace root.
    pub artifact: String,
    /// SHA-256 of the artifact file.
    pub digest: String,
    /// Weight digests of every graph inside the artifact, keyed by role.
    pub models: BTreeMap<String, String>,
    pub parent: Option<String>,
    pub parent_digest: Option<String>,
    pub config_digest: String,
    pub dataset_digest: String,
}

/// All lineage entries of a workspace, in write order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lineage {
    pub entries: Vec<LineageEntry>,
}

impl Lineage {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("lineage.jsonl");
        if !path.exists() {
            return Ok(Lineage::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Lineage { entries })
    }

    /// The most recent entry for an artifact path.
    pub fn find(&self, artifact: &str) -> Option<&LineageEntry> {
        self.entries.iter().rev().find(|e| e.artifact == artifact)
    }

    /// Checks that every artifact still has its recorded digest, that parents
    /// exist with matching digests, and that phase-IV bundles embed exactly
    /// the primary of their phase-II parent.
    pub fn verify(&self, root: &Path) -> Result<()> {
        let latest: BTreeMap<&str, &LineageEntry> = self.entries.iter().map(|e| (e.artifact.as_str(), e)).collect();
        for e in latest.values() {
            let digest = file_digest(&root.join(&e.artifact))?;
            if digest != e.digest {
                return Err(Error::Manifest(format!("{}: digest changed since it was recorded", e.artifact)));
            }
            if let Some(parent) = &e.parent {
                let p = latest
                    .get(parent.as_str())
                    .ok_or_else(|| Error::Manifest(format!("{}: parent {parent} not in lineage", e.artifact)))?;
                if Some(&p.digest) != e.parent_digest.as_ref() {
                    return Err(Error::Manifest(format!("{}: parent {parent} digest mismatch", e.artifact)));
                }
                if e.phase == Phase::IV && e.variant != "multi" {
                    if p.phase != Phase::II || p.variant != e.variant {
                        return Err(Error::Manifest(format!("{}: parent is not the matching phase-II primary", e.artifact)));
                    }
                    if p.models.get("primary") != e.models.get("primary") {
                        return Err(Error::Manifest(format!("{}: embedded primary differs from parent", e.artifact)));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn bundle_models(bundle: &ModelBundle) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("primary".to_string(), bundle.primary.digest());
    for (name, g) in bundle.secondaries() {
        m.insert(format!("secondary/{name}"), g.digest());
    }
    m
}

/// An opened run: configuration, clean dataset and workspace root.
pub struct Workspace {
    pub config: RunConfig,
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub size: usize,
}

impl Workspace {
    /// Validates the config, loads the manifest and snapshots the config.
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = DatasetManifest::load(&config.dataset)?;
        let size = if config.size == 0 { manifest.size } else { config.size };
        let root = config.workspace.clone();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let snapshot = root.join("config.json");
        let json = serde_json::to_string_pretty(&config)?;
        std::fs::write(&snapshot, json).map_err(|e| Error::io(&snapshot, e))?;
        Ok(Workspace {
            config,
            root,
            manifest,
            size,
        })
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn phase1_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("phase1/primary.dattr")
    }

    pub fn phase2_path(&self, seed: u64, variant: Policy) -> PathBuf {
        self.seed_dir(seed).join(format!("phase2/{variant}/primary.dattr"))
    }

    pub fn phase3_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("phase3/bundle.dattr")
    }

    pub fn baseline_path(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("phase3/baselines/{name}.dattr"))
    }

    pub fn phase4_path(&self, seed: u64, variant: Policy) -> PathBuf {
        self.seed_dir(seed).join(format!("phase4/{variant}/bundle.dattr"))
    }

    fn marker(&self, seed: u64, phase: Phase) -> PathBuf {
        self.seed_dir(seed).join(format!("phase{}/DONE", phase.number()))
    }

    /// True when `phase` finished for `seed` under the current configuration.
    pub fn is_done(&self, seed: u64, phase: Phase) -> bool {
        std::fs::read_to_string(self.marker(seed, phase))
            .map(|s| s.trim() == self.config.digest())
            .unwrap_or(false)
    }

    fn mark_done(&self, seed: u64, phase: Phase) -> Result<()> {
        let path = self.marker(seed, phase);
        std::fs::write(&path, self.config.digest()).map_err(|e| Error::io(&path, e))
    }

    fn clear_from(&self, seed: u64, phase: Phase) {
        for p in Phase::ALL.into_iter().filter(|&p| p >= phase) {
            let _ = std::fs::remove_file(self.marker(seed, p));
        }
    }

    /// The clean dataset, or its augmented copy for `variant` (materialized on first use).
    pub fn dataset(&self, variant: Option<Policy>) -> Result<DatasetManifest> {
        let Some(policy) = variant else {
            return Ok(self.manifest.clone());
        };
        let dir = self.root.join(format!("data/{policy}"));
        if let Ok(m) = DatasetManifest::load(&dir) {
            if m.notes.contains(&self.manifest.digest()) && m.notes.contains(&format!("seed {}", self.config.augment_seed)) {
                return Ok(m);
            }
        }
        materialize_augmented(
            &self.manifest,
            &[Split::Train, Split::Val, Split::Test, Split::External],
            policy,
            &self.config.augmentation,
            self.config.augment_seed,
            &dir,
        )
    }

    pub fn encode(&self, variant: Option<Policy>, split: Split, stats: Option<&SpectrumStats>) -> Result<EncodedSplit> {
        EncodedSplit::load(&self.dataset(variant)?, split, self.config.representation, self.size, stats)
    }

    /// Spectrum statistics of the clean training split (DCT runs only).
    pub fn spectrum_stats(&self) -> Result<Option<SpectrumStats>> {
        match self.config.representation {
            Representation::Pixel => Ok(None),
            Representation::Dct => Ok(Some(fit_split_stats(&self.manifest, Split::Train, self.size)?)),
        }
    }

    /// Sources a secondary module is trained for.
    pub fn sources(&self) -> Vec<String> {
        self.manifest.train_sources()
    }

    fn record(&self, entry: LineageEntry) -> Result<()> {
        let path = self.root.join("lineage.jsonl");
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        use std::io::Write;
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    }

    #[allow(clippy::too_many_arguments)]
    fn save_artifact(
        &self,
        bundle: &ModelBundle,
        path: &Path,
        phase: Phase,
        seed: u64,
        variant: &str,
        parent: Option<&Path>,
        dataset_digest: String,
    ) -> Result<()> {
        save_bundle(bundle, path)?;
        let parent_rel = parent.map(|p| self.rel(p));
        let parent_digest = parent.map(file_digest).transpose()?;
        self.record(LineageEntry {
            phase,
            seed,
            variant: variant.to_string(),
            artifact: self.rel(path),
            digest: file_digest(path)?,
            models: bundle_models(bundle),
            parent: parent_rel,
            parent_digest,
            config_digest: self.config.digest(),
            dataset_digest,
        })
    }
}

fn write_telemetry(path: &Path, model: &str, report: &TrainReport) -> Result<()> {
    let mut s = String::new();
    for e in &report.history {
        let mut v = serde_json::to_value(e)?;
        v["model"] = serde_json::Value::from(model);
        let _ = writeln!(s, "{v}");
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

struct Splits {
    train: EncodedSplit,
    val: EncodedSplit,
    digest: String,
}

fn splits(ws: &Workspace, variant: Option<Policy>, stats: Option<&SpectrumStats>) -> Result<Splits> {
    Ok(Splits {
        train: ws.encode(variant, Split::Train, stats)?,
        val: ws.encode(variant, Split::Val, stats)?,
        digest: ws.dataset(variant)?.digest(),
    })
}

fn detection_sets(s: &Splits) -> Result<(TrainSet, TrainSet)> {
    Ok((
        TrainSet::shared(s.train.inputs.clone(), s.train.detection_labels())?,
        TrainSet::shared(s.val.inputs.clone(), s.val.detection_labels())?,
    ))
}

/// Runs `phase` for every model seed, skipping seeds already done unless `force`.
pub fn run_phase(ws: &Workspace, phase: Phase, force: bool) -> Result<()> {
    for &seed in &ws.config.model_seeds {
        if let Some(pre) = phase.prerequisite() {
            if !ws.is_done(seed, pre) {
                return Err(Error::Dependency {
                    phase: phase.to_string(),
                    missing: pre.to_string(),
                });
            }
        }
        if ws.is_done(seed, phase) && !force {
            continue;
        }
        ws.clear_from(seed, phase);
        match phase {
            Phase::I => phase_one(ws, seed)?,
            Phase::II => phase_two(ws, seed)?,
            Phase::III => phase_three(ws, seed)?,
            Phase::IV => phase_four(ws, seed)?,
        }
        ws.mark_done(seed, phase)?;
    }
    Ok(())
}

fn phase_one(ws: &Workspace, seed: u64) -> Result<()> {
    let stats = ws.spectrum_stats()?;
    let data = splits(ws, None, stats.as_ref())?;
    let (tr, va) = detection_sets(&data)?;
    let mut primary = build_primary(ws.config.representation, ws.size, &mut substream(seed, "primary"))?;
    let report = train(&mut primary, &tr, &va, &ws.config.train_config(Task::Detection, seed))?;
    let path = ws.phase1_path(seed);
    write_telemetry(&path.with_file_name("primary.telemetry.jsonl"), "primary", &report)?;
    ws.save_artifact(&ModelBundle::new(primary, stats), &path, Phase::I, seed, "clean", None, data.digest)
}

fn phase_two(ws: &Workspace, seed: u64) -> Result<()> {
    let parent = ws.phase1_path(seed);
    let base = load_bundle(&parent)?;
    for variant in ws.config.variants() {
        let data = splits(ws, Some(variant), base.stats.as_ref())?;
        let (tr, va) = detection_sets(&data)?;
        let mut primary = base.primary.clone();
        let report = train(&mut primary, &tr, &va, &ws.config.train_config(Task::Detection, seed))?;
        let path = ws.phase2_path(seed, variant);
        write_telemetry(&path.with_file_name("primary.telemetry.jsonl"), "primary", &report)?;
        let bundle = ModelBundle::new(primary, base.stats.clone());
        ws.save_artifact(&bundle, &path, Phase::II, seed, &variant.to_string(), Some(&parent), data.digest)?;
    }
    Ok(())
}

/// Trains one secondary per source on `data`, starting from `init` when given
/// (refits) or from fresh weights.
fn attach_secondaries(
    ws: &Workspace,
    seed: u64,
    mut bundle: ModelBundle,
    init: Option<&ModelBundle>,
    data: &Splits,
    telemetry_dir: &Path,
) -> Result<ModelBundle> {
    bundle.primary.freeze();
    let (tr, va) = detection_sets(data)?;
    let cache = if ws.config.cache_features {
        FeatureCache::build(&bundle.primary, &tr, &va)?
    } else {
        FeatureCache {
            train: tr,
            val: va,
        }
    };
    let mut jobs = Vec::new();
    for source in ws.sources() {
        let model = match init.and_then(|b| b.secondary(&source)) {
            Some(g) => g.clone(),
            None => build_secondary(&bundle.primary, &mut substream(seed, &format!("secondary/{source}")))?,
        };
        jobs.push(SecondaryJob {
            name: source.clone(),
            model,
            train_labels: data.train.source_labels(&source),
            val_labels: data.val.source_labels(&source),
            cfg: ws.config.train_config(Task::Attribution, seed),
        });
    }
    let trained = if ws.config.cache_features {
        train_secondaries(&cache, jobs, ws.config.threads)?
    } else {
        let mut out = Vec::new();
        for mut job in jobs {
            let tr = cache.train.with_labels(job.train_labels)?;
            let va = cache.val.with_labels(job.val_labels)?;
            let report = super::train_secondary(&bundle.primary, &mut job.model, &tr, &va, &job.cfg, false)?;
            out.push((job.name, job.model, report));
        }
        out
    };
    for (name, model, report) in trained {
        write_telemetry(&telemetry_dir.join(format!("secondary-{name}.telemetry.jsonl")), &name, &report)?;
        bundle.add_secondary(&name, model)?;
    }
    Ok(bundle)
}

fn phase_three(ws: &Workspace, seed: u64) -> Result<()> {
    let parent = ws.phase2_path(seed, Policy::Multi);
    let base = load_bundle(&parent)?;
    let data = splits(ws, None, base.stats.as_ref())?;
    let path = ws.phase3_path(seed);
    let dir = path.parent().expect("phase dir").to_path_buf();
    let bundle = attach_secondaries(ws, seed, ModelBundle::new(base.primary.clone(), base.stats.clone()), None, &data, &dir)?;
    ws.save_artifact(&bundle, &path, Phase::III, seed, "clean", Some(&parent), data.digest.clone())?;

    let mut classes = vec![REAL_SOURCE.to_string()];
    classes.extend(ws.sources());
    for name in &ws.config.baselines {
        let mut model = build_baseline(
            name,
            Decision::Softmax(classes.len()),
            ws.config.representation,
            ws.size,
            &mut substream(seed, &format!("baseline/{name}")),
        )?;
        let tr = TrainSet::shared(data.train.inputs.clone(), data.train.class_labels(&classes)?)?;
        let va = TrainSet::shared(data.val.inputs.clone(), data.val.class_labels(&classes)?)?;
        let report = train(&mut model, &tr, &va, &ws.config.train_config(Task::Attribution, seed))?;
        let bpath = ws.baseline_path(seed, name);
        write_telemetry(&bpath.with_extension("telemetry.jsonl"), name, &report)?;
        ws.save_artifact(&ModelBundle::new(model, base.stats.clone()), &bpath, Phase::III, seed, name, None, data.digest.clone())?;
    }
    Ok(())
}

fn phase_four(ws: &Workspace, seed: u64) -> Result<()> {
    let phase3 = load_bundle(&ws.phase3_path(seed))?;
    for variant in ws.config.variants() {
        let parent = match variant {
            Policy::Multi => ws.phase3_path(seed),
            Policy::Individual(_) => ws.phase2_path(seed, variant),
        };
        let stats = phase3.stats.clone();
        let data = splits(ws, Some(variant), stats.as_ref())?;
        let path = ws.phase4_path(seed, variant);
        let dir = path.parent().expect("phase dir").to_path_buf();
        let bundle = match variant {
            Policy::Multi => {
                let fresh = ModelBundle::new(phase3.primary.clone(), stats);
                attach_secondaries(ws, seed, fresh, Some(&phase3), &data, &dir)?
            }
            Policy::Individual(_) => {
                let primary = load_bundle(&parent)?.primary;
                attach_secondaries(ws, seed, ModelBundle::new(primary, stats), None, &data, &dir)?
            }
        };
        ws.save_artifact(&bundle, &path, Phase::IV, seed, &variant.to_string(), Some(&parent), data.digest)?;
    }
    Ok(())
}
