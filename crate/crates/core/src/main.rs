use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepattr::augment::{AugmentationConfig, Individual, Policy};
use deepattr::dataset::{materialize_augmented, DatasetManifest, Split};
use deepattr::evaluator::{evaluate_split, probe_image, save_records, MetricsReport};
use deepattr::localization::{cam_grid, write_heatmaps, write_sidecar, HeatmapStyle};
use deepattr::model_zoo::load_bundle;
use deepattr::preprocess::{load_image, Representation};
use deepattr::synth_fixtures::{gen_dataset, FixtureConfig};
use deepattr::trainer::{run_phase, Phase, RunConfig, Workspace};
use deepattr::{Error, Result};

#[derive(Parser)]
#[command(name = "deepattr", version, about = "Fake-image detection and source attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fingerprint dataset.
    Synth(SynthArgs),
    /// Run training phases in a workspace.
    Run(RunArgs),
    /// Evaluate a bundle on dataset splits.
    Eval(EvalArgs),
    /// Score individual image files.
    Probe(ProbeArgs),
    /// Render saliency heatmaps for sample images of every source.
    CamGrid(CamGridArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    sources: usize,
    #[arg(long, default_value_t = deepattr::synth_fixtures::DEFAULT_AMPLITUDE)]
    amplitude: f64,
    #[arg(long, default_value_t = 200)]
    samples_per_source: usize,
    /// Correlation between the fingerprints of gm0 and gm1.
    #[arg(long)]
    sibling: Option<f64>,
    #[arg(long)]
    no_external: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated phases, e.g. I,II,III,IV.
    #[arg(long, default_value = "I,II,III,IV", value_delimiter = ',')]
    phases: Vec<Phase>,
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, env = "DEEPATTR_WORKSPACE")]
    workspace: Option<PathBuf>,
    #[arg(long)]
    representation: Option<Representation>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    detection_lr: Option<f64>,
    #[arg(long)]
    attribution_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    individual: Option<Vec<Individual>>,
    /// Comparison models to train in phase III, or `none`.
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_feature_cache: bool,
    /// Retrain phases that already completed.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test", value_delimiter = ',')]
    splits: Vec<Split>,
    /// Also evaluate augmented copies of the splits (multi, jpeg, crop).
    #[arg(long, value_delimiter = ',')]
    augment: Vec<Policy>,
    #[arg(long, default_value_t = 0)]
    augment_seed: u64,
    /// Required representation; an error when the bundle differs.
    #[arg(long)]
    representation: Option<Representation>,
    /// Report file; records go beside it as `<name>.<label>.records.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    bundle: PathBuf,
    images: Vec<PathBuf>,
    /// Write heatmaps for every output into this directory.
    #[arg(long)]
    cam: Option<PathBuf>,
    #[arg(long, default_value_t = deepattr::localization::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct CamGridArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 16)]
    per_source: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = deepattr::localization::DEFAULT_ALPHA)]
    alpha: f64,
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = FixtureConfig {
        size: a.size,
        sources: a.sources,
        amplitude: a.amplitude,
        samples_per_source: a.samples_per_source,
        external: !a.no_external,
        sibling: a.sibling,
        seed: a.seed,
        ..FixtureConfig::default()
    };
    let m = gen_dataset(&cfg, &a.out)?;
    println!("{}\t{} images\t{}", a.out.display(), m.rows.len(), m.digest());
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &a.dataset {
        c.dataset = v.clone();
    }
    if let Some(v) = &a.workspace {
        c.workspace = v.clone();
    }
    if let Some(v) = a.representation {
        c.representation = v;
    }
    if let Some(v) = a.size {
        c.size = v;
    }
    if let Some(v) = &a.seeds {
        c.model_seeds = v.clone();
    }
    if let Some(v) = a.max_epochs {
        c.max_epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.patience {
        c.patience = v;
    }
    if let Some(v) = a.detection_lr {
        c.detection_lr = v;
    }
    if let Some(v) = a.attribution_lr {
        c.attribution_lr = v;
    }
    if let Some(v) = &a.individual {
        c.individual = v.clone();
    }
    if let Some(v) = &a.baselines {
        c.baselines = v.iter().filter(|b| !b.is_empty() && *b != "none").cloned().collect();
    }
    if let Some(v) = a.threads {
        c.threads = v;
    }
    if a.no_feature_cache {
        c.cache_features = false;
    }
    Ok(c)
}

fn run(a: RunArgs) -> Result<()> {
    let ws = Workspace::open(run_config(&a)?)?;
    let mut phases = a.phases.clone();
    phases.sort();
    phases.dedup();
    for p in phases {
        run_phase(&ws, p, a.force)?;
        eprintln!("phase {p} done");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let spec = bundle.primary.input;
    if let Some(r) = a.representation {
        if r != spec.representation {
            return Err(Error::InvalidArgument(format!(
                "bundle uses {} inputs, {r} requested",
                spec.representation
            )));
        }
    }
    let clean = DatasetManifest::load(&a.dataset)?;
    let mut sets = vec![("clean".to_string(), clean.clone())];
    let scratch = a.out.with_extension("data");
    for &policy in &a.augment {
        let dir = scratch.join(policy.to_string());
        let mut splits = a.splits.clone();
        splits.push(Split::External);
        let m = materialize_augmented(&clean, &splits, policy, &AugmentationConfig::default(), a.augment_seed, &dir)?;
        sets.push((policy.to_string(), m));
    }
    let mut text = String::new();
    for (variant, m) in &sets {
        let external = if m.rows_in(Split::External).next().is_some() {
            evaluate_split(&bundle, m, Split::External)?
        } else {
            Vec::new()
        };
        for &split in &a.splits {
            let label = format!("{variant}/{}", split.name());
            let records = evaluate_split(&bundle, m, split)?;
            let file = a.out.with_extension(format!("{variant}.{}.records.jsonl", split.name()));
            save_records(&records, &file)?;
            text.push_str(&MetricsReport::compute(&label, &records, &external)?.to_text());
            text.push('\n');
        }
    }
    std::fs::write(&a.out, &text).map_err(|e| Error::io(&a.out, e))?;
    print!("{text}");
    Ok(())
}

fn image_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn probe(a: ProbeArgs) -> Result<()> {
    if a.images.is_empty() {
        return Err(Error::InvalidArgument("no images given".into()));
    }
    let bundle = load_bundle(&a.bundle)?;
    let style = HeatmapStyle { alpha: a.alpha };
    let mut failures = Vec::new();
    let mut sidecar = Vec::new();
    for path in &a.images {
        let id = image_id(path);
        let outcome = load_image(path).and_then(|img| {
            let record = probe_image(&bundle, &id, "unknown", &img)?;
            if let Some(dir) = &a.cam {
                sidecar.extend(write_heatmaps(&bundle, &id, &img, dir, style)?.0);
            }
            Ok(record)
        });
        match outcome {
            Ok(r) => println!("{}", serde_json::to_string(&r)?),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failures.push(e);
            }
        }
    }
    if let Some(dir) = &a.cam {
        if !sidecar.is_empty() {
            write_sidecar(&sidecar, &dir.join("heatmaps.jsonl"))?;
        }
    }
    match failures.into_iter().next() {
        None => Ok(()),
        Some(first) => Err(first),
    }
}

fn cam_grid_cmd(a: CamGridArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let m = DatasetManifest::load(&a.dataset)?;
    let mut sources: Vec<String> = m.rows_in(a.split).map(|r| r.source.clone()).collect();
    sources.sort();
    sources.dedup();
    for source in sources {
        let images = m
            .rows_in(a.split)
            .filter(|r| r.source == source)
            .take(a.per_source)
            .map(|r| m.load_row(r).map(|s| (s.id, s.image)))
            .collect::<Result<Vec<_>>>()?;
        let dir = a.out.join(&source);
        let (records, grids) = cam_grid(&bundle, &images, &dir, HeatmapStyle { alpha: a.alpha })?;
        println!("{source}\t{} heatmaps\t{} grids\t{}", records.len(), grids.len(), dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::CamGrid(a) => cam_grid_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
