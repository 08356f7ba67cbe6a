//! Python bindings: fixture generation, phase runs, bundle probing and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deepattr::dataset::{DatasetManifest, Split};
use deepattr::evaluator::{self, MetricsReport, PredictionRecord};
use deepattr::localization;
use deepattr::model_zoo::{self, ModelBundle};
use deepattr::preprocess::load_image;
use deepattr::synth_fixtures::{gen_dataset, FixtureConfig};
use deepattr::trainer::{run_phase, Phase, RunConfig, Workspace};

fn py_err(e: deepattr::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        2 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Writes a synthetic fingerprint dataset and returns its manifest digest.
#[pyfunction]
#[pyo3(signature = (out, size=64, sources=3, samples_per_source=200, amplitude=8.0, seed=0, external=true, sibling=None))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out: PathBuf,
    size: usize,
    sources: usize,
    samples_per_source: usize,
    amplitude: f64,
    seed: u64,
    external: bool,
    sibling: Option<f64>,
) -> PyResult<String> {
    let cfg = FixtureConfig {
        size,
        sources,
        samples_per_source,
        amplitude,
        seed,
        external,
        sibling,
        ..FixtureConfig::default()
    };
    Ok(gen_dataset(&cfg, &out).map_err(py_err)?.digest())
}

/// The default run configuration as JSON, for editing before `run`.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")
}

/// Runs `phases` (e.g. `["I", "II"]`) for a JSON run configuration.
#[pyfunction]
#[pyo3(signature = (config_json, phases, force=false))]
fn run(py: Python<'_>, config_json: &str, phases: Vec<String>, force: bool) -> PyResult<()> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let phases = phases
        .iter()
        .map(|p| p.parse::<Phase>())
        .collect::<deepattr::Result<Vec<_>>>()
        .map_err(py_err)?;
    py.detach(|| {
        let ws = Workspace::open(cfg)?;
        for p in phases {
            run_phase(&ws, p, force)?;
        }
        Ok(())
    })
    .map_err(py_err)
}

/// Scores of one image and the flags derived from them.
#[pyclass(name = "Prediction", frozen, get_all)]
struct PyPrediction {
    id: String,
    primary: f64,
    secondaries: Vec<(String, f64)>,
    primary_positive: bool,
    failed_attribution: bool,
    multiple_attribution: bool,
    contradiction: bool,
    decision: String,
}

impl From<PredictionRecord> for PyPrediction {
    fn from(r: PredictionRecord) -> Self {
        PyPrediction {
            decision: evaluator::multiclass_decision(&r),
            id: r.id,
            primary: r.primary,
            secondaries: r.secondaries.into_iter().collect(),
            primary_positive: r.primary_positive,
            failed_attribution: r.failed_attribution,
            multiple_attribution: r.multiple_attribution,
            contradiction: r.contradiction,
        }
    }
}

#[pymethods]
impl PyPrediction {
    fn __repr__(&self) -> String {
        format!("Prediction(id={:?}, primary={:.4}, decision={:?})", self.id, self.primary, self.decision)
    }
}

/// A primary module with its named secondaries.
#[pyclass(name = "Bundle", frozen)]
struct PyBundle {
    inner: ModelBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBundle {
            inner: model_zoo::load_bundle(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_zoo::save_bundle(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn representation(&self) -> String {
        self.inner.primary.input.representation.to_string()
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.primary.input.size
    }

    #[getter]
    fn secondaries(&self) -> Vec<String> {
        self.inner.secondary_names().into_iter().map(String::from).collect()
    }

    fn primary_digest(&self) -> String {
        self.inner.primary.digest()
    }

    fn param_count(&self) -> usize {
        self.inner.primary.param_count()
    }

    /// Probes one image file.
    fn probe(&self, path: PathBuf) -> PyResult<PyPrediction> {
        let img = load_image(&path).map_err(py_err)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(evaluator::probe_image(&self.inner, &id, "unknown", &img).map_err(py_err)?.into())
    }

    /// Normalized saliency maps `(output, width, height, values)` for every output.
    fn saliency(&self, path: PathBuf) -> PyResult<Vec<(String, usize, usize, Vec<f64>)>> {
        let img = load_image(&path).map_err(py_err)?;
        let x = evaluator::encode_for(&self.inner, &img).map_err(py_err)?;
        Ok(localization::bundle_saliency(&self.inner, &x)
            .map_err(py_err)?
            .into_iter()
            .map(|m| (m.output, m.width, m.height, m.normalized))
            .collect())
    }

    /// Metrics text for one split of a dataset, with external-source EXA.
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, py: Python<'_>, dataset: PathBuf, split: &str) -> PyResult<String> {
        let split: Split = split.parse().map_err(py_err)?;
        py.detach(|| {
            let m = DatasetManifest::load(&dataset)?;
            let records = evaluator::evaluate_split(&self.inner, &m, split)?;
            let external = if m.rows_in(Split::External).next().is_some() {
                evaluator::evaluate_split(&self.inner, &m, Split::External)?
            } else {
                Vec::new()
            };
            Ok(MetricsReport::compute(split.name(), &records, &external)?.to_text())
        })
        .map_err(py_err)
    }
}

#[pymodule]
fn deepattr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyPrediction>()?;
    m.add("BUNDLE_EXTENSION", model_zoo::BUNDLE_EXTENSION)?;
    Ok(())
}
