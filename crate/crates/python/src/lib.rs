//! Python bindings. Structured results come back as plain dicts and lists;
//! configs go in as JSON text so the Rust validation (unknown keys included)
//! applies unchanged.

use std::path::PathBuf;

use pacm::contrastive::{self, matched_temperature};
use pacm::eval::{self, Embedded, ProtocolConfig, ScoreSet, HISTOGRAM_BINS};
use pacm::numeric::Matrix;
use pacm::synth::{self, DiscreteToyJoint, MultiviewDataset, SynthConfig};
use pacm::trainer::{self, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

type Rows = Vec<Vec<f64>>;

fn err(e: pacm::Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_pyobject(py)?.into_any().unbind(),
            None => match n.as_i64() {
                Some(i) => i.into_pyobject(py)?.into_any().unbind(),
                None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
            },
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialize<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(json_err)?)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn train_config(json: Option<&str>) -> PyResult<TrainConfig> {
    match json {
        Some(text) => TrainConfig::from_json(text).map_err(err),
        None => Ok(TrainConfig::default()),
    }
}

/// Synthetic two-view dataset.
#[pyclass(name = "Dataset", module = "_pacm", frozen)]
struct PyDataset(MultiviewDataset);

#[pymethods]
impl PyDataset {
    /// Generates a dataset from a JSON config, or the reference config for `seed`.
    #[staticmethod]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn generate(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => {
                let mut c: SynthConfig = serde_json::from_str(text).map_err(json_err)?;
                c.seed = seed;
                c
            }
            None => SynthConfig::reference(seed),
        };
        synth::generate_dataset(&cfg).map(PyDataset).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        synth::load_dataset(&path).map(PyDataset).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        synth::save_dataset(&self.0, &path).map_err(err)
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, self.0.config())
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.0.identities().len()
    }

    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.0.frontal().len() + self.0.profile().len()
    }
}

/// Training run that can be stepped, checkpointed and evaluated from Python.
#[pyclass(name = "Trainer", module = "_pacm")]
struct PyTrainer(trainer::Trainer);

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (dataset, config_json=None))]
    fn new(dataset: &PyDataset, config_json: Option<&str>) -> PyResult<Self> {
        trainer::Trainer::new(train_config(config_json)?, &dataset.0)
            .map(PyTrainer)
            .map_err(err)
    }

    /// Resumes from a checkpoint file; the dataset must match the one trained on.
    #[staticmethod]
    fn resume(path: PathBuf, dataset: &PyDataset) -> PyResult<Self> {
        let ckpt = trainer::load_checkpoint(&path).map_err(err)?;
        trainer::Trainer::from_checkpoint(ckpt, &dataset.0)
            .map(PyTrainer)
            .map_err(err)
    }

    /// One iteration; returns its metrics row.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let row = self.0.step().map_err(err)?;
        serialize(py, &row)
    }

    fn run_epoch(&mut self) -> PyResult<()> {
        self.0.run_epoch().map_err(err)
    }

    fn run(&mut self) -> PyResult<()> {
        self.0.run().map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.0.epoch()
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.0.iteration()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.0.is_finished()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, self.0.config())
    }

    fn log(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.0.log())
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.0.checkpoint(), &path).map_err(err)
    }

    /// Embeds one view of `features` (rows of raw inputs) as unit rows.
    fn embed(&self, view: &str, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let view = match view {
            "frontal" => synth::View::Frontal,
            "profile" => synth::View::Profile,
            other => return Err(PyValueError::new_err(format!("unknown view {other:?}"))),
        };
        let z = self.0.encoders().embed(view, &matrix(features)?).map_err(err)?;
        Ok(z.row_iter().map(<[f64]>::to_vec).collect())
    }

    /// Verification protocol on the held-out identities of `dataset`.
    #[pyo3(signature = (dataset, protocol_json=None))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, protocol_json: Option<&str>) -> PyResult<Py<PyAny>> {
        let protocol = match protocol_json {
            Some(text) => serde_json::from_str(text).map_err(json_err)?,
            None => ProtocolConfig::default(),
        };
        let mut report = eval::evaluate_protocol(self.0.encoders(), &dataset.0, &protocol).map_err(err)?;
        report.train_config = Some(self.0.config().clone());
        serialize(py, &report)
    }

    /// Hardest-tier histogram overlap on the held-out identities.
    fn hardest_tier_overlap(&self, dataset: &PyDataset) -> PyResult<f64> {
        let heldout = dataset.0.heldout_part().map_err(err)?;
        let emb = Embedded::new(self.0.encoders(), &heldout).map_err(err)?;
        let scores = emb.tier_scores(dataset.0.config().hardest_tier()).map_err(err)?;
        Ok(eval::histogram(&scores, HISTOGRAM_BINS)
            .map_err(err)?
            .overlap_coefficient())
    }
}

/// Default training config as a dict.
#[pyfunction]
fn default_train_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    serialize(py, &TrainConfig::default())
}

/// Accuracy, EER and the optimal threshold of one score set.
#[pyfunction]
fn verification_metrics(py: Python<'_>, genuine: Vec<f64>, imposter: Vec<f64>) -> PyResult<Py<PyAny>> {
    let scores = ScoreSet::new(genuine, imposter).map_err(err)?;
    serialize(py, &eval::verification_metrics(&scores).map_err(err)?)
}

#[pyfunction]
fn tar_at_far(py: Python<'_>, genuine: Vec<f64>, imposter: Vec<f64>, far_targets: Vec<f64>) -> PyResult<Py<PyAny>> {
    let scores = ScoreSet::new(genuine, imposter).map_err(err)?;
    serialize(py, &eval::tar_at_far(&scores, &far_targets).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (genuine, imposter, bins=HISTOGRAM_BINS))]
fn histogram(py: Python<'_>, genuine: Vec<f64>, imposter: Vec<f64>, bins: usize) -> PyResult<Py<PyAny>> {
    let scores = ScoreSet::new(genuine, imposter).map_err(err)?;
    let h = eval::histogram(&scores, bins).map_err(err)?;
    let out = serialize(py, &h)?;
    out.bind(py).set_item("overlap_coefficient", h.overlap_coefficient())?;
    Ok(out)
}

/// Rank-1 accuracy per probe tier against a one-row-per-identity gallery.
#[pyfunction]
fn rank1_identification(
    py: Python<'_>,
    gallery: Vec<Vec<f64>>,
    gallery_identity: Vec<usize>,
    probes: Vec<Vec<f64>>,
    probe_identity: Vec<usize>,
    probe_tier: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let r = eval::rank1_identification(
        &matrix(gallery)?,
        &gallery_identity,
        &matrix(probes)?,
        &probe_identity,
        &probe_tier,
    )
    .map_err(err)?;
    serialize(py, &r)
}

/// Two-way in-batch contrastive loss of paired unit rows; returns the loss and
/// the gradients with respect to both inputs.
#[pyfunction]
#[pyo3(signature = (z_frontal, z_profile, temperature=contrastive::DEFAULT_TEMPERATURE))]
fn pac_loss_in_batch(
    z_frontal: Vec<Vec<f64>>,
    z_profile: Vec<Vec<f64>>,
    temperature: f64,
) -> PyResult<(f64, Rows, Rows)> {
    let out = contrastive::pac_loss_in_batch(&matrix(z_frontal)?, &matrix(z_profile)?, temperature).map_err(err)?;
    let rows = |m: &Matrix| m.row_iter().map(<[f64]>::to_vec).collect();
    Ok((out.loss, rows(&out.grad_frontal), rows(&out.grad_profile)))
}

/// Mutual-information lower bound on a noisy-copy toy joint.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (classes, diagonal_mass, k, batch_size, seeds, seed=0, temperature=None))]
fn mi_bound(
    py: Python<'_>,
    classes: usize,
    diagonal_mass: f64,
    k: usize,
    batch_size: usize,
    seeds: u64,
    seed: u64,
    temperature: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let joint = DiscreteToyJoint::noisy_copy(classes, diagonal_mass).map_err(err)?;
    let tau = match temperature {
        Some(t) => t,
        None => matched_temperature(&joint).map_err(err)?,
    };
    serialize(
        py,
        &contrastive::mi_bound_study(&joint, k, batch_size, seeds, seed, tau).map_err(err)?,
    )
}

/// Finite-difference check of every loss module.
#[pyfunction]
#[pyo3(signature = (config_json=None, configurations=5, seed=0))]
fn gradcheck(py: Python<'_>, config_json: Option<&str>, configurations: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = train_config(config_json)?;
    let report = pacm::gradcheck::run_gradcheck(&cfg, configurations, seed).map_err(err)?;
    let out = serialize(py, &report)?;
    out.bind(py).set_item("passed", report.passed())?;
    Ok(out)
}

#[pymodule]
fn _pacm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(verification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(tar_at_far, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(rank1_identification, m)?)?;
    m.add_function(wrap_pyfunction!(pac_loss_in_batch, m)?)?;
    m.add_function(wrap_pyfunction!(mi_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("TEMPERATURE", contrastive::DEFAULT_TEMPERATURE)?;
    Ok(())
}
