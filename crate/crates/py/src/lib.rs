//! Python bindings for the perturbation toolkit. Datasets and models are
//! thin handles over the core types; attacks and reports come back as plain
//! dicts so callers can feed them straight into json/pandas.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use ::deepfool::attacks::{
    deepfool_binary, deepfool_multiclass, fast_gradient_sign as fgs, AttackConfig, AttackResult,
    AttackSpec,
};
use ::deepfool::data::{self, Dataset, Sample};
use ::deepfool::models::{
    load_model, model_hash, predict_label, save_model, AnyClassifier, Classifier, ModelFile,
};
use ::deepfool::robustness::{evaluate_robustness, EvalOptions};
use ::deepfool::training::{self, ArchSpec, FinetuneConfig, TrainConfig};
use ::deepfool::{DenseTensor, Error};

fn pyerr(e: Error) -> PyErr {
    match &e {
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::IndexOutOfBounds(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Lossless bridge for report structs that already define a JSON shape.
fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let converted = items
                .iter()
                .map(|item| json_to_py(py, item))
                .collect::<PyResult<Vec<_>>>()?;
            Ok(PyList::new(py, converted)?.unbind().into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            Ok(dict.unbind().into_any())
        }
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Labeled samples with a fixed input dimension and class count.
#[pyclass(name = "Dataset", module = "deepfool_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Gaussian class clusters on random centers; deterministic in the seed.
    #[staticmethod]
    fn blobs(dims: usize, classes: usize, per_class: usize, spread: f64, seed: u64) -> PyResult<Self> {
        let inner = data::synth_blobs(dims, classes, per_class, spread, seed).map_err(pyerr)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (features, labels, num_classes=None, feature_range=None))]
    fn from_arrays(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: Option<usize>,
        feature_range: Option<(f64, f64)>,
    ) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if features.is_empty() {
            return Err(PyValueError::new_err("dataset needs at least one sample"));
        }
        let dim = features[0].len();
        let classes = num_classes.unwrap_or_else(|| labels.iter().map(|&y| y + 1).max().unwrap_or(0));
        let samples = features
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(id, (row, y))| {
                Ok(Sample {
                    id,
                    x: DenseTensor::from_vec(row).map_err(pyerr)?,
                    y,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = Dataset::new(samples, dim, classes, feature_range).map_err(pyerr)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::load_csv(&path).map_err(pyerr)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        data::save_csv(&self.inner, &path).map_err(pyerr)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn feature_range(&self) -> Option<(f64, f64)> {
        self.inner.feature_range()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner
            .samples()
            .iter()
            .map(|s| s.x.data().to_vec())
            .collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.samples().iter().map(|s| s.y).collect()
    }

    /// Disjoint shuffled fractions; (0.7, 0.3) is a 70/30 split.
    fn split(&self, train_fraction: f64, test_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) =
            data::split(&self.inner, (train_fraction, test_fraction), seed).map_err(pyerr)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    fn subsample(&self, count: usize, seed: u64) -> Self {
        PyDataset {
            inner: self.inner.subsample(count, seed),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, input_dim={}, num_classes={})",
            self.inner.len(),
            self.inner.input_dim(),
            self.inner.num_classes()
        )
    }
}

/// A serialized classifier plus optional class names.
#[pyclass(name = "Model", module = "deepfool_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelFile,
}

impl PyModel {
    fn classifier(&self) -> &AnyClassifier {
        &self.inner.classifier
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(&path).map_err(pyerr)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(pyerr)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        let x = DenseTensor::from_vec(x).map_err(pyerr)?;
        predict_label(self.classifier(), &x).map_err(pyerr)
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = DenseTensor::from_vec(x).map_err(pyerr)?;
        Ok(self
            .classifier()
            .logits(&x)
            .map_err(pyerr)?
            .data()
            .to_vec())
    }

    /// Hex digest of the serialized model; stable across processes.
    fn hash(&self) -> PyResult<String> {
        model_hash(&self.inner).map_err(pyerr)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        training::accuracy(self.classifier(), &data.inner).map_err(pyerr)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.classifier().input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.classifier().num_classes()
    }

    #[getter]
    fn class_names(&self) -> Option<Vec<String>> {
        self.inner.class_names.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, num_classes={})",
            self.classifier().input_dim(),
            self.classifier().num_classes()
        )
    }
}

/// Trains a fully connected ReLU net and returns it with per-epoch stats.
#[pyfunction]
#[pyo3(signature = (
    data, arch, *, eval=None, epochs=10, learning_rate=0.05, momentum=0.9,
    batch_size=32, seed=0, init_scale=1.0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    arch: &str,
    eval: Option<&PyDataset>,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    init_scale: f64,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let arch = ArchSpec::parse(arch).map_err(pyerr)?;
    let cfg = TrainConfig {
        learning_rate,
        momentum,
        batch_size,
        epochs,
        seed,
        weight_init_scale: init_scale,
    };
    let (model, stats) =
        training::train(&arch, &data.inner, eval.map(|e| &e.inner), &cfg).map_err(pyerr)?;
    let model = PyModel {
        inner: ModelFile::bare(AnyClassifier::Mlp(model)),
    };
    Ok((model, to_py(py, &stats)?))
}

fn attack_result_to_py(
    py: Python<'_>,
    x: &DenseTensor,
    result: &AttackResult,
    cfg: &AttackConfig,
) -> PyResult<Py<PyAny>> {
    let dict = PyDict::new(py);
    dict.set_item("perturbation", result.perturbation.data().to_vec())?;
    dict.set_item(
        "adversarial_input",
        result.adversarial_input(x, cfg).map_err(pyerr)?.data().to_vec(),
    )?;
    dict.set_item("iterations", result.iterations)?;
    dict.set_item("original_label", result.original_label)?;
    dict.set_item("adversarial_label", result.adversarial_label)?;
    dict.set_item("fooled", result.fooled)?;
    dict.set_item("norm2_raw", result.norm2_raw)?;
    dict.set_item("norm2_overshoot", result.norm2_overshoot)?;
    dict.set_item("norm_inf_raw", result.norm_inf_raw)?;
    dict.set_item("norm_inf_overshoot", result.norm_inf_overshoot)?;
    Ok(dict.unbind().into_any())
}

/// Smallest-step boundary search from `x`; pass `p=float("inf")` for the
/// supremum norm. Returns a dict with the perturbation and labels.
#[pyfunction]
#[pyo3(signature = (model, x, *, origin=None, overshoot=0.02, max_iterations=50, p=2.0, clip=None))]
#[allow(clippy::too_many_arguments)]
fn deepfool(
    py: Python<'_>,
    model: &PyModel,
    x: Vec<f64>,
    origin: Option<usize>,
    overshoot: f64,
    max_iterations: usize,
    p: f64,
    clip: Option<(f64, f64)>,
) -> PyResult<Py<PyAny>> {
    let x = DenseTensor::from_vec(x).map_err(pyerr)?;
    let cfg = AttackConfig {
        overshoot,
        max_iterations,
        p,
        clip,
        ..AttackConfig::default()
    };
    let f = model.classifier();
    let result = if f.num_classes() == 1 {
        deepfool_binary(f, &x, origin, &cfg)
    } else {
        deepfool_multiclass(f, &x, origin, &cfg)
    }
    .map_err(pyerr)?;
    attack_result_to_py(py, &x, &result, &cfg)
}

/// One signed-gradient step of the given strength; returns the perturbation.
#[pyfunction]
fn fast_gradient_sign(
    model: &PyModel,
    x: Vec<f64>,
    label: usize,
    epsilon: f64,
) -> PyResult<Vec<f64>> {
    let x = DenseTensor::from_vec(x).map_err(pyerr)?;
    let r = fgs(model.classifier(), &x, label, epsilon).map_err(pyerr)?;
    Ok(r.data().to_vec())
}

/// Runs one attack over a dataset and returns the full report as a dict
/// (metadata, per-sample records, aggregates). Attack names follow the CLI:
/// "deepfool", "fgs", "fgs:EPSILON", "oracle".
#[pyfunction]
#[pyo3(signature = (
    model, data, *, attack="deepfool", limit=None, threads=1, seed=0,
    include_misclassified=false, wall_times=false
))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    attack: &str,
    limit: Option<usize>,
    threads: usize,
    seed: u64,
    include_misclassified: bool,
    wall_times: bool,
) -> PyResult<Py<PyAny>> {
    let spec = AttackSpec::parse(attack)
        .map_err(pyerr)?
        .ok_or_else(|| PyValueError::new_err("evaluate needs an actual attack, not 'none'"))?;
    let opts = EvalOptions {
        exclude_misclassified: !include_misclassified,
        limit,
        threads,
        deterministic_timing: !wall_times,
        seed,
    };
    let hash = model_hash(&model.inner).map_err(pyerr)?;
    let report =
        evaluate_robustness(model.classifier(), &hash, &data.inner, &spec, &opts).map_err(pyerr)?;
    to_py(py, &report)
}

/// Continues training on an adversarially perturbed copy of `data` and
/// returns the tuned model, the per-epoch robustness trace, and the
/// perturbed-set statistics (None for the `attack="none"` clean control).
#[pyfunction]
#[pyo3(signature = (
    model, data, *, attack="deepfool", alpha=1.0, extra_epochs=5, lr_factor=0.5,
    learning_rate=0.05, momentum=0.9, batch_size=32, seed=0, rho_eval=None, eval=None
))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    attack: &str,
    alpha: f64,
    extra_epochs: usize,
    lr_factor: f64,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    rho_eval: Option<&PyDataset>,
    eval: Option<&PyDataset>,
) -> PyResult<(PyModel, Py<PyAny>, Py<PyAny>)> {
    let mlp = match model.classifier() {
        AnyClassifier::Mlp(m) => m.clone(),
        AnyClassifier::Affine(_) => {
            return Err(PyValueError::new_err(
                "fine-tuning needs a layered model, not an affine one",
            ))
        }
    };
    let spec = AttackSpec::parse(attack).map_err(pyerr)?;
    let (train_set, stats) = match &spec {
        Some(spec) => {
            let (set, stats) =
                training::build_adversarial_set(model.classifier(), &data.inner, spec, alpha)
                    .map_err(pyerr)?;
            (set, Some(stats))
        }
        None => (data.inner.clone(), None),
    };
    let base = TrainConfig {
        learning_rate,
        momentum,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let cfg = FinetuneConfig {
        extra_epochs,
        lr_factor,
        ..FinetuneConfig::default()
    };
    let rho_set = rho_eval.map(|d| &d.inner).unwrap_or(&data.inner);
    let (tuned, trace) = training::finetune(
        &mlp,
        &train_set,
        rho_set,
        eval.map(|e| &e.inner),
        &base,
        &cfg,
    )
    .map_err(pyerr)?;
    let tuned = PyModel {
        inner: ModelFile {
            classifier: AnyClassifier::Mlp(tuned),
            class_names: model.inner.class_names.clone(),
        },
    };
    let stats_py = match &stats {
        Some(s) => to_py(py, s)?,
        None => py.None(),
    };
    Ok((tuned, to_py(py, &trace)?, stats_py))
}

#[pymodule]
fn deepfool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(self::deepfool, m)?)?;
    m.add_function(wrap_pyfunction!(fast_gradient_sign, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
