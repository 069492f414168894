//! Python bindings: dataset generation and loading, training, evaluation,
//! checkpoints, and the closed-form loss functions.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mgvmoe::autodiff::{Rng, Tape, Tensor};
use mgvmoe::data::{generate_dataset as generate, split_zero_shot, Dataset as CoreDataset, DatasetConfig, DatasetSplit};
use mgvmoe::encoders::Task;
use mgvmoe::harness::{self, Checkpoint as CoreCheckpoint, MetricsReport, TrainConfig as CoreConfig};
use mgvmoe::{head, mgvat, vmoe};

fn to_py(e: mgvmoe::Error) -> PyErr {
    match e {
        mgvmoe::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse::<Task>().map_err(to_py)
}

/// Matrix from a list of columns (`columns[j]` is column j).
fn matrix(columns: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let rows = columns.first().map_or(0, Vec::len);
    if columns.iter().any(|c| c.len() != rows) {
        return Err(PyValueError::new_err("columns have different lengths"));
    }
    let data = (0..rows).flat_map(|r| columns.iter().map(move |c| c[r])).collect();
    Tensor::new([rows, columns.len()], data).map_err(to_py)
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.cols()).map(|c| t.column_vec(c)).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("accuracy", r.accuracy)?;
    let per = PyDict::new(py);
    for c in &r.per_category {
        per.set_item(c.category, (c.precision, c.recall, c.f1, c.support))?;
    }
    d.set_item("per_category", per)?;
    Ok(d)
}

/// Training hyper-parameters. Keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (preset = "desk", **kwargs))]
    fn new(preset: &str, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = CoreConfig::preset(preset).map_err(to_py)?;
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "beta" => c.beta = v.extract()?,
                    "experts" => c.experts = v.extract()?,
                    "lr" => c.lr = v.extract()?,
                    "batch_size" => c.batch_size = v.extract()?,
                    "epochs" => c.epochs = v.extract()?,
                    "seed" => c.seed = v.extract()?,
                    "d" => c.d = v.extract()?,
                    "h" => c.h = v.extract()?,
                    "eps" => c.eps = v.extract()?,
                    "xi" => c.xi = v.extract()?,
                    "perturbation_steps" => c.perturbation_steps = v.extract()?,
                    "no_vmoe" => c.no_vmoe = v.extract()?,
                    "no_mgvat" => c.no_mgvat = v.extract()?,
                    "max_len" => c.max_len = v.extract()?,
                    "freeze_embeddings" => c.freeze_embeddings = v.extract()?,
                    "task" => c.task = parse_task(&v.extract::<String>()?)?,
                    other => return Err(PyValueError::new_err(format!("unknown config field `{other}`"))),
                }
            }
        }
        c.validate().map_err(to_py)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn experts(&self) -> usize {
        self.inner.experts
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task.to_string()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A synthetic dataset with its vocabulary, lexicon and categories.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (task = "met", seed = 0, samples_per_category = None, noise = None))]
    fn generate(task: &str, seed: u64, samples_per_category: Option<usize>, noise: Option<f64>) -> PyResult<Self> {
        let mut cfg = DatasetConfig::for_task(parse_task(task)?);
        cfg.seed = seed;
        if let Some(n) = samples_per_category {
            cfg.samples_per_category = n;
        }
        if let Some(n) = noise {
            cfg.noise = n;
        }
        Ok(Self {
            inner: generate(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreDataset::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.config.task.to_string()
    }

    /// `(id, name tokens)` per category.
    fn categories(&self) -> Vec<(usize, Vec<String>)> {
        self.inner.categories.iter().map(|c| (c.id, c.name.clone())).collect()
    }

    /// One sample as a dict with the serialized field names.
    fn sample<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {index} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("id", s.id)?;
        d.set_item("tokens", s.tokens.clone())?;
        d.set_item("spans", s.spans.iter().map(|sp| (sp.0, sp.1)).collect::<Vec<_>>())?;
        d.set_item("patches", s.patches.clone())?;
        d.set_item("label", s.label)?;
        d.set_item("task", s.task.to_string())?;
        Ok(d)
    }

    /// Seen / validation / unseen category ids for a seed.
    fn split(&self, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let s = self.split_for(seed)?;
        Ok((s.seen, s.validation, s.unseen))
    }
}

impl PyDataset {
    fn split_for(&self, seed: u64) -> PyResult<DatasetSplit> {
        let ids: Vec<usize> = self.inner.categories.iter().map(|c| c.id).collect();
        split_zero_shot(&ids, &self.inner.samples, self.inner.config.split, seed).map_err(to_py)
    }
}

/// Trained parameters with their config and RNG position.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.inner.model.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.model.store.num_scalars()
    }

    /// Metrics on `set` ("seen", "validation" or "unseen") of the
    /// checkpoint's own split.
    #[pyo3(signature = (dataset, set = "unseen"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, set: &str) -> PyResult<Bound<'py, PyDict>> {
        let split = dataset.split_for(self.inner.model.config.seed)?;
        let (samples, cats) = match set {
            "seen" => (&split.train, &split.seen),
            "validation" => (&split.val, &split.validation),
            "unseen" => (&split.test, &split.unseen),
            other => return Err(PyValueError::new_err(format!("unknown set `{other}`"))),
        };
        let ev = harness::evaluate(&self.inner.model, &dataset.inner, samples, cats).map_err(to_py)?;
        report_dict(py, &ev.report)
    }
}

/// Trains on the seen categories of the config seed's split. Returns the
/// best-validation checkpoint and the per-epoch log as dicts.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    dataset: &PyDataset,
) -> PyResult<(PyCheckpoint, Vec<Bound<'py, PyDict>>)> {
    let split = dataset.split_for(config.inner.seed)?;
    let outcome = harness::train(&config.inner, &dataset.inner, &split).map_err(to_py)?;
    let mut log = Vec::with_capacity(outcome.log.len());
    for e in &outcome.log {
        let d = PyDict::new(py);
        d.set_item("epoch", e.epoch)?;
        d.set_item("l_rank", e.l_rank)?;
        d.set_item("l_aux", e.l_aux)?;
        d.set_item("l_reg", e.l_reg)?;
        d.set_item("l_cl", e.l_cl)?;
        d.set_item("l_vat", e.l_vat)?;
        d.set_item("total", e.total)?;
        d.set_item("val_f1", e.val_f1)?;
        d.set_item("val_acc", e.val_acc)?;
        log.push(d);
    }
    Ok((PyCheckpoint { inner: outcome.best }, log))
}

/// Mean per-token routing entropy of `K × tokens` gates given as columns.
#[pyfunction]
fn aux_loss(gates: Vec<Vec<f64>>) -> PyResult<f64> {
    let tape = Tape::new();
    let g = tape.leaf(matrix(gates)?);
    Ok(vmoe::aux_loss(g).map_err(to_py)?.item())
}

/// `Σ max(0, 1 − o⁺ + oᵢ)` over the non-gold scores.
#[pyfunction]
fn ranking_loss(scores: Vec<f64>, gold: usize) -> PyResult<f64> {
    if scores.is_empty() {
        return Err(PyValueError::new_err("empty score vector"));
    }
    let tape = Tape::new();
    let o = tape.leaf(Tensor::column(&scores));
    Ok(head::ranking_loss(o, gold).map_err(to_py)?.item())
}

/// Index of the highest score, lowest index on ties.
#[pyfunction]
fn predict(scores: Vec<f64>) -> PyResult<usize> {
    head::predict(&scores).map_err(to_py)
}

/// Symmetric InfoNCE over per-sample text and visual vectors.
#[pyfunction]
fn contrastive_loss(text: Vec<Vec<f64>>, visual: Vec<Vec<f64>>) -> PyResult<f64> {
    let tape = Tape::new();
    let t = tape.leaf(matrix(text)?);
    let v = tape.leaf(matrix(visual)?);
    Ok(mgvat::contrastive_loss(t, v).map_err(to_py)?.item())
}

/// Sample correlation graph of per-sample joint vectors, as rows.
#[pyfunction]
fn correlation_graph(samples: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let g = mgvat::build_graph(&matrix(samples)?);
    Ok(columns(&g.a))
}

/// KL between clean and perturbed correlation scores.
#[pyfunction]
fn vat_loss(samples: Vec<Vec<f64>>, tau: Vec<f64>) -> PyResult<f64> {
    let p = matrix(samples)?;
    let graph = mgvat::build_graph(&p);
    let target = mgvat::score_target(&p, &graph).map_err(to_py)?;
    let tape = Tape::new();
    let pv = tape.constant(p);
    let t = tape.constant(Tensor::column(&tau));
    Ok(mgvat::vat_loss(pv, &graph, t, &target).map_err(to_py)?.item())
}

/// Worst-case shared perturbation of norm `eps`.
#[pyfunction]
#[pyo3(signature = (samples, eps = 0.1, xi = 0.01, seed = 0))]
fn solve_perturbation(samples: Vec<Vec<f64>>, eps: f64, xi: f64, seed: u64) -> PyResult<Vec<f64>> {
    let p = matrix(samples)?;
    let graph = mgvat::build_graph(&p);
    let cfg = mgvat::PerturbationConfig { eps, xi, steps: 1 };
    let tau = mgvat::solve_perturbation(&p, &graph, &cfg, &mut Rng::new(seed)).map_err(to_py)?;
    Ok(tau.data().to_vec())
}

#[pymodule]
#[pyo3(name = "mgvmoe")]
fn mgvmoe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(aux_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_graph, m)?)?;
    m.add_function(wrap_pyfunction!(vat_loss, m)?)?;
    m.add_function(wrap_pyfunction!(solve_perturbation, m)?)?;
    Ok(())
}
