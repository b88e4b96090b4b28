//! Python bindings: tasks, generators, experiments and the closed form.

use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use redact_core::attack::attack_success_rate;
use redact_core::closedform::{self, LabelRedactionPlan};
use redact_core::experiment::{self as exp, ExperimentConfig};
use redact_core::metrics::evaluate;
use redact_core::nn::param_digest;
use redact_core::rng::rng;
use redact_core::toy::{
    train_generator, ConditionalGenerator, SyntheticTask, TaskSpec, DEFAULT_SIGMA,
};
use redact_core::{Conditional, Error, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config { .. }
        | Error::Toml(_)
        | Error::InvalidPlan(_)
        | Error::InvalidConditional(_)
        | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = redact_core::jsonfmt::to_string_pretty(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_all(task: &SyntheticTask, conds: &[String]) -> redact_core::Result<Vec<Conditional>> {
    conds.iter().map(|c| task.parse(c)).collect()
}

pub fn make_task(
    kind: &str,
    size: usize,
    sigma: Option<f64>,
) -> redact_core::Result<SyntheticTask> {
    let sigma = sigma.unwrap_or(DEFAULT_SIGMA);
    let spec = match kind {
        "kgon" => TaskSpec::Kgon { k: size, sigma },
        "token_attr" | "token-attr" => TaskSpec::TokenAttr { dim: size, sigma },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown task kind {other:?}; use kgon or token_attr"
            )))
        }
    };
    SyntheticTask::new(spec)
}

/// Closed-form redaction of an affine map `m` over embedding columns `v`.
pub fn redact_map(
    m: &[Vec<f64>],
    v: &[Vec<f64>],
    redact: &[usize],
    reference: &[usize],
) -> redact_core::Result<(Vec<Vec<f64>>, closedform::RedactionCertificate)> {
    let (m, v) = (Tensor::from_rows(m)?, Tensor::from_rows(v)?);
    if redact.len() != reference.len() {
        return Err(Error::InvalidPlan(
            "redact and reference differ in length".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = redact
        .iter()
        .copied()
        .zip(reference.iter().copied())
        .collect();
    let plan = LabelRedactionPlan::new(v.shape()[1], &pairs)?;
    let m2 = closedform::redact_labels(&m, &v, &plan)?;
    let cert = closedform::verify_redaction(&m, &m2, &v, &plan)?;
    Ok((rows(&m2), cert))
}

/// Synthetic task with analytic class means.
#[pyclass(name = "Task", module = "redact", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTask {
    inner: SyntheticTask,
}

#[pymethods]
impl PyTask {
    /// `kind` is `"kgon"` (size = number of labels) or `"token_attr"` (size = output dimension).
    #[new]
    #[pyo3(signature = (kind, size, sigma=None))]
    fn new(kind: &str, size: usize, sigma: Option<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: make_task(kind, size, sigma).map_err(err)?,
        })
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn vocab(&self) -> Vec<String> {
        self.inner.vocab()
    }

    fn conditionals(&self) -> Vec<String> {
        self.inner
            .conditionals()
            .iter()
            .map(|c| self.inner.describe(c))
            .collect()
    }

    fn mean(&self, conditional: &str) -> PyResult<Vec<f64>> {
        let c = self.inner.parse(conditional).map_err(err)?;
        self.inner.mean(&c).map_err(err)
    }

    fn sample(&self, conditional: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.parse(conditional).map_err(err)?;
        Ok(rows(
            &self.inner.sample(&c, n, &mut rng(seed)).map_err(err)?,
        ))
    }

    fn __repr__(&self) -> String {
        format!("Task({:?})", self.inner.spec())
    }
}

/// Conditional generator checkpoint.
#[pyclass(name = "Generator", module = "redact", skip_from_py_object)]
#[derive(Clone)]
pub struct PyGenerator {
    inner: ConditionalGenerator,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: exp::load_generator(Path::new(path)).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        exp::save_generator(&self.inner, 0, 0, Path::new(path)).map_err(err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn topology(&self) -> &'static str {
        self.inner.topology().tag()
    }

    /// Hex digest over every parameter value.
    fn digest(&self) -> String {
        exp::hex_digest(param_digest(&self.inner, ""))
    }

    /// One sample per conditional, with latents given row by row.
    fn generate(
        &self,
        task: &PyTask,
        conditionals: Vec<String>,
        z: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let conds = parse_all(&task.inner, &conditionals).map_err(err)?;
        let z = Tensor::from_rows(&z).map_err(err)?;
        Ok(rows(&self.inner.generate(&conds, &z).map_err(err)?))
    }

    /// Closed-form redaction of an affine label conditioner. Returns the
    /// edited generator and its certificate.
    fn redact_exact<'py>(
        &self,
        py: Python<'py>,
        redact: Vec<usize>,
        reference: Vec<usize>,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let pairs: Vec<(usize, usize)> = redact.into_iter().zip(reference).collect();
        let labels = self.inner.arch.vocab;
        let plan = LabelRedactionPlan::new(labels, &pairs).map_err(err)?;
        let (g, cert) = closedform::redact_affine_generator(&self.inner, &plan).map_err(err)?;
        Ok((Self { inner: g }, json(py, &cert)?))
    }

    /// True when the main network and frozen parameters match `teacher`.
    fn frozen_intact(&self, teacher: &PyGenerator) -> bool {
        exp::frozen_intact(&teacher.inner, &self.inner)
    }
}

/// Experiment config with the pipeline phases as methods.
#[pyclass(name = "Experiment", module = "redact", skip_from_py_object)]
#[derive(Clone)]
pub struct PyExperiment {
    inner: ExperimentConfig,
}

impl PyExperiment {
    fn parts(&self) -> PyResult<(SyntheticTask, redact_core::redistill::RedactionSpec)> {
        let task = self.inner.task().map_err(err)?;
        let spec = self.inner.spec(&task).map_err(err)?;
        Ok((task, spec))
    }
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: exp::preset(name).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn task(&self) -> PyResult<PyTask> {
        Ok(PyTask {
            inner: self.inner.task().map_err(err)?,
        })
    }

    /// Builds and trains the teacher exactly as a full run does.
    fn train(&self) -> PyResult<PyGenerator> {
        let task = self.inner.task().map_err(err)?;
        let arch = self.inner.model.arch(&task).map_err(err)?;
        let mut g = ConditionalGenerator::build(&arch, exp::phase_seed(self.inner.seed, "model"))
            .map_err(err)?;
        train_generator(&mut g, &task, &self.inner.train).map_err(err)?;
        Ok(PyGenerator { inner: g })
    }

    /// Distills with the config's distillation section.
    fn distill<'py>(
        &self,
        py: Python<'py>,
        teacher: &PyGenerator,
    ) -> PyResult<(PyGenerator, Bound<'py, PyAny>)> {
        let (task, spec) = self.parts()?;
        let dc = self
            .inner
            .distill
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("the config has no distill section"))?;
        let (g, r) = exp::distill_any(&teacher.inner, &spec, &task, dc).map_err(err)?;
        Ok((
            PyGenerator { inner: g },
            json(py, &exp::summarize_distill(&r, dc.steps))?,
        ))
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        student: &PyGenerator,
        teacher: &PyGenerator,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (task, spec) = self.parts()?;
        let m = evaluate(
            &student.inner,
            &teacher.inner,
            &task,
            &spec,
            &self.inner.eval,
        )
        .map_err(err)?;
        json(py, &m)
    }

    fn attack<'py>(&self, py: Python<'py>, model: &PyGenerator) -> PyResult<Bound<'py, PyAny>> {
        let (task, spec) = self.parts()?;
        let a = self
            .inner
            .attack
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("the config has no attack section"))?;
        let s =
            attack_success_rate(&model.inner, &task, &spec, &a.config(), a.attacks).map_err(err)?;
        json(py, &exp::attack_outcome(&s))
    }

    /// Full pipeline. Returns the report as a dict.
    #[pyo3(signature = (out_dir=None, threads=1))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        out_dir: Option<&str>,
        threads: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r =
            exp::run_experiment_with(&self.inner, out_dir.map(Path::new), threads).map_err(err)?;
        json(py, &r)
    }

    fn __repr__(&self) -> String {
        format!(
            "Experiment({:?}, seed={})",
            self.inner.name, self.inner.seed
        )
    }
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    exp::PRESETS.to_vec()
}

#[pyfunction]
fn phase_seed(global: u64, phase: &str) -> u64 {
    exp::phase_seed(global, phase)
}

/// Closed-form edit of an affine map `m` (r x r_e) over embedding columns
/// `v` (r_e x k). Returns `(m_new, certificate)`.
#[pyfunction]
fn redact_labels<'py>(
    py: Python<'py>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    redact: Vec<usize>,
    reference: Vec<usize>,
) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyAny>)> {
    let (m2, cert) = redact_map(&m, &v, &redact, &reference).map_err(err)?;
    Ok((m2, json(py, &cert)?))
}

#[pymodule]
fn redact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(phase_seed, m)?)?;
    m.add_function(wrap_pyfunction!(redact_labels, m)?)?;
    Ok(())
}
