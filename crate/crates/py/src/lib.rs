// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: generate data, train, assign, steer and evaluate.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use saemnesia::concepts::{centralization_report, compute_stats, ConceptAssignment};
use saemnesia::config::RunConfig;
use saemnesia::eval::Evaluator;
use saemnesia::sae::SaeParams;
use saemnesia::steering::{build_plan, uniform_multipliers, SteeringPlan};
use saemnesia::store::{self, CheckpointMeta};
use saemnesia::synth::generate_split;
use saemnesia::trainer::run_pipeline;
use saemnesia::{Concept, Domain, Error};

create_exception!(saemnesia_py, SaemnesiaError, PyException);
create_exception!(saemnesia_py, DivergenceError, SaemnesiaError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        _ => SaemnesiaError::new_err(e.to_string()),
    }
}

fn store_err(e: store::StoreError) -> PyErr {
    py_err(e.into())
}

fn config(text: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let cfg = RunConfig::from_toml(text.unwrap_or("")).map_err(py_err)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// A labeled activation dataset.
#[pyclass(module = "saemnesia_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset(saemnesia::Dataset);

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        store::load_dataset(&path).map(Self).map_err(store_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_dataset(&path, &self.0).map_err(store_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn timesteps(&self) -> u16 {
        self.0.timesteps
    }

    #[getter]
    fn objects(&self) -> Vec<String> {
        self.0.objects.clone()
    }

    #[getter]
    fn styles(&self) -> Vec<String> {
        self.0.styles.clone()
    }

    /// Activation vectors, one list per sample.
    fn activations(&self) -> Vec<Vec<f32>> {
        self.0.samples.iter().map(|s| s.x.clone()).collect()
    }

    /// `(timestep, object, style)` per sample; missing labels are `None`.
    fn labels(&self) -> Vec<(u16, Option<u16>, Option<u16>)> {
        self.0.samples.iter().map(|s| (s.timestep, s.object, s.style)).collect()
    }
}

/// A trained sparse autoencoder.
#[pyclass(module = "saemnesia_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Model {
    params: SaeParams,
    meta: CheckpointMeta,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, meta) = store::load_checkpoint(&path).map_err(store_err)?;
        Ok(Self { params, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_checkpoint(&path, &self.params, &self.meta).map_err(store_err)
    }

    #[getter]
    fn d(&self) -> usize {
        self.params.d()
    }

    #[getter]
    fn n(&self) -> usize {
        self.params.n()
    }

    #[getter]
    fn k(&self) -> usize {
        self.params.k
    }

    #[getter]
    fn phase(&self) -> String {
        self.meta.phase.clone()
    }

    /// Active latents and their values, strongest first.
    fn encode(&self, x: Vec<f32>) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let enc = self.params.encode(&x).map_err(py_err)?;
        Ok((enc.support, enc.values))
    }

    fn reconstruct(&self, x: Vec<f32>) -> PyResult<Vec<f32>> {
        Ok(self.params.encode(&x).map_err(py_err)?.x_hat)
    }
}

/// Concept to latent binding.
#[pyclass(module = "saemnesia_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Assignment(ConceptAssignment);

#[pymethods]
impl Assignment {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        store::load_json(&path, "assignment").map(Self).map_err(store_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_json(&path, "assignment", &self.0).map_err(store_err)
    }

    /// `{"object:3": 17, ...}`
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for e in &self.0.entries {
            d.set_item(e.concept.to_string(), e.latent)?;
        }
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.0.entries.len()
    }
}

/// Per-concept steering rule.
#[pyclass(module = "saemnesia_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Plan(SteeringPlan);

#[pymethods]
impl Plan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        store::load_json(&path, "plan").map(Self).map_err(store_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store::save_json(&path, "plan", &self.0).map_err(store_err)
    }

    fn concepts(&self) -> Vec<String> {
        self.0.concepts().iter().map(Concept::to_string).collect()
    }

    /// Reconstructs `x` at timestep `t` with the named concepts erased.
    fn steer_reconstruct(&self, model: &Model, data: &Dataset, x: Vec<f32>, t: usize, active: Vec<String>) -> PyResult<Vec<f32>> {
        let active = active
            .iter()
            .map(|n| data.0.find_concept(n))
            .collect::<saemnesia::Result<Vec<_>>>()
            .map_err(py_err)?;
        self.0.steer_reconstruct(&model.params, &x, t, &active).map_err(py_err)
    }
}

/// Synthetic dataset from an optional TOML config.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, split=0))]
fn generate(config: Option<&str>, seed: Option<u64>, split: u32) -> PyResult<Dataset> {
    let cfg = self::config(config, seed)?;
    generate_split(&cfg.synth, split).map(Dataset).map_err(py_err)
}

/// Both training phases. Returns `(pretrained, model, assignment)`.
#[pyfunction]
#[pyo3(signature = (data, config=None, seed=None))]
fn train(py: Python<'_>, data: &Dataset, config: Option<&str>, seed: Option<u64>) -> PyResult<(Model, Model, Assignment)> {
    let cfg = self::config(config, seed)?;
    let out = py
        .detach(|| run_pipeline(&data.0, cfg.model, &cfg.unsupervised, &cfg.supervised))
        .map_err(py_err)?;
    let meta = |p: &SaeParams, tc: &saemnesia::TrainConfig| {
        CheckpointMeta::for_params(p, tc.phase.name(), tc.seed, Some(tc.weights), tc.epochs)
    };
    Ok((
        Model {
            meta: meta(&out.pretrained, &cfg.unsupervised),
            params: out.pretrained,
        },
        Model {
            meta: meta(&out.model, &cfg.supervised),
            params: out.model,
        },
        Assignment(out.assignment),
    ))
}

/// Top/runner-up score ratio of every assigned concept.
#[pyfunction]
#[pyo3(signature = (model, data, assignment, margin=2.0))]
fn centralization<'py>(py: Python<'py>, model: &Model, data: &Dataset, assignment: &Assignment, margin: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let table = saemnesia::ScoreTable::from_model(&model.params, &data.0, saemnesia::concepts::DEFAULT_DELTA).map_err(py_err)?;
    let report = centralization_report(&table, &assignment.0, margin).map_err(py_err)?;
    report
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("concept", data.0.concept_name(r.concept))?;
            d.set_item("latent", r.assigned)?;
            d.set_item("top_latent", r.top_latent)?;
            d.set_item("ratio", r.ratio)?;
            d.set_item("dominant", r.dominant)?;
            Ok(d)
        })
        .collect()
}

/// Plan with one multiplier for the named concepts (all objects if none).
#[pyfunction]
#[pyo3(signature = (model, data, assignment, multiplier=-10.0, concepts=None))]
fn plan(model: &Model, data: &Dataset, assignment: &Assignment, multiplier: f64, concepts: Option<Vec<String>>) -> PyResult<Plan> {
    let concepts: Vec<Concept> = match concepts {
        Some(names) => names
            .iter()
            .map(|n| data.0.find_concept(n))
            .collect::<saemnesia::Result<_>>()
            .map_err(py_err)?,
        None => assignment.0.concepts().filter(|c| c.domain == Domain::Object).collect(),
    };
    let stats = compute_stats(&model.params, &data.0).map_err(py_err)?;
    build_plan(&stats, &assignment.0, &concepts, &uniform_multipliers(&concepts, multiplier))
        .map(Plan)
        .map_err(py_err)
}

/// Unlearning and retention per plan concept, probes fit on `probe_data`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, plan: &Plan, probe_data: &Dataset, eval_data: &Dataset) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let reports = py
        .detach(|| {
            let ev = Evaluator::new(&model.params, &probe_data.0, &eval_data.0)?;
            plan.0
                .concepts()
                .iter()
                .map(|&c| ev.evaluate_unlearning(&plan.0, c))
                .collect::<saemnesia::Result<Vec<_>>>()
        })
        .map_err(py_err)?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("concept", eval_data.0.concept_name(r.target))?;
            d.set_item("ua", r.ua)?;
            d.set_item("ira", r.ira)?;
            d.set_item("cra", r.cra)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn saemnesia_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Assignment>()?;
    m.add_class::<Plan>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(centralization, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("SaemnesiaError", m.py().get_type::<SaemnesiaError>())?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
