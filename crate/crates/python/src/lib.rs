//! Python module `posrank`: the simulator, metrics, allocation and model
//! checkpoints of the core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use engine as core;
use core::config::ConfigFile;
use core::features::Traffic;
use core::metrics::ScoredImpression;
use core::model::{ModelConfig, Variant};
use core::pipeline::{self, DataOptions};
use core::trainer::TrainConfig;
use core::world::{BrowsingSegment, SimConfig, SyntheticWorld};

fn py_err(e: core::Error) -> PyErr {
    match e {
        core::Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        core::Error::Io(_) | core::Error::Parse { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn variant(tag: &str) -> PyResult<Variant> {
    tag.parse().map_err(py_err)
}

/// Config text with a `[world]` section (or bare keys) to a world config.
fn sim_config(text: &str, seed: Option<u64>) -> PyResult<SimConfig> {
    let cfg = ConfigFile::parse(text).map_err(py_err)?;
    let section = if cfg.section_names().any(|s| s == "world") { "world" } else { "" };
    let mut sim = SimConfig::from_section(&cfg.section(section)).map_err(py_err)?;
    if let Some(s) = seed {
        sim.seed = s;
    }
    Ok(sim)
}

/// The eight variant tags.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.tag()).collect()
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    core::metrics::auc(&scores, &labels).map_err(py_err)
}

/// Returns `(pauc, [(position, impressions, auc or None), ...])`.
#[pyfunction]
fn pauc(scores: Vec<f64>, labels: Vec<u8>, positions: Vec<u32>) -> PyResult<(f64, Vec<(u32, usize, Option<f64>)>)> {
    if scores.len() != labels.len() || scores.len() != positions.len() {
        return Err(PyValueError::new_err("scores, labels and positions differ in length"));
    }
    let rows: Vec<ScoredImpression> = scores
        .iter()
        .zip(&labels)
        .zip(&positions)
        .map(|((&score, &label), &position)| ScoredImpression { score, label, position, traffic: Traffic::Regular })
        .collect();
    let r = core::metrics::pauc(&rows).map_err(py_err)?;
    Ok((r.pauc, r.positions.iter().map(|p| (p.position, p.impressions, p.auc)).collect()))
}

/// Greedy top-down allocation: `(slots, value)` with `slots[k-1]` the
/// candidate at position `k`.
#[pyfunction]
fn greedy_allocate(ctr: Vec<Vec<f64>>, bids: Vec<f64>) -> PyResult<(Vec<usize>, f64)> {
    let (_, greedy, _) = pipeline::allocate_matrix(&ctr, &bids).map_err(py_err)?;
    Ok((greedy.slots, greedy.value))
}

#[pyfunction]
fn exhaustive_allocate(ctr: Vec<Vec<f64>>, bids: Vec<f64>) -> PyResult<(Vec<usize>, f64)> {
    match pipeline::allocate_matrix(&ctr, &bids).map_err(py_err)? {
        (_, _, Some(best)) => Ok((best.slots, best.value)),
        _ => Err(PyValueError::new_err("instance too large for exhaustive search")),
    }
}

/// Simulates a world and writes the train/test/history files to `out`.
#[pyfunction]
#[pyo3(signature = (config, out, seed=None, force=false))]
fn generate(config: &str, out: PathBuf, seed: Option<u64>, force: bool) -> PyResult<(usize, usize, usize)> {
    let sim = sim_config(config, seed)?;
    let s = pipeline::generate_to_dir(&sim, &out, force).map_err(py_err)?;
    Ok((s.train_impressions, s.test_impressions, s.history_clicks))
}

/// Largest finite-difference relative error of one variant at the desk size.
#[pyfunction]
#[pyo3(signature = (variant_tag, seed=1))]
fn gradcheck(variant_tag: &str, seed: u64) -> PyResult<f64> {
    let cfg = ModelConfig::desk(pipeline::world_vocab_sizes(&SimConfig::default()));
    let lines = pipeline::gradcheck_variants(&cfg, &[variant(variant_tag)?], 1e-6, seed).map_err(py_err)?;
    Ok(lines[0].report.max_rel_error)
}

#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: SyntheticWorld,
    config: SimConfig,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (config="", seed=None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let config = sim_config(config, seed)?;
        let inner = core::world::generate_world(&config, config.seed).map_err(py_err)?;
        Ok(PyWorld { inner, config })
    }

    fn oracle_ctr(&self, user: usize, query: usize, item: usize, position: usize) -> PyResult<f64> {
        let c = &self.config;
        if user >= c.users || query >= c.queries || item >= c.items || position == 0 || position > c.positions {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.oracle_ctr(user, query, item, position))
    }

    fn segment(&self, user: usize) -> PyResult<&'static str> {
        if user >= self.config.users {
            return Err(PyValueError::new_err("user out of range"));
        }
        Ok(match self.inner.segment(user) {
            BrowsingSegment::Shallow => "shallow",
            BrowsingSegment::Deep => "deep",
        })
    }

    /// Examination probability per position for `"shallow"` or `"deep"` users.
    fn examination(&self, segment: &str) -> PyResult<Vec<f64>> {
        let seg = match segment {
            "shallow" => BrowsingSegment::Shallow,
            "deep" => BrowsingSegment::Deep,
            other => return Err(PyValueError::new_err(format!("unknown segment '{other}'"))),
        };
        Ok(self.inner.examination_table(seg))
    }

    fn config(&self) -> String {
        self.config.render()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: core::model::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: core::checkpoint::load_checkpoint(&path).map_err(py_err)? })
    }

    /// Trains one variant on a generated dataset directory.
    #[staticmethod]
    #[pyo3(signature = (dataset, variant_tag, epochs=2, seed=1))]
    fn train(py: Python<'_>, dataset: PathBuf, variant_tag: &str, epochs: usize, seed: u64) -> PyResult<Self> {
        let v = variant(variant_tag)?;
        let dir = pipeline::read_dataset_dir(&dataset).map_err(py_err)?;
        let model = py
            .detach(|| {
                let data = dir.prepare(ModelConfig::desk([1; 8]).seq_len, &DataOptions::default())?;
                let mut cfg = ModelConfig::desk(data.vocab.sizes());
                cfg.positions = dir.sim.positions;
                let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
                pipeline::train_variant(&data, &cfg, v, &tc).map(|run| run.model)
            })
            .map_err(py_err)?;
        Ok(PyModel { inner: model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::checkpoint::save_checkpoint(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.tag()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `[(set, auc, pauc)]` for the regular and randomized test-day traffic.
    fn evaluate(&self, dataset: PathBuf) -> PyResult<Vec<(String, Option<f64>, f64)>> {
        let dir = pipeline::read_dataset_dir(&dataset).map_err(py_err)?;
        let data = dir.prepare(self.inner.config.seq_len, &DataOptions::default()).map_err(py_err)?;
        pipeline::check_compatible(&self.inner, &data, dir.sim.positions).map_err(py_err)?;
        let r = pipeline::evaluate_model(&self.inner, &data).map_err(py_err)?;
        Ok(vec![
            ("regular".into(), r.regular.auc, r.regular.pauc),
            ("randomized".into(), r.randomized.auc, r.randomized.pauc),
        ])
    }
}

#[pymodule]
fn posrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(pauc, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_allocate, m)?)?;
    m.add_function(wrap_pyfunction!(exhaustive_allocate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
