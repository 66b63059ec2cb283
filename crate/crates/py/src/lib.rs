//! Python bindings. Reports cross the boundary as plain dicts (via JSON) so
//! the Python side needs no mirror classes.

use std::fs::File;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};
use srsq_core::design::{self, DesignParams, RoleAssignment, SamplingDesign};
use srsq_core::experiment::{self, ExperimentConfig, PopulationSource};
use srsq_core::population::{self, PopulationFrame, SchoolRecord, SyntheticSpec, Variable};
use srsq_core::recruitment::{self, ReplicationOutcome};
use srsq_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn variable(name: &str) -> PyResult<Variable> {
    Variable::ALL
        .into_iter()
        .find(|v| v.column() == name || v.tag().to_string() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown variable `{name}`")))
}

/// A school population (standardized on construction when possible).
#[pyclass(name = "Population", frozen)]
struct PyPopulation {
    frame: Arc<PopulationFrame>,
}

#[pymethods]
impl PyPopulation {
    #[getter]
    fn name(&self) -> &str {
        self.frame.name()
    }

    fn __len__(&self) -> usize {
        self.frame.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Population(name={:?}, n={})",
            self.frame.name(),
            self.frame.len()
        )
    }

    #[getter]
    fn school_ids(&self) -> Vec<String> {
        self.frame
            .records()
            .iter()
            .map(|r| r.school_id.clone())
            .collect()
    }

    #[getter]
    fn group_ids(&self) -> Vec<String> {
        self.frame
            .records()
            .iter()
            .map(|r| r.group_id.clone())
            .collect()
    }

    #[getter]
    fn is_standardized(&self) -> bool {
        self.frame.is_standardized()
    }

    /// Raw column for `var_a`/`var_b`/`var_c` (or `a`/`b`/`c`).
    fn raw(&self, var: &str) -> PyResult<Vec<f64>> {
        Ok(self.frame.raw_column(variable(var)?))
    }

    fn z(&self, var: &str) -> PyResult<Vec<f64>> {
        self.frame.z_column(variable(var)?).map_err(py_err)
    }

    fn standardize(&self) -> PyResult<PyPopulation> {
        let frame = population::standardize((*self.frame).clone()).map_err(py_err)?;
        Ok(PyPopulation {
            frame: Arc::new(frame),
        })
    }

    /// Full population plus one standardized population per group, and the
    /// skip log as a list of dicts.
    fn partition<'py>(&self, py: Python<'py>) -> PyResult<(Vec<PyPopulation>, Bound<'py, PyAny>)> {
        let part = population::partition_by_group(&self.frame).map_err(py_err)?;
        let skipped = to_py(py, &part.skipped)?;
        let pops = part
            .populations
            .into_iter()
            .map(|f| PyPopulation { frame: Arc::new(f) })
            .collect();
        Ok((pops, skipped))
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = File::create(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.frame.write_csv(file).map_err(py_err)
    }
}

/// Generate a raw synthetic population from a spec dict.
#[pyfunction]
fn generate_synthetic(spec: &Bound<'_, PyAny>) -> PyResult<PyPopulation> {
    let spec: SyntheticSpec = from_py(spec)?;
    let frame = population::generate_synthetic(&spec).map_err(py_err)?;
    Ok(PyPopulation {
        frame: Arc::new(frame),
    })
}

/// Load a population CSV (`school_id,group_id,var_a,var_b,var_c`).
#[pyfunction]
#[pyo3(signature = (path, name = "national"))]
fn load_population(path: PathBuf, name: &str) -> PyResult<PyPopulation> {
    let file =
        File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let frame = population::load_population(file, name).map_err(py_err)?;
    Ok(PyPopulation {
        frame: Arc::new(frame),
    })
}

/// The six role assignments as (index, label, stratifier, auxiliary, unobserved).
#[pyfunction]
fn role_permutations() -> Vec<(usize, String, String, String, String)> {
    design::enumerate_role_permutations()
        .into_iter()
        .map(|r| {
            (
                r.permutation_index(),
                r.label(),
                r.stratifier.column().to_string(),
                r.auxiliary.column().to_string(),
                r.unobserved.column().to_string(),
            )
        })
        .collect()
}

/// Quantile bin rule: returns (cut_points, population_counts).
#[pyfunction]
fn quantile_bins(values: Vec<f64>, k: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let rule = design::quantile_bins(&values, k).map_err(py_err)?;
    Ok((
        rule.cut_points().to_vec(),
        rule.population_counts().to_vec(),
    ))
}

#[pyfunction]
fn proportional_targets(counts: Vec<usize>, n_target: usize) -> PyResult<Vec<usize>> {
    design::proportional_targets(&counts, n_target).map_err(py_err)
}

/// A sampling design bound to its population.
#[pyclass(name = "Design", frozen)]
struct PyDesign {
    frame: Arc<PopulationFrame>,
    design: SamplingDesign,
}

fn outcome_dict<'py>(
    py: Python<'py>,
    frame: &PopulationFrame,
    o: &ReplicationOutcome,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", o.method.to_string())?;
    d.set_item("accepted", o.accepted_ids(frame))?;
    d.set_item("stratum_fill", o.stratum_fill.clone())?;
    d.set_item("bin_fill", o.bin_fill.clone())?;
    d.set_item("counts", to_py(py, &o.counts)?)?;
    d.set_item("achieved_n", o.achieved_size())?;
    let means = PyDict::new(py);
    for v in Variable::ALL {
        means.set_item(v.column(), o.sample_mean(v))?;
    }
    d.set_item("sample_means", means)?;
    Ok(d)
}

#[pymethods]
impl PyDesign {
    #[getter]
    fn permutation(&self) -> usize {
        self.design.roles().permutation_index()
    }

    #[getter]
    fn roles(&self) -> String {
        self.design.roles().label()
    }

    #[getter]
    fn stratum_targets(&self) -> Vec<usize> {
        self.design.stratum_targets().to_vec()
    }

    #[getter]
    fn quota_caps(&self) -> Vec<usize> {
        self.design.quota_caps().to_vec()
    }

    #[getter]
    fn strata_sizes(&self) -> Vec<usize> {
        self.design.strata().population_counts().to_vec()
    }

    #[getter]
    fn is_feasible(&self) -> bool {
        self.design.is_feasible()
    }

    fn stratum_of(&self, school_id: &str) -> PyResult<usize> {
        self.design.stratum_of_id(school_id).map_err(py_err)
    }

    fn bin_of(&self, school_id: &str) -> PyResult<usize> {
        self.design.bin_of_id(school_id).map_err(py_err)
    }

    fn agreement_probability(&self, school_id: &str) -> PyResult<f64> {
        self.design.agreement_probability(school_id).map_err(py_err)
    }

    /// One paired SRS/SRSQ replication; returns {"srs": {...}, "srsq": {...}}.
    #[pyo3(signature = (replication, master_seed = 0))]
    fn run_replication<'py>(
        &self,
        py: Python<'py>,
        replication: u64,
        master_seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pair =
            recruitment::run_replication(&self.frame, &self.design, replication, master_seed);
        let d = PyDict::new(py);
        d.set_item("srs", outcome_dict(py, &self.frame, &pair.srs)?)?;
        d.set_item("srsq", outcome_dict(py, &self.frame, &pair.srsq)?)?;
        Ok(d)
    }
}

/// Build the design for a standardized population under one role assignment
/// (1-based permutation index).
#[pyfunction]
#[pyo3(signature = (population, permutation, n_target = 100, k_strata = 5, k_bins = 5, p_low = 0.5, p_high = 0.25))]
fn build_design(
    population: &PyPopulation,
    permutation: usize,
    n_target: usize,
    k_strata: usize,
    k_bins: usize,
    p_low: f64,
    p_high: f64,
) -> PyResult<PyDesign> {
    let roles = RoleAssignment::from_index(permutation).map_err(py_err)?;
    let params = DesignParams {
        n_target,
        k_strata,
        k_bins,
        p_low,
        p_high,
    };
    let design = design::build_design(&population.frame, roles, params).map_err(py_err)?;
    Ok(PyDesign {
        frame: population.frame.clone(),
        design,
    })
}

/// Run a full experiment from a config dict (same schema as the CLI config).
/// Returns the results as a dict; writes nothing unless `output_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, jobs = None, output_dir = None))]
fn simulate<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    jobs: Option<usize>,
    output_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_py(config)?;
    let results = py
        .detach(|| experiment::run_experiment(&cfg, jobs))
        .map_err(py_err)?;
    if let Some(dir) = output_dir {
        experiment::write_outputs(&results, &dir).map_err(py_err)?;
    }
    to_py(py, &results)
}

// Standardization happens inside the experiment, so hand it raw values.
fn raw_copy(frame: &PopulationFrame) -> PyResult<PopulationFrame> {
    let records = frame
        .records()
        .iter()
        .map(|r| SchoolRecord::new(r.school_id.clone(), r.group_id.clone(), r.raw_values()))
        .collect();
    PopulationFrame::new(frame.name(), records).map_err(py_err)
}

/// Simulate an in-memory population with the default design.
#[pyfunction]
#[pyo3(signature = (population, replications = 1000, master_seed = 0, by_group = false, jobs = None))]
fn simulate_population<'py>(
    py: Python<'py>,
    population: &PyPopulation,
    replications: usize,
    master_seed: u64,
    by_group: bool,
    jobs: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = ExperimentConfig::new(PopulationSource::Csv(PathBuf::new()));
    cfg.replications = replications;
    cfg.master_seed = master_seed;
    cfg.by_group = by_group;
    cfg.population_name = population.frame.name().to_string();
    let raw = raw_copy(&population.frame)?;
    let results = py
        .detach(|| experiment::run_frame(&cfg, &raw, jobs))
        .map_err(py_err)?;
    to_py(py, &results)
}

#[pymodule]
fn srsq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPopulation>()?;
    m.add_class::<PyDesign>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_population, m)?)?;
    m.add_function(wrap_pyfunction!(role_permutations, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_bins, m)?)?;
    m.add_function(wrap_pyfunction!(proportional_targets, m)?)?;
    m.add_function(wrap_pyfunction!(build_design, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_population, m)?)?;
    Ok(())
}
