//! Python module `fematch`. Matrices cross the boundary as lists of rows; any
//! sequence of float sequences (including a 2-D numpy array) is accepted.

use fematch::freeenergy::{boltzmann_invert, fit_marginals, DensityParams};
use fematch::msm;
use fematch::potential::{self, PriorTerm};
use fematch::sampler::{simulate as run_langevin, LangevinConfig, LearnedPotential};
use fematch::training::{self, LossConfig, TrainingSet};
use fematch::{evaluation, tica, FeatureTrajectory, FileFormat, ReferenceLandscape};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn prior(dim: usize, stiffness: f64) -> PyResult<PriorTerm> {
    if stiffness == 0.0 {
        Ok(PriorTerm::None)
    } else {
        PriorTerm::harmonic(vec![0.0; dim], stiffness).map_err(err)
    }
}

#[pyfunction]
fn kt(temperature: f64) -> f64 {
    fematch::kt(temperature)
}

#[pyclass(name = "FeatureTrajectory", module = "fematch", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(FeatureTrajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (frames, dt, feature_names=None, source_id="python"))]
    fn new(frames: Rows, dt: f64, feature_names: Option<Vec<String>>, source_id: &str) -> PyResult<Self> {
        let m = matrix(&frames)?;
        let t = match feature_names {
            Some(names) => FeatureTrajectory::new(m, dt, names, source_id),
            None => FeatureTrajectory::with_default_names(m, dt, source_id),
        };
        t.map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let format = FileFormat::from_path(path.as_ref());
        FeatureTrajectory::load(path, format).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path, FileFormat::from_path(path.as_ref())).map_err(err)
    }

    fn frames(&self) -> Rows {
        rows(self.0.frames())
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.0.feature_names().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.n_frames()
    }
}

#[pyclass(name = "TicaModel", module = "fematch")]
struct PyTica(tica::TicaModel);

#[pymethods]
impl PyTica {
    /// Fit on one or more trajectories sharing the same features.
    #[staticmethod]
    #[pyo3(signature = (trajectories, lag, n_components=2, ridge=None))]
    fn fit(trajectories: Vec<PyTrajectory>, lag: usize, n_components: usize, ridge: Option<f64>) -> PyResult<Self> {
        let trajs: Vec<FeatureTrajectory> = trajectories.into_iter().map(|t| t.0).collect();
        let cov = tica::estimate_covariances(&trajs, lag).map_err(err)?;
        let ridge = ridge.unwrap_or_else(|| cov.default_ridge());
        tica::fit_tica(&cov, n_components, ridge).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        tica::TicaModel::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.0.eigenvalues.iter().copied().collect()
    }

    /// Columns are the components, slowest first.
    #[getter]
    fn eigenvectors(&self) -> Rows {
        rows(&self.0.eigenvectors)
    }

    #[getter]
    fn explained_variance_ratio(&self) -> Vec<f64> {
        self.0.explained_variance_ratio.iter().copied().collect()
    }

    #[pyo3(signature = (frames, k=2))]
    fn project(&self, frames: Rows, k: usize) -> PyResult<Rows> {
        self.0.project_frames(&matrix(&frames)?, k).map(|y| rows(&y)).map_err(err)
    }
}

/// Per-frame `G(y)` and its per-component parts from histogram marginals.
#[pyfunction]
#[pyo3(signature = (y, temperature=300.0, bins=100, floor_epsilon=1e-12))]
fn free_energy_targets(y: Rows, temperature: f64, bins: usize, floor_epsilon: f64) -> PyResult<(Vec<f64>, Rows)> {
    let y = matrix(&y)?;
    let params = DensityParams::Histogram { n_bins: bins, range: None };
    let density = fit_marginals(&y, &params, floor_epsilon).map_err(err)?;
    let t = boltzmann_invert(&density, &y, temperature).map_err(err)?;
    Ok((t.g_total.iter().copied().collect(), rows(&t.g_per_component)))
}

#[pyclass(name = "ReferenceLandscape", module = "fematch", from_py_object)]
#[derive(Clone)]
struct PyLandscape(ReferenceLandscape);

#[pymethods]
impl PyLandscape {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        ReferenceLandscape::from_name(name).map(Self).map_err(err)
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn energy_force(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.0.energy_force(&x).map_err(err)
    }

    fn minima(&self) -> Rows {
        self.0.minima()
    }
}

#[pyclass(name = "PotentialModel", module = "fematch", from_py_object)]
#[derive(Clone)]
struct PyPotential {
    model: potential::PotentialModel,
    prior: PriorTerm,
}

#[pymethods]
impl PyPotential {
    #[new]
    #[pyo3(signature = (configs, n_basis=32, n_hidden=32, seed=0, prior_stiffness=0.5))]
    fn new(configs: Rows, n_basis: usize, n_hidden: usize, seed: u64, prior_stiffness: f64) -> PyResult<Self> {
        let configs = matrix(&configs)?;
        let model = potential::PotentialModel::init(&configs, n_basis, n_hidden, seed).map_err(err)?;
        let prior = prior(configs.ncols(), prior_stiffness)?;
        Ok(Self { model, prior })
    }

    #[staticmethod]
    #[pyo3(signature = (text, prior_stiffness=0.5))]
    fn from_json(text: &str, prior_stiffness: f64) -> PyResult<Self> {
        let model = potential::PotentialModel::from_json(text).map_err(err)?;
        let prior = prior(model.input_dim, prior_stiffness)?;
        Ok(Self { model, prior })
    }

    fn to_json(&self) -> PyResult<String> {
        self.model.to_json().map_err(err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Network plus prior.
    fn energy(&self, x: Vec<f64>) -> PyResult<f64> {
        potential::energy(&self.model, &self.prior, &x).map_err(err)
    }

    fn force(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        potential::force(&self.model, &self.prior, &x)
            .map(|f| f.iter().copied().collect())
            .map_err(err)
    }

    /// Adam on `λ_force·L_force + λ_energy·L_energy`; returns the per-epoch losses.
    #[pyo3(signature = (configs, forces, g_targets, lambda_energy=0.0, batch_size=256, max_epochs=500, learning_rate=1e-3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        configs: Rows,
        forces: Rows,
        g_targets: Vec<f64>,
        lambda_energy: f64,
        batch_size: usize,
        max_epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let data = TrainingSet::new(matrix(&configs)?, matrix(&forces)?, DVector::from_vec(g_targets)).map_err(err)?;
        let cfg = LossConfig {
            batch_size,
            max_epochs,
            learning_rate,
            seed,
            ..LossConfig::with_lambda_energy(lambda_energy)
        };
        let (model, report) = py
            .detach(|| training::train(self.model.clone(), &self.prior, &data, &cfg))
            .map_err(err)?;
        self.model = model;
        report
            .epochs
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("epoch", e.epoch)?;
                d.set_item("total", e.total)?;
                d.set_item("force", e.force)?;
                d.set_item("energy", e.energy)?;
                d.set_item("offset", e.offset)?;
                Ok(d)
            })
            .collect()
    }
}

/// Overdamped Langevin chains on a reference landscape or a trained potential.
/// Returns `(trajectories, forces)` with one entry per chain.
#[pyfunction]
#[pyo3(signature = (field, starts, n_steps, dt=1e-3, gamma=1.0, temperature=300.0, stride=100, seed=0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    field: &Bound<'_, PyAny>,
    starts: Rows,
    n_steps: u64,
    dt: f64,
    gamma: f64,
    temperature: f64,
    stride: u64,
    seed: u64,
) -> PyResult<(Vec<PyTrajectory>, Vec<Rows>)> {
    let cfg = LangevinConfig {
        dt,
        gamma,
        temperature,
        n_steps,
        stride,
        seed,
        initial_positions: starts,
    };
    let out = if let Ok(l) = field.extract::<PyLandscape>() {
        py.detach(|| run_langevin(&l.0, &cfg))
    } else if let Ok(p) = field.extract::<PyPotential>() {
        let learned = LearnedPotential {
            model: p.model,
            prior: p.prior,
        };
        py.detach(|| run_langevin(&learned, &cfg))
    } else {
        return Err(err("field must be a ReferenceLandscape or a PotentialModel"));
    }
    .map_err(err)?;
    let trajs = out.chains.iter().map(|c| PyTrajectory(c.trajectory.clone())).collect();
    let forces = out.chains.iter().map(|c| rows(c.forces.forces())).collect();
    Ok((trajs, forces))
}

/// KL(truth ‖ model) on a shared 2-D grid; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (truth, model, bins=50, epsilon=0.5))]
fn kl_divergence<'py>(py: Python<'py>, truth: Rows, model: Rows, bins: usize, epsilon: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluation::kl_divergence_2d(&matrix(&truth)?, &matrix(&model)?, bins, bins, epsilon).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("kl_nats", r.kl_nats)?;
    d.set_item("marginal_kl", r.marginal_kl.to_vec())?;
    d.set_item("bounds", r.bounds.to_vec())?;
    d.set_item("n_truth", r.n_truth)?;
    d.set_item("n_model", r.n_model)?;
    Ok(d)
}

#[pyclass(name = "MsmModel", module = "fematch")]
struct PyMsm {
    model: msm::MsmModel,
    assignments: Vec<Vec<usize>>,
}

#[pymethods]
impl PyMsm {
    /// k-means states on projected trajectories, then a reversible transition matrix.
    #[staticmethod]
    #[pyo3(signature = (trajectories, n_states=50, lag=10, temperature=300.0, seed=0))]
    fn build(
        py: Python<'_>,
        trajectories: Vec<Rows>,
        n_states: usize,
        lag: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mats = trajectories.iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
        let (model, assignments) = py
            .detach(|| msm::build_msm(&mats, n_states, lag, temperature, seed))
            .map_err(err)?;
        Ok(Self { model, assignments })
    }

    #[getter]
    fn transition(&self) -> Rows {
        rows(&self.model.transition)
    }

    #[getter]
    fn stationary(&self) -> Vec<f64> {
        self.model.stationary.iter().copied().collect()
    }

    #[getter]
    fn free_energy(&self) -> Vec<f64> {
        self.model.free_energy.iter().copied().collect()
    }

    #[getter]
    fn active_states(&self) -> Vec<usize> {
        self.model.active_states.clone()
    }

    #[getter]
    fn assignments(&self) -> Vec<Vec<usize>> {
        self.assignments.clone()
    }

    fn implied_timescales(&self) -> Vec<f64> {
        self.model.implied_timescales()
    }

    fn to_json(&self) -> PyResult<String> {
        self.model.to_json().map_err(err)
    }
}

#[pymodule(name = "fematch")]
fn fematch_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyTica>()?;
    m.add_class::<PyLandscape>()?;
    m.add_class::<PyPotential>()?;
    m.add_class::<PyMsm>()?;
    m.add_function(wrap_pyfunction!(kt, m)?)?;
    m.add_function(wrap_pyfunction!(free_energy_targets, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add("LAMBDA_SWEEP", training::LAMBDA_SWEEP.to_vec())?;
    Ok(())
}
