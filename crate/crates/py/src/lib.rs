//! Python module `actwm`: datasets, models, training and metrics.

use std::collections::BTreeMap;

use actwm_core::evalkit::{self, MetricReport};
use actwm_core::expharness::{evaluate_for_config, train_for_config, ExperimentConfig, ExperimentId};
use actwm_core::plantsim::{self, ActionVec, DatasetKind, DoeDataset, MachineParams, PressureCurve};
use actwm_core::worldmodel::{self as wm, LatentVec, LATENT_DIM};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: actwm_core::Error) -> PyErr {
    match e {
        actwm_core::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn curve(values: Vec<f64>) -> PyResult<PressureCurve> {
    PressureCurve::new(values).map_err(err)
}

fn latent(values: Vec<f64>) -> PyResult<LatentVec> {
    let arr: [f64; LATENT_DIM] = values
        .try_into()
        .map_err(|v: Vec<f64>| PyValueError::new_err(format!("latent needs {LATENT_DIM} values, got {}", v.len())))?;
    Ok(LatentVec(arr))
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn report_dict(r: &MetricReport) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("theta_2d", r.theta_2d),
        ("d_2d", r.d_2d),
        ("q_2d", r.q_2d),
        ("theta_3d", r.theta_3d),
        ("d_3d", r.d_3d),
        ("q_3d", r.q_3d),
        ("n_evaluated", r.n_evaluated as f64),
        ("n_excluded", r.n_excluded as f64),
    ])
}

/// Simulated design-of-experiments dataset.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(DoeDataset);

#[pymethods]
impl PyDataset {
    /// Simulates dataset `kind` ("d1", "d2" or "d3").
    #[staticmethod]
    #[pyo3(signature = (kind, seed = 0))]
    fn generate(py: Python<'_>, kind: &str, seed: u64) -> PyResult<Self> {
        let kind: DatasetKind = parse(kind)?;
        Ok(Self(py.detach(|| plantsim::build_doe_dataset(kind, seed))))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        plantsim::read_jsonl(std::io::BufReader::new(f)).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        plantsim::write_jsonl(&self.0, std::io::BufWriter::new(f)).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn cycles_per_setting(&self) -> usize {
        self.0.cycles_per_setting
    }

    #[getter]
    fn param_names(&self) -> Vec<&'static str> {
        self.0.param_names().to_vec()
    }

    fn settings(&self) -> Vec<Vec<f64>> {
        self.0.settings.iter().map(|p| p.values().to_vec()).collect()
    }

    fn curve(&self, setting: usize, cycle: usize) -> PyResult<Vec<f64>> {
        if setting >= self.0.settings.len() || cycle >= self.0.cycles_per_setting {
            return Err(PyValueError::new_err(format!("no curve ({setting}, {cycle})")));
        }
        Ok(self.0.curve(setting, cycle).samples().to_vec())
    }

    fn __len__(&self) -> usize {
        self.0.n_curves()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(kind={}, seed={}, curves={})", self.0.kind, self.0.seed, self.0.n_curves())
    }
}

/// Encoder plus latent and action predictors.
#[pyclass(name = "WorldModel", frozen)]
struct PyWorldModel(wm::WorldModel);

#[pymethods]
impl PyWorldModel {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Self {
        Self(wm::WorldModel::new(seed))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        wm::WorldModel::load(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    /// Latent vector of a 500-sample pressure curve.
    fn encode(&self, curve_values: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.0.encode(&curve(curve_values)?).values().to_vec())
    }

    fn predict_action(&self, z_x: Vec<f64>, z_y: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.0.predict_action(&latent(z_x)?, &latent(z_y)?).values().to_vec())
    }

    fn predict_latent(&self, z_x: Vec<f64>, action: Vec<f64>) -> PyResult<Vec<f64>> {
        let a = ActionVec::new(action).map_err(err)?;
        Ok(self.0.predict_latent(&latent(z_x)?, &a).map_err(err)?.values().to_vec())
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.0.n_scalars()
    }
}

/// Trains a model for experiment `plan` on `data`. Returns the model and the
/// per-epoch losses as `(epoch, total, latent_term, action_term)` tuples.
#[pyfunction]
#[pyo3(signature = (data, plan, seed = 0, epochs = None))]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    plan: &str,
    seed: u64,
    epochs: Option<usize>,
) -> PyResult<(PyWorldModel, Vec<(usize, f64, f64, f64)>)> {
    let id: ExperimentId = parse(plan)?;
    let mut cfg = ExperimentConfig::for_id(id, data.0.kind);
    cfg.data_seed = data.0.seed;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        if let Some(src) = cfg.pretrain.as_mut() {
            src.finetune.finetune_epochs = e;
        }
    }
    let (model, history) = py
        .detach(|| train_for_config(&cfg, &data.0, seed, &mut |_, _| {}))
        .map_err(err)?;
    let losses = history.train.iter().map(|e| (e.epoch, e.total, e.latent, e.action)).collect();
    Ok((PyWorldModel(model), losses))
}

/// Metrics of `model` on the test split of `plan`.
#[pyfunction]
fn evaluate(py: Python<'_>, model: &PyWorldModel, data: &PyDataset, plan: &str) -> PyResult<BTreeMap<&'static str, f64>> {
    let id: ExperimentId = parse(plan)?;
    let cfg = ExperimentConfig::for_id(id, data.0.kind);
    let report = py.detach(|| evaluate_for_config(&cfg, &data.0, &model.0)).map_err(err)?;
    Ok(report_dict(&report.summary))
}

/// Noise-free (or seeded noisy) pressure curve for core settings in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (params, noise_seed = None))]
fn simulate_curve(params: Vec<f64>, noise_seed: Option<u64>) -> PyResult<Vec<f64>> {
    let p = MachineParams::new(params).map_err(err)?;
    Ok(plantsim::simulate_curve(&p, noise_seed, false).samples().to_vec())
}

/// Angle in degrees between two actions; `None` if either is zero.
#[pyfunction]
fn angle(truth: Vec<f64>, pred: Vec<f64>) -> PyResult<Option<f64>> {
    let (t, p) = (ActionVec::new(truth).map_err(err)?, ActionVec::new(pred).map_err(err)?);
    evalkit::angle(&t, &p).map_err(err)
}

#[pyfunction]
fn overall_q(theta_degrees: f64, d: f64) -> PyResult<f64> {
    evalkit::overall_q(theta_degrees, d).map_err(err)
}

#[pymodule]
fn actwm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyWorldModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_curve, m)?)?;
    m.add_function(wrap_pyfunction!(angle, m)?)?;
    m.add_function(wrap_pyfunction!(overall_q, m)?)?;
    m.add("LATENT_DIM", LATENT_DIM)?;
    Ok(())
}
