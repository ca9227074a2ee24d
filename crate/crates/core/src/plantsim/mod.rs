//! Synthetic injection-molding plant: machine settings in, cavity-pressure
//! curves out, plus DOE dataset construction and signal preprocessing.

mod curve;
mod doe;
mod jsonl;

pub use curve::{preprocess, simulate_curve, CurveModel};
pub use doe::{
    axis_settings, build_doe_dataset, build_with_model, corner_settings, curve_seed, DatasetKind,
    DoeDataset, FACTORIAL_LEVELS,
};
pub use jsonl::{read_jsonl, write_jsonl};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per resampled curve.
pub const CURVE_LEN: usize = 500;
/// Length of the resampling window in seconds.
pub const CURVE_SECONDS: f64 = 10.0;
/// Raw pressure units per normalized unit.
pub const PRESSURE_SCALE: f64 = 1000.0;

pub const CORE_PARAMS: [&str; 3] = ["holding_pressure", "injection_speed", "mold_temperature"];
pub const EXTRA_PARAMS: [&str; 3] = ["hot_runner_temperature", "dosing_speed", "holding_time"];
const ALL_PARAMS: [&str; 6] = [
    "holding_pressure",
    "injection_speed",
    "mold_temperature",
    "hot_runner_temperature",
    "dosing_speed",
    "holding_time",
];

/// Number of core machine parameters, which is also the action dimension.
pub const N_CORE: usize = 3;

/// Time of sample `i` on the uniform grid.
pub fn sample_time(i: usize) -> f64 {
    CURVE_SECONDS * i as f64 / (CURVE_LEN - 1) as f64
}

/// Normalized machine settings (3 core parameters, or 6 for the wide DOE).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MachineParams {
    values: Vec<f64>,
}

impl MachineParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != 3 && values.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "machine params need 3 or 6 components, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "machine parameter {v} outside [0, 1]"
            )));
        }
        Ok(Self { values })
    }

    /// Clamps every component into `[0, 1]`.
    pub fn clamped(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("machine parameter".into()));
        }
        Self::new(values.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        &ALL_PARAMS[..self.values.len()]
    }

    pub fn holding_pressure(&self) -> f64 {
        self.values[0]
    }

    pub fn injection_speed(&self) -> f64 {
        self.values[1]
    }

    pub fn mold_temperature(&self) -> f64 {
        self.values[2]
    }

    /// The three core parameters.
    pub fn core(&self) -> [f64; N_CORE] {
        [self.values[0], self.values[1], self.values[2]]
    }
}

impl TryFrom<Vec<f64>> for MachineParams {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MachineParams> for Vec<f64> {
    fn from(p: MachineParams) -> Self {
        p.values
    }
}

/// A resampled, normalized process signal of exactly [`CURVE_LEN`] points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PressureCurve {
    samples: Vec<f64>,
}

impl PressureCurve {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() != CURVE_LEN {
            return Err(Error::Shape(format!(
                "pressure curve needs {CURVE_LEN} samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pressure curve sample".into()));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().copied().fold(f64::MIN, f64::max)
    }

    /// Root-mean-square difference to another curve.
    pub fn rms_diff(&self, other: &PressureCurve) -> f64 {
        let s: f64 = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (s / CURVE_LEN as f64).sqrt()
    }
}

impl TryFrom<Vec<f64>> for PressureCurve {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PressureCurve> for Vec<f64> {
    fn from(c: PressureCurve) -> Self {
        c.samples
    }
}

/// Change of machine settings, observed minus reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVec {
    values: Vec<f64>,
}

impl ActionVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action component".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    /// `observed - reference` over the core parameters.
    pub fn between(reference: &MachineParams, observed: &MachineParams) -> Self {
        let (r, o) = (reference.core(), observed.core());
        Self {
            values: (0..N_CORE).map(|i| o[i] - r[i]).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn neg(&self) -> Self {
        Self {
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}
