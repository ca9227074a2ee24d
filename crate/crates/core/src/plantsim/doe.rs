use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CurveModel, MachineParams, PressureCurve};
use crate::error::{Error, Result};

/// Which DOE to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// 3³ full factorial, 10 cycles, first product.
    D1,
    /// Same grid as `D1` with the second product's curve constants.
    D2,
    /// 23 stable settings over six parameters, 20 cycles.
    D3,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::D1 => "d1",
            Self::D2 => "d2",
            Self::D3 => "d3",
        }
    }

    pub fn curve_model(self) -> CurveModel {
        match self {
            Self::D1 | Self::D3 => CurveModel::default(),
            Self::D2 => CurveModel::second_product(),
        }
    }

    pub fn cycles_per_setting(self) -> usize {
        match self {
            Self::D1 | Self::D2 => 10,
            Self::D3 => 20,
        }
    }

    pub fn is_factorial(self) -> bool {
        matches!(self, Self::D1 | Self::D2)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(Self::D1),
            "d2" => Ok(Self::D2),
            "d3" => Ok(Self::D3),
            other => Err(Error::InvalidArgument(format!("unknown dataset kind {other:?}"))),
        }
    }
}

pub const FACTORIAL_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];
const WIDE_SETTINGS: usize = 23;

/// Settings × cycles grid of simulated curves.
#[derive(Clone, Debug, PartialEq)]
pub struct DoeDataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub model: CurveModel,
    pub settings: Vec<MachineParams>,
    pub cycles_per_setting: usize,
    /// `curves[setting][cycle]`
    pub curves: Vec<Vec<PressureCurve>>,
}

impl DoeDataset {
    pub fn curve(&self, setting: usize, cycle: usize) -> &PressureCurve {
        &self.curves[setting][cycle]
    }

    pub fn n_curves(&self) -> usize {
        self.curves.iter().map(Vec::len).sum()
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        self.settings
            .first()
            .map(MachineParams::param_names)
            .unwrap_or(&[])
    }

    /// Index of the setting with exactly these core levels.
    pub fn find_setting(&self, core: [f64; 3]) -> Option<usize> {
        self.settings.iter().position(|s| s.core() == core)
    }
}

/// Counter-based per-curve seed, independent of generation order.
pub fn curve_seed(dataset_seed: u64, setting: usize, cycle: usize) -> u64 {
    let mut h = splitmix64(dataset_seed ^ 0x5851_f42d_4c95_7f2d);
    h = splitmix64(h ^ setting as u64);
    splitmix64(h ^ ((cycle as u64) << 32 | 0x9e37))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn factorial_settings() -> Vec<MachineParams> {
    let mut out = Vec::with_capacity(27);
    for hp in FACTORIAL_LEVELS {
        for is in FACTORIAL_LEVELS {
            for mt in FACTORIAL_LEVELS {
                out.push(MachineParams::new(vec![hp, is, mt]).expect("grid levels in range"));
            }
        }
    }
    out
}

/// Non-systematic six-parameter settings, rounded to two decimals.
fn wide_settings(seed: u64) -> Vec<MachineParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xd3d3));
    (0..WIDE_SETTINGS)
        .map(|_| {
            let v = (0..6)
                .map(|_| (rng.random_range(0.0..=1.0f64) * 100.0).round() / 100.0)
                .collect();
            MachineParams::new(v).expect("sampled in range")
        })
        .collect()
}

pub fn build_doe_dataset(kind: DatasetKind, seed: u64) -> DoeDataset {
    build_with_model(kind, seed, kind.curve_model())
}

/// Builds a dataset with an explicit curve model (e.g. shifted constants).
pub fn build_with_model(kind: DatasetKind, seed: u64, model: CurveModel) -> DoeDataset {
    let settings = if kind.is_factorial() {
        factorial_settings()
    } else {
        wide_settings(seed)
    };
    let cycles = kind.cycles_per_setting();
    let curves = settings
        .iter()
        .enumerate()
        .map(|(s, p)| {
            (0..cycles)
                .map(|c| model.simulate(p, Some(curve_seed(seed, s, c)), false))
                .collect()
        })
        .collect();
    DoeDataset {
        kind,
        seed,
        model,
        settings,
        cycles_per_setting: cycles,
        curves,
    }
}

fn require_factorial(ds: &DoeDataset) -> Result<()> {
    if !ds.kind.is_factorial() {
        return Err(Error::Dataset(format!(
            "{} is not a factorial dataset",
            ds.kind
        )));
    }
    Ok(())
}

/// The 8 settings with every core level in `{0, 1}`.
pub fn corner_settings(ds: &DoeDataset) -> Result<Vec<usize>> {
    require_factorial(ds)?;
    Ok(ds
        .settings
        .iter()
        .enumerate()
        .filter(|(_, s)| s.core().iter().all(|&v| v == 0.0 || v == 1.0))
        .map(|(i, _)| i)
        .collect())
}

/// The origin followed by the three unit-axis corners.
pub fn axis_settings(ds: &DoeDataset) -> Result<Vec<usize>> {
    require_factorial(ds)?;
    [
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
    .into_iter()
    .map(|core| {
        ds.find_setting(core)
            .ok_or_else(|| Error::Dataset(format!("setting {core:?} missing")))
    })
    .collect()
}
