//! One simulated production line driven by an operator and watched by a
//! trained model.

use std::sync::Arc;

use actwm_core::evalkit::Pca;
use actwm_core::plantsim::{curve_seed, CurveModel, MachineParams, PressureCurve, FACTORIAL_LEVELS, N_CORE};
use actwm_core::worldmodel::{LatentVec, WorldModel};
use actwm_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where every session starts: the centre of the settings cube.
pub const NOMINAL_START: [f64; N_CORE] = [0.5; N_CORE];

/// Operator-visible part of the plant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicState {
    pub nominal_params: [f64; N_CORE],
    pub reference_curve: Vec<f64>,
    pub cycle_counter: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleResult {
    pub cycle_id: u64,
    pub observed_curve: Vec<f64>,
    /// Negated predicted action: the change that would undo the deviation.
    pub suggested_action: [f64; N_CORE],
    pub latent_point_2d: [f64; 2],
    /// Latent distance between the observed and the reference cycle.
    pub deviation_score: f64,
}

pub struct ControlSession {
    model: Arc<WorldModel>,
    plant: CurveModel,
    seed: u64,
    nominal: [f64; N_CORE],
    disturbance: [f64; N_CORE],
    counter: u64,
    reference: PressureCurve,
    z_ref: LatentVec,
    pca: Pca,
}

fn three(v: &[f64], what: &str) -> Result<[f64; N_CORE]> {
    let arr: [f64; N_CORE] = v.try_into().map_err(|_| {
        Error::Shape(format!("{what} needs {N_CORE} components, got {}", v.len()))
    })?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(arr)
}

fn clamp01(v: [f64; N_CORE]) -> [f64; N_CORE] {
    v.map(|x| x.clamp(0.0, 1.0))
}

impl ControlSession {
    /// Reference is the noise-free cycle at the start point; the 2D view is
    /// fitted on the noise-free cycles of the 3×3×3 grid.
    pub fn new(model: Arc<WorldModel>, plant: CurveModel, seed: u64) -> Result<Self> {
        let clean = plant.clone().without_noise();
        let reference = clean.simulate(&MachineParams::new(NOMINAL_START.to_vec())?, None, false);
        let mut probes = Vec::with_capacity(27);
        for hp in FACTORIAL_LEVELS {
            for is in FACTORIAL_LEVELS {
                for mt in FACTORIAL_LEVELS {
                    probes.push(clean.simulate(&MachineParams::new(vec![hp, is, mt])?, None, false));
                }
            }
        }
        let refs: Vec<&PressureCurve> = probes.iter().collect();
        let pca = Pca::fit(&model.encode_many(&refs), 2)?;
        let z_ref = model.encode(&reference);
        Ok(Self {
            model,
            plant,
            seed,
            nominal: NOMINAL_START,
            disturbance: [0.0; N_CORE],
            counter: 0,
            reference,
            z_ref,
            pca,
        })
    }

    pub fn state(&self) -> PublicState {
        PublicState {
            nominal_params: self.nominal,
            reference_curve: self.reference.samples().to_vec(),
            cycle_counter: self.counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nominal(&self) -> [f64; N_CORE] {
        self.nominal
    }

    pub fn disturbance(&self) -> [f64; N_CORE] {
        self.disturbance
    }

    /// `clamp(nominal + disturbance, [0, 1])`.
    pub fn effective(&self) -> [f64; N_CORE] {
        clamp01(std::array::from_fn(|i| self.nominal[i] + self.disturbance[i]))
    }

    pub fn reference(&self) -> &PressureCurve {
        &self.reference
    }

    /// Runs one cycle at the effective settings.
    pub fn step(&mut self) -> CycleResult {
        self.counter += 1;
        let params = MachineParams::new(self.effective().to_vec()).expect("clamped into range");
        let noise = curve_seed(self.seed, 0, self.counter as usize);
        let observed = self.plant.simulate(&params, Some(noise), false);
        let z_y = self.model.encode(&observed);
        let a_hat = self.model.predict_action(&self.z_ref, &z_y);
        let p = self.pca.project(&z_y);
        CycleResult {
            cycle_id: self.counter,
            observed_curve: observed.samples().to_vec(),
            suggested_action: std::array::from_fn(|i| -a_hat.values()[i]),
            latent_point_2d: [p[0], p[1]],
            deviation_score: z_y.distance(&self.z_ref),
        }
    }

    /// `nominal += delta`, clamped to `[0, 1]`.
    pub fn adjust(&mut self, delta: &[f64]) -> Result<[f64; N_CORE]> {
        let d = three(delta, "adjustment")?;
        self.nominal = clamp01(std::array::from_fn(|i| self.nominal[i] + d[i]));
        Ok(self.nominal)
    }

    /// Replaces the hidden offset.
    pub fn disturb(&mut self, offset: &[f64]) -> Result<()> {
        self.disturbance = three(offset, "disturbance")?;
        Ok(())
    }

    /// Back to the state right after creation: start settings, no offset,
    /// counter at zero.
    pub fn reset(&mut self) {
        self.nominal = NOMINAL_START;
        self.disturbance = [0.0; N_CORE];
        self.counter = 0;
    }
}
