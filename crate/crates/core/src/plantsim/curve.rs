use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sample_time, MachineParams, PressureCurve, CURVE_LEN, CURVE_SECONDS, PRESSURE_SCALE};
use crate::error::{Error, Result};

/// Piecewise rise/hold/decay curve family.
///
/// * rise: smoothstep from 0 to the peak over `rise_base - rise_gain * u_is` seconds
/// * hold: plateau at `peak_base + peak_gain * u_hp + coupling * u_is` for `hold` seconds
/// * decay: exponential with time constant `tau_base + tau_gain * u_mt`
///
/// With six parameters, hot-runner temperature, dosing speed and holding time
/// shift the decay constant, rise time and peak by at most `extra_fraction`
/// of the respective ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveModel {
    pub rise_base: f64,
    pub rise_gain: f64,
    pub peak_base: f64,
    pub peak_gain: f64,
    pub hold: f64,
    pub tau_base: f64,
    pub tau_gain: f64,
    /// Injection-speed contribution to the peak, in `[0, 0.2]`.
    pub coupling: f64,
    /// Std of the per-cycle multiplicative amplitude factor.
    pub amplitude_noise: f64,
    /// Std of the i.i.d. additive per-sample noise.
    pub sample_noise: f64,
    pub extra_fraction: f64,
}

impl Default for CurveModel {
    fn default() -> Self {
        Self {
            rise_base: 1.5,
            rise_gain: 0.8,
            peak_base: 0.5,
            peak_gain: 0.4,
            hold: 2.0,
            tau_base: 1.5,
            tau_gain: 1.5,
            coupling: 0.0,
            amplitude_noise: 0.01,
            sample_noise: 0.005,
            extra_fraction: 0.05,
        }
    }
}

impl CurveModel {
    /// Constants for the second product: faster fill, longer hold, quicker cooling.
    pub fn second_product() -> Self {
        Self {
            rise_base: 1.2,
            rise_gain: 0.6,
            peak_base: 0.55,
            peak_gain: 0.35,
            hold: 2.5,
            tau_base: 1.0,
            tau_gain: 1.2,
            ..Self::default()
        }
    }

    pub fn with_coupling(mut self, coupling: f64) -> Result<Self> {
        if !(0.0..=0.2).contains(&coupling) {
            return Err(Error::InvalidArgument(format!(
                "coupling {coupling} outside [0, 0.2]"
            )));
        }
        self.coupling = coupling;
        Ok(self)
    }

    pub fn without_noise(mut self) -> Self {
        self.amplitude_noise = 0.0;
        self.sample_noise = 0.0;
        self
    }

    /// `(rise time, peak, decay constant)` for a setting.
    pub fn phases(&self, p: &MachineParams) -> (f64, f64, f64) {
        let [hp, is, mt] = p.core();
        let mut rise = self.rise_base - self.rise_gain * is;
        let mut peak = self.peak_base + self.peak_gain * hp + self.coupling * is;
        let mut tau = self.tau_base + self.tau_gain * mt;
        if p.len() == 6 {
            let v = p.values();
            let f = self.extra_fraction;
            tau += f * self.tau_gain * (2.0 * v[3] - 1.0);
            rise += f * self.rise_gain * (2.0 * v[4] - 1.0);
            peak += f * self.peak_gain * (2.0 * v[5] - 1.0);
        }
        (rise, peak, tau)
    }

    /// Noise-free pressure at time `t` (normalized units).
    pub fn shape_at(&self, p: &MachineParams, t: f64) -> f64 {
        let (rise, peak, tau) = self.phases(p);
        if t <= 0.0 {
            0.0
        } else if t < rise {
            let s = t / rise;
            peak * s * s * (3.0 - 2.0 * s)
        } else if t <= rise + self.hold {
            peak
        } else {
            peak * (-(t - rise - self.hold) / tau).exp()
        }
    }

    /// One production cycle. `noise_seed = None` gives the noise-free curve.
    pub fn simulate(&self, p: &MachineParams, noise_seed: Option<u64>, raw: bool) -> PressureCurve {
        let mut samples: Vec<f64> = (0..CURVE_LEN).map(|i| self.shape_at(p, sample_time(i))).collect();
        if let Some(seed) = noise_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amp = if self.amplitude_noise > 0.0 {
                Normal::new(0.0, self.amplitude_noise)
                    .expect("finite std")
                    .sample(&mut rng)
            } else {
                0.0
            };
            let additive = (self.sample_noise > 0.0)
                .then(|| Normal::new(0.0, self.sample_noise).expect("finite std"));
            for s in samples.iter_mut() {
                *s *= 1.0 + amp;
                if let Some(d) = &additive {
                    *s += d.sample(&mut rng);
                }
            }
        }
        if raw {
            for s in samples.iter_mut() {
                *s *= PRESSURE_SCALE;
            }
        }
        PressureCurve::new(samples).expect("simulated curves are finite and full length")
    }
}

/// Simulates one cycle with the default curve model.
pub fn simulate_curve(p: &MachineParams, noise_seed: Option<u64>, raw: bool) -> PressureCurve {
    CurveModel::default().simulate(p, noise_seed, raw)
}

/// Resamples an irregularly sampled raw recording onto the uniform grid over
/// `[0, 10]` s by linear interpolation (clamped outside the recorded span) and
/// divides by the pressure scale.
pub fn preprocess(raw_times: &[f64], raw_values: &[f64]) -> Result<PressureCurve> {
    if raw_times.len() != raw_values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} timestamps but {} values",
            raw_times.len(),
            raw_values.len()
        )));
    }
    if raw_times.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    if raw_times.iter().chain(raw_values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw recording".into()));
    }
    if raw_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("timestamps must be strictly increasing".into()));
    }
    let (first, last) = (raw_times[0], raw_times[raw_times.len() - 1]);
    if last < 0.0 || first > CURVE_SECONDS {
        return Err(Error::InvalidArgument(format!(
            "recording span [{first}, {last}] does not overlap [0, {CURVE_SECONDS}]"
        )));
    }

    let mut out = Vec::with_capacity(CURVE_LEN);
    let mut seg = 0;
    for i in 0..CURVE_LEN {
        let t = sample_time(i);
        let v = if t <= first {
            raw_values[0]
        } else if t >= last {
            raw_values[raw_values.len() - 1]
        } else {
            while raw_times[seg + 1] < t {
                seg += 1;
            }
            let (t0, t1) = (raw_times[seg], raw_times[seg + 1]);
            let (v0, v1) = (raw_values[seg], raw_values[seg + 1]);
            if t == t1 {
                v1
            } else {
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        };
        out.push(v / PRESSURE_SCALE);
    }
    PressureCurve::new(out)
}
