//! Shared-weight convolutional encoder, action-conditioned latent predictor
//! and latent-difference action predictor, with the combined training loss.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::plantsim::{ActionVec, PressureCurve, CURVE_LEN, N_CORE};

pub const LATENT_DIM: usize = 10;
pub const ACTION_DIM: usize = N_CORE;

/// Convolutional stack of the encoder: six stride-2 stages, then one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub channels: [usize; 6],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub const ENCODER: EncoderSpec = EncoderSpec {
    channels: [8, 16, 32, 32, 64, 64],
    kernel: 5,
    stride: 2,
    padding: 2,
};

impl EncoderSpec {
    /// Spatial length after every conv stage.
    pub fn lengths(&self) -> [usize; 6] {
        let mut out = [0; 6];
        let mut len = CURVE_LEN;
        for o in out.iter_mut() {
            len = (len + 2 * self.padding - self.kernel) / self.stride + 1;
            *o = len;
        }
        out
    }

    pub fn flat_features(&self) -> usize {
        self.channels[5] * self.lengths()[5]
    }
}

/// Index of each parameter tensor inside [`WorldModel`].
pub mod param {
    pub const fn conv_w(stage: usize) -> usize {
        2 * stage
    }
    pub const fn conv_b(stage: usize) -> usize {
        2 * stage + 1
    }
    pub const ENC_FC_W: usize = 12;
    pub const ENC_FC_B: usize = 13;
    pub const PZ_W: usize = 14;
    pub const PZ_B: usize = 15;
    pub const PA_W: usize = 16;
    pub const COUNT: usize = 17;

    pub fn is_conv(id: usize) -> bool {
        id < ENC_FC_W
    }

    pub fn is_latent_predictor(id: usize) -> bool {
        id == PZ_W || id == PZ_B
    }
}

pub fn param_names() -> Vec<String> {
    let mut names = Vec::with_capacity(param::COUNT);
    for i in 0..6 {
        names.push(format!("enc.conv{i}.w"));
        names.push(format!("enc.conv{i}.b"));
    }
    names.extend(["enc.fc.w", "enc.fc.b", "pz.w", "pz.b", "pa.w"].map(String::from));
    names
}

fn param_shapes() -> Vec<Vec<usize>> {
    let e = ENCODER;
    let mut shapes = Vec::with_capacity(param::COUNT);
    let mut c_in = 1;
    for &c in &e.channels {
        shapes.push(vec![c, c_in, e.kernel]);
        shapes.push(vec![c]);
        c_in = c;
    }
    shapes.push(vec![LATENT_DIM, e.flat_features()]);
    shapes.push(vec![LATENT_DIM]);
    shapes.push(vec![LATENT_DIM, LATENT_DIM + ACTION_DIM]);
    shapes.push(vec![LATENT_DIM]);
    shapes.push(vec![ACTION_DIM, LATENT_DIM]);
    shapes
}

/// A point in the 10-dimensional latent space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVec(pub [f64; LATENT_DIM]);

impl LatentVec {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sub(&self, other: &LatentVec) -> LatentVec {
        LatentVec(std::array::from_fn(|i| self.0[i] - other.0[i]))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &LatentVec) -> f64 {
        self.sub(other).norm()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    /// Latent predictor removed: the model is a direct action regressor.
    NoLatentPredictor,
}

/// Loss coefficients for latent consistency and action prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Reference curve, observed curve and the action that leads from one to the other.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair<'a> {
    pub x: &'a PressureCurve,
    pub y: &'a PressureCurve,
    pub a: ActionVec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub latent: f64,
    pub action: f64,
}

/// Deduplicated view of a batch: each distinct curve is encoded once.
pub(crate) struct PackedBatch<'a> {
    pub curves: Vec<&'a PressureCurve>,
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub actions: Vec<f64>,
}

impl<'a> PackedBatch<'a> {
    pub fn new(pairs: &[&TrainPair<'a>]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut slots: HashMap<*const PressureCurve, usize> = HashMap::new();
        let mut curves = Vec::new();
        let mut slot = |c: &'a PressureCurve| {
            *slots.entry(c as *const _).or_insert_with(|| {
                curves.push(c);
                curves.len() - 1
            })
        };
        let mut x = Vec::with_capacity(pairs.len());
        let mut y = Vec::with_capacity(pairs.len());
        let mut actions = Vec::with_capacity(pairs.len() * ACTION_DIM);
        for p in pairs {
            if p.a.len() != ACTION_DIM {
                return Err(Error::Shape(format!(
                    "action must have {ACTION_DIM} components, got {}",
                    p.a.len()
                )));
            }
            x.push(slot(p.x));
            y.push(slot(p.y));
            actions.extend_from_slice(p.a.values());
        }
        Ok(Self {
            curves,
            x,
            y,
            actions,
        })
    }
}

pub(crate) fn curves_tensor(curves: &[&PressureCurve]) -> Tensor {
    let mut data = Vec::with_capacity(curves.len() * CURVE_LEN);
    for c in curves {
        data.extend_from_slice(c.samples());
    }
    Tensor::new(vec![curves.len(), 1, CURVE_LEN], data).expect("curves are finite")
}

/// What feeds the encoder on a tape.
pub(crate) enum EncoderInput {
    /// `[U, 1, 500]` raw curves.
    Curves(Tensor),
    /// `[U, 512]` precomputed conv features (conv stack frozen).
    Features(Tensor),
}

/// Vars of the three loss terms recorded on a tape.
pub(crate) struct LossVars {
    pub total: Var,
    pub latent: Option<Var>,
    pub action: Var,
}

/// The world model's parameters and variant.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    params: Vec<Tensor>,
    variant: ModelVariant,
}

impl WorldModel {
    /// Seeded Kaiming-uniform (fan-in) weights with zero biases. Layers
    /// followed by a ReLU use gain √2, the linear heads gain 1.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_shapes()
            .into_iter()
            .enumerate()
            .map(|(id, shape)| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let gain: f64 = if param::is_conv(id) { 2.0 } else { 1.0 };
                let bound = (3.0 * gain / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("finite init")
            })
            .collect();
        Self {
            params,
            variant: ModelVariant::Full,
        }
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, id: usize) -> &Tensor {
        &self.params[id]
    }

    /// Overwrites one parameter tensor; the shape must not change.
    pub fn set_param(&mut self, id: usize, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter {id}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {id} is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`; `trainable(id)` decides which ones
    /// receive gradients.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| tape.leaf(p.clone(), trainable(id)))
            .collect()
    }

    /// Conv stack plus flatten: `[U, 1, 500] -> [U, 512]`.
    pub(crate) fn conv_features_on(tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        let mut h = input;
        for stage in 0..6 {
            h = tape.conv1d(
                h,
                vars[param::conv_w(stage)],
                vars[param::conv_b(stage)],
                ENCODER.stride,
                ENCODER.padding,
            )?;
            h = tape.relu(h);
        }
        let rows = tape.value(h).shape()[0];
        tape.reshape(h, vec![rows, ENCODER.flat_features()])
    }

    pub(crate) fn encode_on(tape: &mut Tape, vars: &[Var], input: EncoderInput) -> Result<Var> {
        let feats = match input {
            EncoderInput::Curves(t) => {
                let x = tape.constant(t);
                Self::conv_features_on(tape, vars, x)?
            }
            EncoderInput::Features(t) => tape.constant(t),
        };
        tape.linear(feats, vars[param::ENC_FC_W], Some(vars[param::ENC_FC_B]))
    }

    /// Records the weighted loss of a packed batch.
    pub(crate) fn loss_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: EncoderInput,
        batch: &PackedBatch<'_>,
        w: LossWeights,
    ) -> Result<LossVars> {
        let n = batch.x.len();
        let z = Self::encode_on(tape, vars, input)?;
        let zx = tape.gather_rows(z, &batch.x)?;
        let zy = tape.gather_rows(z, &batch.y)?;
        let actions = tape.constant(Tensor::new(vec![n, ACTION_DIM], batch.actions.clone())?);

        let dz = tape.sub(zy, zx)?;
        let a_hat = tape.linear(dz, vars[param::PA_W], None)?;
        let action_sum = tape.mse(actions, a_hat)?;
        let action = tape.scale(action_sum, 1.0 / n as f64);
        let weighted_action = tape.scale(action, w.lambda2);

        match self.variant {
            ModelVariant::Full => {
                let cat = tape.concat_cols(zx, actions)?;
                let zy_hat = tape.linear(cat, vars[param::PZ_W], Some(vars[param::PZ_B]))?;
                let latent_sum = tape.mse(zy, zy_hat)?;
                let latent = tape.scale(latent_sum, 1.0 / n as f64);
                let weighted_latent = tape.scale(latent, w.lambda1);
                let total = tape.add(weighted_latent, weighted_action)?;
                Ok(LossVars {
                    total,
                    latent: Some(latent),
                    action,
                })
            }
            ModelVariant::NoLatentPredictor => Ok(LossVars {
                total: weighted_action,
                latent: None,
                action,
            }),
        }
    }

    pub(crate) fn read_terms(tape: &Tape, vars: &LossVars) -> LossTerms {
        LossTerms {
            total: tape.value(vars.total).data()[0],
            latent: vars.latent.map_or(0.0, |v| tape.value(v).data()[0]),
            action: tape.value(vars.action).data()[0],
        }
    }

    /// `λ1·mean‖z_y − ẑ_y‖² + λ2·mean‖a − â‖²` over the batch.
    pub fn loss(&self, batch: &[TrainPair<'_>], w: LossWeights) -> Result<LossTerms> {
        w.validate()?;
        let refs: Vec<&TrainPair> = batch.iter().collect();
        let packed = PackedBatch::new(&refs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let input = EncoderInput::Curves(curves_tensor(&packed.curves));
        let lv = self.loss_on(&mut tape, &vars, input, &packed, w)?;
        Ok(Self::read_terms(&tape, &lv))
    }

    /// Loss and the gradient of the total with respect to every parameter.
    /// Parameters excluded by the variant get zero gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[TrainPair<'_>],
        w: LossWeights,
    ) -> Result<(LossTerms, Vec<Tensor>)> {
        w.validate()?;
        let refs: Vec<&TrainPair> = batch.iter().collect();
        let packed = PackedBatch::new(&refs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| true);
        let input = EncoderInput::Curves(curves_tensor(&packed.curves));
        let lv = self.loss_on(&mut tape, &vars, input, &packed, w)?;
        let terms = Self::read_terms(&tape, &lv);
        let mut grads = tape.backward(lv.total)?;
        let g = vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter requires grad"))
            .collect();
        Ok((terms, g))
    }

    /// Conv features `[U, 512]` for a set of curves (inference only).
    pub(crate) fn conv_features(&self, curves: &[&PressureCurve]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(curves_tensor(curves));
        let f = Self::conv_features_on(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    pub fn encode(&self, curve: &PressureCurve) -> LatentVec {
        self.encode_many(&[curve])[0]
    }

    /// Encodes curves in chunks; the result does not depend on the chunking.
    pub fn encode_many(&self, curves: &[&PressureCurve]) -> Vec<LatentVec> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(curves.len());
        for chunk in curves.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, |_| false);
            let z = Self::encode_on(&mut tape, &vars, EncoderInput::Curves(curves_tensor(chunk)))
                .expect("encoder shapes are fixed");
            for row in tape.value(z).data().chunks_exact(LATENT_DIM) {
                out.push(LatentVec(row.try_into().expect("latent row")));
            }
        }
        out
    }

    /// `ẑ_y = P_z([z_x ; a])`.
    pub fn predict_latent(&self, z_x: &LatentVec, a: &ActionVec) -> Result<LatentVec> {
        if a.len() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "action must have {ACTION_DIM} components, got {}",
                a.len()
            )));
        }
        let w = self.params[param::PZ_W].data();
        let b = self.params[param::PZ_B].data();
        let input: Vec<f64> = z_x.0.iter().chain(a.values()).copied().collect();
        let n = LATENT_DIM + ACTION_DIM;
        Ok(LatentVec(std::array::from_fn(|i| {
            b[i] + dot(&w[i * n..(i + 1) * n], &input)
        })))
    }

    /// `â = P_a(z_y − z_x)`, a bias-free linear map of the latent difference.
    pub fn predict_action(&self, z_x: &LatentVec, z_y: &LatentVec) -> ActionVec {
        self.action_from_delta(&z_y.sub(z_x))
    }

    pub fn action_from_delta(&self, dz: &LatentVec) -> ActionVec {
        let w = self.params[param::PA_W].data();
        let values = (0..ACTION_DIM)
            .map(|i| dot(&w[i * LATENT_DIM..(i + 1) * LATENT_DIM], &dz.0))
            .collect();
        ActionVec::new(values).expect("finite weights give finite actions")
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        param_names().into_iter().zip(self.params.iter().cloned()).collect()
    }

    pub fn from_named(tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let names = param_names();
        let shapes = param_shapes();
        let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut params = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, architecture needs {shape:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            params,
            variant: ModelVariant::Full,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_named())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_named(load_checkpoint(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything needed to look at one pair in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub z_x: LatentVec,
    pub z_y: LatentVec,
    pub z_y_pred: LatentVec,
    pub a_pred: ActionVec,
    /// `z_y − z_x`
    pub dz_actual: LatentVec,
    /// `ẑ_y − z_x`
    pub dz_pred: LatentVec,
    /// Dimensions where `|Δz_actual|` exceeds the threshold.
    pub flagged: [bool; LATENT_DIM],
}

pub fn forward_diagnostics(
    model: &WorldModel,
    pair: &TrainPair<'_>,
    thresholds: &[f64; LATENT_DIM],
) -> Result<Diagnostics> {
    let z = model.encode_many(&[pair.x, pair.y]);
    let (z_x, z_y) = (z[0], z[1]);
    let z_y_pred = model.predict_latent(&z_x, &pair.a)?;
    let a_pred = model.predict_action(&z_x, &z_y);
    let dz_actual = z_y.sub(&z_x);
    let dz_pred = z_y_pred.sub(&z_x);
    let flagged = std::array::from_fn(|i| dz_actual.0[i].abs() > thresholds[i]);
    Ok(Diagnostics {
        z_x,
        z_y,
        z_y_pred,
        a_pred,
        dz_actual,
        dz_pred,
        flagged,
    })
}

/// Per-dimension significance thresholds: `factor` times the robust std
/// (1.4826·MAD) of `Δz` over pairs with no action.
pub fn calibrate_thresholds(
    model: &WorldModel,
    no_action_pairs: &[TrainPair<'_>],
    factor: f64,
) -> Result<[f64; LATENT_DIM]> {
    if no_action_pairs.is_empty() {
        return Err(Error::InvalidArgument("no calibration pairs".into()));
    }
    if let Some(p) = no_action_pairs.iter().find(|p| !p.a.is_zero()) {
        return Err(Error::InvalidArgument(format!(
            "calibration pair has non-zero action {:?}",
            p.a.values()
        )));
    }
    let curves: Vec<&PressureCurve> = no_action_pairs.iter().flat_map(|p| [p.x, p.y]).collect();
    let z = model.encode_many(&curves);
    let deltas: Vec<LatentVec> = z.chunks_exact(2).map(|c| c[1].sub(&c[0])).collect();
    Ok(std::array::from_fn(|d| {
        let col: Vec<f64> = deltas.iter().map(|v| v.0[d]).collect();
        factor * robust_std(&col)
    }))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub(crate) fn robust_std(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    1.4826 * median(&mut dev)
}
