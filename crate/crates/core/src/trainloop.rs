//! Pair construction for the experiment plans, the minibatch Adam schedule,
//! the pretrain/fine-tune protocol and loss-history output.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::plantsim::{axis_settings, corner_settings, ActionVec, DoeDataset, PressureCurve};
use crate::worldmodel::{
    curves_tensor, param, EncoderInput, LossTerms, LossWeights, ModelVariant, PackedBatch,
    TrainPair, WorldModel,
};

/// One recorded cycle of one DOE setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub setting: usize,
    pub cycle: usize,
}

/// Which samples act as references and which as observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingPlan {
    pub reference_pool: Vec<SampleId>,
    pub observation_pool: Vec<SampleId>,
    pub include_self_pairs: bool,
    pub ordered: bool,
}

impl PairingPlan {
    /// Ordered product of two pools, self-pairs included.
    pub fn new(reference_pool: Vec<SampleId>, observation_pool: Vec<SampleId>) -> Self {
        Self {
            reference_pool,
            observation_pool,
            include_self_pairs: true,
            ordered: true,
        }
    }

    /// Every pool member paired with every other, in both directions.
    pub fn all_to_all(pool: Vec<SampleId>) -> Self {
        Self::new(pool.clone(), pool)
    }

    /// Pair count `make_pairs` will produce.
    pub fn pair_count(&self) -> usize {
        if self.include_self_pairs && self.ordered {
            return self.reference_pool.len() * self.observation_pool.len();
        }
        self.enumerate().count()
    }

    /// `(reference, observation)` ids in the order `make_pairs` emits them.
    pub fn sample_pairs(&self) -> Vec<(SampleId, SampleId)> {
        self.enumerate().collect()
    }

    fn enumerate(&self) -> impl Iterator<Item = (SampleId, SampleId)> + '_ {
        let mut seen = HashSet::new();
        self.reference_pool
            .iter()
            .flat_map(move |&r| self.observation_pool.iter().map(move |&o| (r, o)))
            .filter(move |&(r, o)| {
                if !self.include_self_pairs && r == o {
                    return false;
                }
                self.ordered || seen.insert(if r <= o { (r, o) } else { (o, r) })
            })
    }
}

/// All cycles of the given settings, setting-major.
pub fn pool(ds: &DoeDataset, settings: &[usize]) -> Vec<SampleId> {
    settings
        .iter()
        .flat_map(|&setting| {
            (0..ds.cycles_per_setting).map(move |cycle| SampleId { setting, cycle })
        })
        .collect()
}

fn complement(ds: &DoeDataset, settings: &[usize]) -> Vec<usize> {
    (0..ds.settings.len()).filter(|s| !settings.contains(s)).collect()
}

/// Train on the 8 cube corners; test with corner references against the
/// 19 remaining settings.
pub fn exp1_plans(ds: &DoeDataset) -> Result<(PairingPlan, PairingPlan)> {
    let corners = corner_settings(ds)?;
    let train = PairingPlan::all_to_all(pool(ds, &corners));
    let test = PairingPlan::new(pool(ds, &corners), pool(ds, &complement(ds, &corners)));
    Ok((train, test))
}

/// Train on the origin and its three axis neighbours; test from the origin
/// to the 23 remaining settings.
pub fn exp2_plans(ds: &DoeDataset) -> Result<(PairingPlan, PairingPlan)> {
    let axes = axis_settings(ds)?;
    let train = PairingPlan::all_to_all(pool(ds, &axes));
    let test = PairingPlan::new(pool(ds, &axes[..1]), pool(ds, &complement(ds, &axes)));
    Ok((train, test))
}

/// Every sample of the dataset against every other (pre-training source).
pub fn source_plan(ds: &DoeDataset) -> PairingPlan {
    let all: Vec<usize> = (0..ds.settings.len()).collect();
    PairingPlan::all_to_all(pool(ds, &all))
}

/// Pairs in plan order; the action is observation minus reference over the
/// core parameters.
pub fn make_pairs<'a>(ds: &'a DoeDataset, plan: &PairingPlan) -> Result<Vec<TrainPair<'a>>> {
    if plan.reference_pool.is_empty() || plan.observation_pool.is_empty() {
        return Err(Error::InvalidArgument("pairing pool is empty".into()));
    }
    for id in plan.reference_pool.iter().chain(&plan.observation_pool) {
        if id.setting >= ds.settings.len() || id.cycle >= ds.cycles_per_setting {
            return Err(Error::InvalidArgument(format!(
                "sample {id:?} outside the {}x{} dataset",
                ds.settings.len(),
                ds.cycles_per_setting
            )));
        }
    }
    Ok(plan
        .enumerate()
        .map(|(r, o)| TrainPair {
            x: ds.curve(r.setting, r.cycle),
            y: ds.curve(o.setting, o.cycle),
            a: ActionVec::between(&ds.settings[r.setting], &ds.settings[o.setting]),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 500,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let a = &self.adam;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::InvalidArgument(format!("bad optimizer settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 10,
            finetune_epochs: 500,
        }
    }
}

impl FinetuneConfig {
    /// Parameters updated during fine-tuning: the encoder head and both predictors.
    pub fn is_trainable(id: usize) -> bool {
        !param::is_conv(id)
    }

    pub fn is_frozen(id: usize) -> bool {
        param::is_conv(id)
    }
}

/// Pair-weighted mean losses of one epoch (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub latent: f64,
    pub action: f64,
}

/// Latent predictor switched off: the model regresses actions directly and
/// P_z is left out of optimization.
pub fn ablate_latent_predictor(model: WorldModel) -> WorldModel {
    model.with_variant(ModelVariant::NoLatentPredictor)
}

/// Conv features per distinct curve, computed once for a frozen conv stack.
struct FeatureCache {
    rows: HashMap<*const PressureCurve, usize>,
    width: usize,
    data: Vec<f64>,
}

impl FeatureCache {
    fn build(model: &WorldModel, pairs: &[TrainPair<'_>]) -> Result<Self> {
        let mut rows = HashMap::new();
        let mut curves: Vec<&PressureCurve> = Vec::new();
        for p in pairs {
            for c in [p.x, p.y] {
                rows.entry(c as *const _).or_insert_with(|| {
                    curves.push(c);
                    curves.len() - 1
                });
            }
        }
        let mut data = Vec::new();
        let mut width = 0;
        for chunk in curves.chunks(64) {
            let f = model.conv_features(chunk)?;
            width = f.shape()[1];
            data.extend_from_slice(f.data());
        }
        Ok(Self { rows, width, data })
    }

    fn gather(&self, curves: &[&PressureCurve]) -> Tensor {
        let mut out = Vec::with_capacity(curves.len() * self.width);
        for c in curves {
            let r = self.rows[&(*c as *const _)];
            out.extend_from_slice(&self.data[r * self.width..(r + 1) * self.width]);
        }
        Tensor::new(vec![curves.len(), self.width], out).expect("cached features are finite")
    }
}

struct Trainer<'m> {
    model: &'m mut WorldModel,
    ids: Vec<usize>,
    adam: AdamState,
    weights: LossWeights,
    cache: Option<FeatureCache>,
}

impl<'m> Trainer<'m> {
    fn new(model: &'m mut WorldModel, cfg: &TrainConfig, trainable: impl Fn(usize) -> bool) -> Self {
        let ablated = model.variant() == ModelVariant::NoLatentPredictor;
        let ids: Vec<usize> = (0..param::COUNT)
            .filter(|&id| trainable(id) && !(ablated && param::is_latent_predictor(id)))
            .collect();
        let adam = AdamState::new(cfg.adam, ids.iter().map(|&id| model.param(id)));
        Self {
            model,
            ids,
            adam,
            weights: cfg.weights,
            cache: None,
        }
    }

    fn step(&mut self, batch: &[&TrainPair<'_>]) -> Result<LossTerms> {
        let packed = PackedBatch::new(batch)?;
        let mut tape = Tape::new();
        let ids = &self.ids;
        let vars = self.model.bind(&mut tape, |id| ids.contains(&id));
        let input = match &self.cache {
            Some(cache) => EncoderInput::Features(cache.gather(&packed.curves)),
            None => EncoderInput::Curves(curves_tensor(&packed.curves)),
        };
        let lv = self.model.loss_on(&mut tape, &vars, input, &packed, self.weights)?;
        let terms = WorldModel::read_terms(&tape, &lv);
        if !(terms.total.is_finite() && terms.latent.is_finite() && terms.action.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss after {} optimizer steps: {terms:?}",
                self.adam.step
            )));
        }
        let mut grads = tape.backward(lv.total)?;
        let g: Vec<Tensor> = self
            .ids
            .iter()
            .map(|&id| grads.take(vars[id]).expect("trainable parameter has a gradient"))
            .collect();
        let g_refs: Vec<&Tensor> = g.iter().collect();
        let params = self.model.params_mut();
        let mut p_refs: Vec<&mut Tensor> = params
            .iter_mut()
            .enumerate()
            .filter(|(id, _)| self.ids.contains(id))
            .map(|(_, t)| t)
            .collect();
        self.adam.update(&mut p_refs, &g_refs)?;
        Ok(terms)
    }

    fn run(
        &mut self,
        pairs: &[TrainPair<'_>],
        epochs: usize,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
        on_epoch: &mut dyn FnMut(&EpochLoss),
    ) -> Result<Vec<EpochLoss>> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            order.shuffle(rng);
            let mut sum = LossTerms::default();
            for chunk in order.chunks(batch_size) {
                let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &pairs[i]).collect();
                let t = self.step(&batch).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                let n = chunk.len() as f64;
                sum.total += t.total * n;
                sum.latent += t.latent * n;
                sum.action += t.action * n;
            }
            let n = pairs.len() as f64;
            let rec = EpochLoss {
                epoch,
                total: sum.total / n,
                latent: sum.latent / n,
                action: sum.action / n,
            };
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(history)
    }
}

fn check_pairs(pairs: &[TrainPair<'_>]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    Ok(())
}

/// Minibatch Adam on the combined loss. Each epoch reshuffles with the
/// config seed's stream and keeps the final partial batch.
pub fn train(
    model: WorldModel,
    pairs: &[TrainPair<'_>],
    cfg: &TrainConfig,
) -> Result<(WorldModel, Vec<EpochLoss>)> {
    train_observed(model, pairs, cfg, &mut |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    mut model: WorldModel,
    pairs: &[TrainPair<'_>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLoss),
) -> Result<(WorldModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let history = Trainer::new(&mut model, cfg, |_| true).run(
        pairs,
        cfg.epochs,
        cfg.batch_size,
        &mut rng,
        on_epoch,
    )?;
    Ok((model, history))
}

/// Loss histories of the two phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub pretrain: Vec<EpochLoss>,
    pub finetune: Vec<EpochLoss>,
}

/// Trains everything on `source_pairs`, then freezes the conv stack and
/// trains the encoder head and predictors on `target_pairs`. Conv features
/// of the target curves are computed once for the frozen phase.
pub fn pretrain_then_finetune(
    model: WorldModel,
    source_pairs: &[TrainPair<'_>],
    target_pairs: &[TrainPair<'_>],
    fcfg: &FinetuneConfig,
    cfg: &TrainConfig,
) -> Result<(WorldModel, FinetuneHistory)> {
    pretrain_then_finetune_observed(model, source_pairs, target_pairs, fcfg, cfg, &mut |_, _| {})
}

/// Callback receives `true` for pre-training epochs.
pub fn pretrain_then_finetune_observed(
    mut model: WorldModel,
    source_pairs: &[TrainPair<'_>],
    target_pairs: &[TrainPair<'_>],
    fcfg: &FinetuneConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(bool, &EpochLoss),
) -> Result<(WorldModel, FinetuneHistory)> {
    cfg.validate()?;
    check_pairs(source_pairs)?;
    check_pairs(target_pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pretrain = Trainer::new(&mut model, cfg, |_| true).run(
        source_pairs,
        fcfg.pretrain_epochs,
        cfg.batch_size,
        &mut rng,
        &mut |e| on_epoch(true, e),
    )?;
    let cache = FeatureCache::build(&model, target_pairs)?;
    let mut tuner = Trainer::new(&mut model, cfg, FinetuneConfig::is_trainable);
    tuner.cache = Some(cache);
    let finetune = tuner.run(
        target_pairs,
        fcfg.finetune_epochs,
        cfg.batch_size,
        &mut rng,
        &mut |e| on_epoch(false, e),
    )?;
    Ok((model, FinetuneHistory { pretrain, finetune }))
}

pub fn write_loss_csv<W: Write>(mut w: W, history: &[EpochLoss]) -> Result<()> {
    writeln!(w, "epoch,total,latent_term,action_term")?;
    for e in history {
        writeln!(w, "{},{},{},{}", e.epoch, e.total, e.latent, e.action)?;
    }
    Ok(())
}

pub fn save_loss_csv(path: impl AsRef<Path>, history: &[EpochLoss]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_loss_csv(&mut w, history)?;
    w.flush()?;
    Ok(())
}
