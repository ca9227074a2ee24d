//! Experiment definitions (which data, which pairs, which model variant,
//! whether to pre-train), end-to-end runs over several seeds, and the
//! results table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{aggregate_seeds, evaluate_model, EvalReport, MetricReport};
use crate::plantsim::{build_doe_dataset, build_with_model, write_jsonl, CurveModel, DatasetKind, DoeDataset};
use crate::trainloop::{
    ablate_latent_predictor, exp1_plans, exp2_plans, make_pairs, pretrain_then_finetune_observed,
    save_loss_csv, source_plan, train_observed, EpochLoss, FinetuneConfig, PairingPlan, TrainConfig,
};
use crate::worldmodel::{ModelVariant, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "exp1")]
    Exp1,
    #[serde(rename = "exp2")]
    Exp2,
    #[serde(rename = "exp3")]
    Exp3,
    #[serde(rename = "exp4.1")]
    Exp4_1,
    #[serde(rename = "exp4.2")]
    Exp4_2,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [Self::Exp1, Self::Exp2, Self::Exp3, Self::Exp4_1, Self::Exp4_2];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exp1 => "exp1",
            Self::Exp2 => "exp2",
            Self::Exp3 => "exp3",
            Self::Exp4_1 => "exp4.1",
            Self::Exp4_2 => "exp4.2",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

/// Which settings form the training pool (and with it the test split).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Cube corners for training, inner settings for testing.
    Corners,
    /// Origin plus its axis neighbours for training, origin references for testing.
    Axes,
}

impl PlanKind {
    pub fn plans(self, ds: &DoeDataset) -> Result<(PairingPlan, PairingPlan)> {
        match self {
            Self::Corners => exp1_plans(ds),
            Self::Axes => exp2_plans(ds),
        }
    }

    fn n_settings(self) -> usize {
        match self {
            Self::Corners => 8,
            Self::Axes => 4,
        }
    }
}

/// Pre-training data: a wide DOE generated with its own curve constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub kind: DatasetKind,
    pub model: CurveModel,
    pub finetune: FinetuneConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::D3,
            model: DatasetKind::D3.curve_model(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Everything except the experiment name and seed list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub plan: PlanKind,
    pub variant: ModelVariant,
    pub pretrain: Option<SourceConfig>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn for_id(id: ExperimentId, dataset: DatasetKind) -> Self {
        let (plan, variant, pretrain) = match id {
            ExperimentId::Exp1 => (PlanKind::Corners, ModelVariant::Full, false),
            ExperimentId::Exp2 => (PlanKind::Axes, ModelVariant::Full, false),
            ExperimentId::Exp3 => (PlanKind::Corners, ModelVariant::NoLatentPredictor, false),
            ExperimentId::Exp4_1 => (PlanKind::Corners, ModelVariant::NoLatentPredictor, true),
            ExperimentId::Exp4_2 => (PlanKind::Corners, ModelVariant::Full, true),
        };
        Self {
            dataset,
            data_seed: 0,
            plan,
            variant,
            pretrain: pretrain.then(SourceConfig::default),
            train: TrainConfig::default(),
        }
    }

    /// Table-style description of the setup.
    pub fn describe(&self) -> String {
        let sign = |b: bool| if b { '+' } else { '−' };
        format!(
            "{} latent predictor, {} pre-training, {} settings",
            sign(self.variant == ModelVariant::Full),
            sign(self.pretrain.is_some()),
            self.plan.n_settings()
        )
    }
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId, dataset: DatasetKind, seeds: Vec<u64>) -> Result<Self> {
        let spec = Self {
            id,
            seeds,
            config: ExperimentConfig::for_id(id, dataset),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("experiment needs at least one seed".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("duplicate seeds".into()));
        }
        if !self.config.dataset.is_factorial() {
            return Err(Error::InvalidArgument(format!(
                "experiments need a factorial target dataset, got {}",
                self.config.dataset
            )));
        }
        self.config.train.validate()
    }
}

/// Seed list from `a..b` (inclusive), `a,b,c` or a single number.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidArgument(format!("bad seed list {text:?}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    if let Some((a, b)) = text.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(num).collect()
}

/// Progress events from a running experiment.
#[derive(Clone, Copy, Debug)]
pub enum Progress<'a> {
    SeedStarted { seed: u64 },
    Epoch { seed: u64, pretrain: bool, loss: &'a EpochLoss },
    SeedFinished { seed: u64, report: &'a MetricReport },
}

/// Loss histories of one training run; `pretrain` is empty without pre-training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub pretrain: Vec<EpochLoss>,
    pub train: Vec<EpochLoss>,
}

/// The pre-training dataset for a target dataset under `source`.
pub fn source_dataset(cfg: &ExperimentConfig, source: &SourceConfig) -> DoeDataset {
    build_with_model(source.kind, cfg.data_seed, source.model.clone())
}

/// Trains one model for `cfg` on `target` with the given seed (model
/// initialization and shuffling).
pub fn train_for_config(
    cfg: &ExperimentConfig,
    target: &DoeDataset,
    seed: u64,
    on_epoch: &mut dyn FnMut(bool, &EpochLoss),
) -> Result<(WorldModel, TrainHistory)> {
    let (train_plan, _) = cfg.plan.plans(target)?;
    let target_pairs = make_pairs(target, &train_plan)?;
    let mut model = WorldModel::new(seed);
    if cfg.variant == ModelVariant::NoLatentPredictor {
        model = ablate_latent_predictor(model);
    }
    let tcfg = TrainConfig { seed, ..cfg.train };
    match &cfg.pretrain {
        None => {
            let (m, h) = train_observed(model, &target_pairs, &tcfg, &mut |e| on_epoch(false, e))?;
            Ok((m, TrainHistory { pretrain: vec![], train: h }))
        }
        Some(src) => {
            let source = source_dataset(cfg, src);
            let source_pairs = make_pairs(&source, &source_plan(&source))?;
            let fcfg = src.finetune;
            let (m, h) = pretrain_then_finetune_observed(
                model,
                &source_pairs,
                &target_pairs,
                &fcfg,
                &tcfg,
                on_epoch,
            )?;
            Ok((m, TrainHistory { pretrain: h.pretrain, train: h.finetune }))
        }
    }
}

/// Evaluation of a trained model on the config's test split.
pub fn evaluate_for_config(cfg: &ExperimentConfig, target: &DoeDataset, model: &WorldModel) -> Result<EvalReport> {
    let (_, test_plan) = cfg.plan.plans(target)?;
    evaluate_model(model, target, &test_plan)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: EvalReport,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub seeds: Vec<SeedResult>,
    pub aggregate: MetricReport,
}

impl ExperimentResult {
    pub fn table_row(&self) -> TableRow {
        TableRow {
            id: self.spec.id,
            setup: self.spec.config.describe(),
            cells: BTreeMap::from([(self.spec.config.dataset, self.aggregate)]),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Per-seed checkpoint path inside an experiment directory.
pub fn seed_dir(out: &Path, seed: u64) -> std::path::PathBuf {
    out.join("per-seed").join(seed.to_string())
}

/// generate → pair → (pre-train) → train → evaluate for every seed, then
/// aggregate. With `out`, artifacts are written as each seed finishes so a
/// failing seed leaves the earlier ones on disk.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out: Option<&Path>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<ExperimentResult> {
    spec.validate()?;
    let cfg = &spec.config;
    let target = build_doe_dataset(cfg.dataset, cfg.data_seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), spec)?;
        write_jsonl(&target, std::io::BufWriter::new(fs::File::create(dir.join("dataset.jsonl"))?))?;
    }
    let mut seeds = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        progress(Progress::SeedStarted { seed });
        let (model, history) = train_for_config(cfg, &target, seed, &mut |pretrain, loss| {
            progress(Progress::Epoch { seed, pretrain, loss })
        })?;
        let report = evaluate_for_config(cfg, &target, &model)?;
        if let Some(dir) = out {
            let sd = seed_dir(dir, seed);
            fs::create_dir_all(&sd)?;
            model.save(sd.join("ckpt.awm"))?;
            write_json(&sd.join("report.json"), &report)?;
            save_loss_csv(sd.join("loss.csv"), &history.train)?;
            if !history.pretrain.is_empty() {
                save_loss_csv(sd.join("pretrain_loss.csv"), &history.pretrain)?;
            }
        }
        progress(Progress::SeedFinished { seed, report: &report.summary });
        seeds.push(SeedResult { seed, report, history });
    }
    let summaries: Vec<MetricReport> = seeds.iter().map(|s| s.report.summary).collect();
    let aggregate = aggregate_seeds(&summaries)?;
    let result = ExperimentResult {
        spec: spec.clone(),
        seeds,
        aggregate,
    };
    if let Some(dir) = out {
        let table = results_table(&[result.table_row()])?;
        fs::write(dir.join("table.csv"), table.to_csv())?;
        fs::write(dir.join("table.md"), table.to_markdown())?;
        let mut per_seed = Vec::new();
        let rows: Vec<(String, MetricReport)> = result
            .seeds
            .iter()
            .map(|s| (s.seed.to_string(), s.report.summary))
            .chain(std::iter::once(("mean".to_string(), result.aggregate)))
            .collect();
        crate::evalkit::write_report_csv(&mut per_seed, &rows)?;
        fs::write(dir.join("seeds.csv"), per_seed)?;
    }
    Ok(result)
}

/// One experiment's aggregated metrics per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub id: ExperimentId,
    pub setup: String,
    pub cells: BTreeMap<DatasetKind, MetricReport>,
}

const METRIC_COLUMNS: [&str; 6] = ["theta_2d", "d_2d", "q_2d", "theta", "d", "q"];

fn metric_values(r: &MetricReport) -> [f64; 6] {
    [r.theta_2d, r.d_2d, r.q_2d, r.theta_3d, r.d_3d, r.q_3d]
}

/// Rows merged by experiment and sorted by id, with the per-column minima.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub datasets: Vec<DatasetKind>,
    pub rows: Vec<TableRow>,
    /// Row index of the smallest value per (dataset, metric) column; `None`
    /// when no row has that dataset.
    pub minima: Vec<Option<usize>>,
}

pub fn results_table(rows: &[TableRow]) -> Result<ResultsTable> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("results table needs at least one row".into()));
    }
    let mut merged: BTreeMap<ExperimentId, TableRow> = BTreeMap::new();
    for r in rows {
        let entry = merged.entry(r.id).or_insert_with(|| TableRow {
            id: r.id,
            setup: r.setup.clone(),
            cells: BTreeMap::new(),
        });
        entry.cells.extend(r.cells.iter().map(|(k, v)| (*k, *v)));
    }
    let rows: Vec<TableRow> = merged.into_values().collect();
    let mut datasets: Vec<DatasetKind> = rows.iter().flat_map(|r| r.cells.keys().copied()).collect();
    datasets.sort();
    datasets.dedup();
    let mut minima = Vec::new();
    for ds in &datasets {
        for col in 0..METRIC_COLUMNS.len() {
            let best = rows
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.cells.get(ds).map(|m| (i, metric_values(m)[col])))
                .filter(|(_, v)| !v.is_nan())
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            minima.push(best);
        }
    }
    Ok(ResultsTable { datasets, rows, minima })
}

impl ResultsTable {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["experiment".to_string(), "setup".to_string()];
        for ds in &self.datasets {
            h.extend(METRIC_COLUMNS.iter().map(|c| format!("{ds}_{c}")));
        }
        h
    }

    fn cells(&self, row: usize) -> Vec<Option<f64>> {
        self.datasets
            .iter()
            .flat_map(|ds| match self.rows[row].cells.get(ds) {
                Some(m) => metric_values(m).map(Some),
                None => [None; 6],
            })
            .collect()
    }

    /// Plain numbers; missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let mut line = vec![r.id.to_string(), format!("\"{}\"", r.setup)];
            line.extend(self.cells(i).into_iter().map(|c| c.map_or(String::new(), |v| v.to_string())));
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Two-decimal table with column minima in bold.
    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
        for (i, r) in self.rows.iter().enumerate() {
            let mut line = vec![r.id.to_string(), r.setup.clone()];
            for (col, c) in self.cells(i).into_iter().enumerate() {
                line.push(match c {
                    None => String::new(),
                    Some(v) if self.minima[col] == Some(i) => format!("**{v:.2}**"),
                    Some(v) => format!("{v:.2}"),
                });
            }
            out.push_str(&format!("| {} |\n", line.join(" | ")));
        }
        out
    }
}
