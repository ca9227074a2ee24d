//! Subcommand implementations behind the `actwm` binary.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use actwm_core::evalkit::{aggregate_seeds, dataset_pca, write_pca_csv, write_report_csv, EvalReport, MetricReport};
use actwm_core::expharness::{
    evaluate_for_config, parse_seeds, results_table, run_experiment, seed_dir, train_for_config,
    ExperimentConfig, ExperimentId, ExperimentSpec, Progress, TableRow,
};
use actwm_core::plantsim::{build_doe_dataset, read_jsonl, write_jsonl, DatasetKind, DoeDataset};
use actwm_core::trainloop::save_loss_csv;
use actwm_core::worldmodel::WorldModel;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "actwm", version, about = "Action-conditioned world model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a DOE dataset and write it as JSON lines.
    GenData(GenData),
    /// Train a model for one experiment plan.
    Train(Train),
    /// Evaluate one checkpoint or the per-seed checkpoints of an experiment.
    Eval(Eval),
    /// Project every dataset curve onto the top two principal axes of its latents.
    Pca(Pca),
    /// Run an experiment end to end over several seeds.
    Experiment(Experiment),
    /// Start the control-loop HTTP service.
    Serve(Serve),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub plan: ExperimentId,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Override the number of (fine-tuning) epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// A checkpoint file, or an experiment directory holding per-seed checkpoints.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub plan: ExperimentId,
    /// Number of per-seed checkpoints (0..N) to evaluate when `--ckpt` is a directory.
    #[arg(long, default_value_t = 6)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Pca {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Experiment {
    #[arg(long)]
    pub id: ExperimentId,
    #[arg(long, default_value = "d1")]
    pub dataset: DatasetKind,
    /// `a..b` (inclusive), `a,b,c` or a single seed.
    #[arg(long, default_value = "0..5")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of (fine-tuning) epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the number of pre-training epochs.
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Serve {
    #[arg(long, env = "ACTWM_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "ACTWM_BIND", default_value = "127.0.0.1")]
    pub bind: String,
    /// Checkpoint for sessions that do not name one.
    #[arg(long, env = "ACTWM_CKPT")]
    pub ckpt: Option<PathBuf>,
    /// Include the hidden disturbance in state and disturb responses.
    #[arg(
        long,
        env = "ACTWM_DEBUG_EXPOSE_DISTURBANCE",
        action = clap::ArgAction::SetTrue,
        value_parser = clap::builder::BoolishValueParser::new()
    )]
    pub debug_expose_disturbance: bool,
}

/// Raises glibc's mmap and trim thresholds so the many short-lived
/// training buffers are recycled instead of being mapped and unmapped.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        // SAFETY: mallopt only adjusts allocator parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<DoeDataset> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn config_for(plan: ExperimentId, ds: &DoeDataset, epochs: Option<usize>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_id(plan, ds.kind);
    cfg.data_seed = ds.seed;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        if let Some(src) = cfg.pretrain.as_mut() {
            src.finetune.finetune_epochs = e;
        }
    }
    cfg
}

pub fn gen_data(args: &GenData) -> Result<()> {
    let ds = build_doe_dataset(args.kind, args.seed);
    let f = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&ds, BufWriter::new(f))?;
    log::info!("wrote {} curves to {}", ds.n_curves(), args.out.display());
    Ok(())
}

pub fn train(args: &Train) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = config_for(args.plan, &ds, args.epochs);
    let (model, history) = train_for_config(&cfg, &ds, args.seed, &mut |pretrain, e| {
        if e.epoch == 1 || e.epoch % 10 == 0 {
            let phase = if pretrain { "pretrain" } else { "train" };
            log::info!(
                "{phase} epoch {}: total {:.6} latent {:.6} action {:.6}",
                e.epoch,
                e.total,
                e.latent,
                e.action
            );
        }
    })?;
    model.save(&args.out)?;
    let csv = args.loss_csv.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    save_loss_csv(&csv, &history.train)?;
    if !history.pretrain.is_empty() {
        let mut p = csv.clone().into_os_string();
        p.push(".pretrain");
        save_loss_csv(PathBuf::from(p), &history.pretrain)?;
    }
    log::info!("saved {} and {}", args.out.display(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    plan: ExperimentId,
    aggregate: MetricReport,
    per_seed: Vec<(String, EvalReport)>,
}

/// Checkpoints named by `--ckpt`: the file itself, or `per-seed/{k}/ckpt.awm`
/// (also accepted without the `per-seed` level) for `k` in `0..seeds`.
pub fn resolve_checkpoints(ckpt: &Path, seeds: u64) -> Result<Vec<(String, PathBuf)>> {
    if ckpt.is_file() {
        return Ok(vec![("0".into(), ckpt.to_path_buf())]);
    }
    if !ckpt.is_dir() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    (0..seeds)
        .map(|k| {
            let nested = seed_dir(ckpt, k).join("ckpt.awm");
            let flat = ckpt.join(k.to_string()).join("ckpt.awm");
            let path = if nested.is_file() { nested } else { flat };
            if !path.is_file() {
                bail!("no checkpoint for seed {k} under {}", ckpt.display());
            }
            Ok((k.to_string(), path))
        })
        .collect()
}

pub fn eval(args: &Eval) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let cfg = config_for(args.plan, &ds, None);
    let mut per_seed = Vec::new();
    for (label, path) in resolve_checkpoints(&args.ckpt, args.seeds)? {
        let model = WorldModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let report = evaluate_for_config(&cfg, &ds, &model)?;
        log::info!("{label}: theta {:.2} d {:.3}", report.summary.theta_3d, report.summary.d_3d);
        per_seed.push((label, report));
    }
    let summaries: Vec<MetricReport> = per_seed.iter().map(|(_, r)| r.summary).collect();
    let aggregate = aggregate_seeds(&summaries)?;
    fs::create_dir_all(&args.out)?;
    let rows: Vec<(String, MetricReport)> = per_seed
        .iter()
        .map(|(l, r)| (l.clone(), r.summary))
        .chain(std::iter::once(("mean".to_string(), aggregate)))
        .collect();
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &rows)?;
    fs::write(args.out.join("seeds.csv"), buf)?;
    let table = results_table(&[TableRow {
        id: args.plan,
        setup: cfg.describe(),
        cells: [(ds.kind, aggregate)].into(),
    }])?;
    fs::write(args.out.join("table.csv"), table.to_csv())?;
    write_json(&args.out.join("report.json"), &EvalOutput { plan: args.plan, aggregate, per_seed })?;
    Ok(())
}

pub fn pca(args: &Pca) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let model = WorldModel::load(&args.ckpt)?;
    let (points, fit) = dataset_pca(&model, &ds)?;
    let f = fs::File::create(&args.out)?;
    write_pca_csv(BufWriter::new(f), &ds, &points)?;
    log::info!("explained variance ratio {:?}", fit.explained_ratio);
    Ok(())
}

pub fn experiment(args: &Experiment) -> Result<()> {
    let seeds = parse_seeds(&args.seeds)?;
    let mut spec = ExperimentSpec::new(args.id, args.dataset, seeds)?;
    if let Some(e) = args.epochs {
        spec.config.train.epochs = e;
        if let Some(src) = spec.config.pretrain.as_mut() {
            src.finetune.finetune_epochs = e;
        }
    }
    if let (Some(e), Some(src)) = (args.pretrain_epochs, spec.config.pretrain.as_mut()) {
        src.finetune.pretrain_epochs = e;
    }
    let res = run_experiment(&spec, Some(&args.out), &mut |p| match p {
        Progress::SeedStarted { seed } => log::info!("seed {seed} started"),
        Progress::Epoch { seed, pretrain, loss } if loss.epoch == 1 || loss.epoch % 50 == 0 => {
            log::info!(
                "seed {seed} {} epoch {}: total {:.6} action {:.6}",
                if pretrain { "pretrain" } else { "train" },
                loss.epoch,
                loss.total,
                loss.action
            )
        }
        Progress::SeedFinished { seed, report } => {
            log::info!("seed {seed}: theta {:.2} d {:.3} q {:.3}", report.theta_3d, report.d_3d, report.q_3d)
        }
        _ => {}
    })?;
    println!("{}", results_table(&[res.table_row()])?.to_markdown());
    Ok(())
}

pub async fn serve(args: &Serve) -> Result<()> {
    let listener = tokio::net::TcpListener::bind((args.bind.as_str(), args.port))
        .await
        .with_context(|| format!("binding {}:{}", args.bind, args.port))?;
    log::info!("listening on {}", listener.local_addr()?);
    if args.debug_expose_disturbance {
        log::warn!("debug mode: disturbances are visible to clients");
    }
    let config = actwm_service::ServiceConfig {
        default_ckpt: args.ckpt.clone(),
        expose_disturbance: args.debug_expose_disturbance,
        ..Default::default()
    };
    actwm_service::serve(listener, config).await?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Pca(a) => pca(a),
        Command::Experiment(a) => experiment(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(serve(a)),
    }
}
