//! Command implementations behind the `aotdiff` binary.
//!
//! [`run`] parses arguments and dispatches; every command is also callable
//! in-process. Flags override config-file values. The seed comes from
//! `--seed`, then `AOT_SEED`, then the config file. Exit codes: 0 success,
//! 2 invalid input, 3 runtime failure; failures print one JSON line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::data::{self, fmt_f64, Dataset};
use crate::diagnostics::{curvature, eval_generation, CurvatureReport};
use crate::error::{Error, Result};
use crate::guidance::{guided_sample, train_discriminator, DiscTrainConfig, Discriminator};
use crate::model::{AnalyticDenoiser, Denoiser, DenoiserModel};
use crate::rng::{self, standard_normal_vec, Stream};
use crate::sampler::{euler_sample, heun_sample, Method, Trajectory};
use crate::schedule::{timesteps, NoiseSchedule, DEFAULT_RHO, DEFAULT_SIGMA_MAX, DEFAULT_SIGMA_MIN};
use crate::training::{train_with, Checkpoint, TrainConfig};
use crate::transport::{pair_independent, pair_unconditional, CostKind, PairingMode, SampleBatch};

#[derive(Debug, Parser)]
#[command(name = "aotdiff", version, about = "Diffusion toolkit with assignment-paired noise")]
pub struct Cli {
    /// Run seed; all randomness derives from it.
    #[arg(long, global = true, env = "AOT_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (cost-matrix rows, trajectories).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser; writes checkpoint, log CSV and manifest.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare samples against reference data.
    Eval(EvalArgs),
    /// Pairing costs of assignment vs independent pairing over repeated trials.
    PairStats(PairStatsArgs),
    /// Print a noise schedule as CSV.
    Schedule(ScheduleArgs),
    /// Record sampling trajectories and their curvature.
    Traj(TrajArgs),
    /// Train a real-vs-generated discriminator.
    DgTrain(DgTrainArgs),
    /// Sample with discriminator guidance.
    DgSample(DgSampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toy {
    TwoModes,
    Ring,
    Checkerboard,
    Gaussian,
}

/// Where data comes from: a CSV file or a seeded toy generator.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV dataset (header row, optional `label` column).
    #[arg(long, conflicts_with = "toy")]
    pub data: Option<PathBuf>,
    /// Built-in toy dataset.
    #[arg(long)]
    pub toy: Option<Toy>,
    /// Points generated for a toy dataset.
    #[arg(long, default_value_t = 4096)]
    pub toy_count: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleParams {
    #[arg(long, default_value_t = 18)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    pub rho: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_MIN)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_MAX)]
    pub sigma_max: f64,
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        timesteps(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub refreshes: Option<usize>,
    /// `aot` or `independent`.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<PairingMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Condition on dataset labels.
    #[arg(long)]
    pub conditional: bool,
    /// Rescale data to per-dimension std = sigma_data before training.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleParams,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Heun)]
    pub method: MethodArg,
    /// Use raw weights instead of the EMA.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Heun,
    Euler,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Heun => Method::Heun,
            MethodArg::Euler => Method::Euler,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Metrics JSON destination (also printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also measure trajectory curvature of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub schedule: ScheduleParams,
    #[arg(long, default_value_t = 16)]
    pub trajectories: usize,
    /// Per-step curvature CSV (requires --checkpoint).
    #[arg(long)]
    pub curvature_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PairStatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 256)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Use squared Euclidean pairing cost.
    #[arg(long)]
    pub squared: bool,
    /// Per-trial CSV destination (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram CSV of per-pair costs pooled over trials.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub schedule: ScheduleParams,
}

#[derive(Debug, Clone, Args)]
pub struct TrajArgs {
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// `point-mass:X,Y,..`, `gaussian:S:X,Y,..` (std S, mean X,Y,..) or `empirical:PATH`.
    #[arg(long)]
    pub oracle: Option<String>,
    #[command(flatten)]
    pub schedule: ScheduleParams,
    /// Starting point; drawn as sigma_max·N(0, I) when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x_init: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Heun)]
    pub method: MethodArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Curvature JSON destination (stdout if omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DgTrainArgs {
    /// Base denoiser; fixes the coordinate space and generates fakes.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Generated samples CSV; sampled from the checkpoint when omitted.
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub generated_count: usize,
    #[command(flatten)]
    pub schedule: ScheduleParams,
    /// Pair noises to points by assignment inside each pool.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub use_aot: bool,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub refreshes: Option<usize>,
    #[arg(long)]
    pub conditional: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DgSampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub discriminator: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub weight: f64,
    #[command(flatten)]
    pub schedule: ScheduleParams,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Replay record written before a command's long-running work.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    artifacts: Vec<PathBuf>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        argv: std::env::args().collect(),
        config,
        seed,
        artifacts,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn parse_mode(s: &str) -> std::result::Result<PairingMode, String> {
    match s {
        "aot" => Ok(PairingMode::Aot),
        "independent" => Ok(PairingMode::Independent),
        _ => Err(format!("expected `aot` or `independent`, got `{s}`")),
    }
}

fn load_data(args: &DataArgs, seed: u64, required: bool) -> Result<Option<Dataset>> {
    if let Some(path) = &args.data {
        return data::load_csv(path).map(Some);
    }
    let Some(toy) = args.toy else {
        return if required {
            Err(Error::validation("data", "pass --data <csv> or --toy <name>"))
        } else {
            Ok(None)
        };
    };
    let mut r = rng::substream_lane(seed, Stream::Data, 2);
    let n = args.toy_count;
    let ds = match toy {
        Toy::TwoModes => data::make_two_modes(2.0, 0.25, n, &mut r),
        Toy::Ring => data::make_ring(2.0, 0.1, n, &mut r),
        Toy::Checkerboard => data::make_checkerboard(n, &mut r),
        Toy::Gaussian => data::make_gaussian(2, n, &mut r),
    }
    .map_err(|e| match e {
        Error::Validation { message, .. } => Error::validation("toy-count", message),
        e => e,
    })?;
    Ok(Some(ds))
}

fn resolve_seed(global: Option<u64>, fallback: u64) -> u64 {
    global.unwrap_or(fallback)
}

/// `train`: config file, then flag overrides.
pub fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => {
            serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::validation("config", e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = resolve_seed(seed, cfg.seed);
    if let Some(v) = args.pairs {
        cfg.pairs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.refreshes {
        cfg.refreshes = v;
    }
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = args.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = args.ema_decay {
        cfg.ema_decay = v;
    }
    if let Some(v) = &args.hidden {
        cfg.model.hidden = v.clone();
    }
    cfg.conditional |= args.conditional;
    cfg.validate()?;

    let mut dataset = load_data(&args.data, cfg.seed, true)?.expect("required");
    if args.normalize {
        dataset = dataset.normalize(cfg.sigma_data)?;
    }
    fs::create_dir_all(&args.out)?;
    let ck_path = args.out.join("checkpoint.json");
    let log_path = args.out.join("train_log.csv");
    write_manifest(
        &args.out.join("manifest.json"),
        "train",
        serde_json::to_value(&cfg)?,
        cfg.seed,
        vec![ck_path.clone(), log_path.clone()],
    )?;
    let mut checkpoint = None;
    let total = cfg.refreshes;
    let (_, log) = train_with(&cfg, &dataset, |trainer, rec| {
        if rec.refresh + 1 == total {
            checkpoint = Some(trainer.checkpoint());
        }
        if (rec.refresh + 1) % 100 == 0 {
            log::info!("refresh {}/{} loss {:.5}", rec.refresh + 1, total, rec.mean_loss);
        }
        Ok(())
    })?;
    checkpoint.expect("at least one refresh").save(&ck_path)?;
    fs::write(&log_path, log.to_csv())?;
    Ok(())
}

/// Draws `count` starting points `σ_max·N(0, I)` and, for conditional models,
/// uniform labels; then integrates each in parallel.
pub fn generate(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
    method: Method,
) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    if count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    let d = model.dim();
    let mut r = rng::substream(seed, Stream::Sampling);
    let inits: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            standard_normal_vec(&mut r, d)
                .into_iter()
                .map(|v| v * schedule.sigma_max)
                .collect()
        })
        .collect();
    let labels: Option<Vec<usize>> = model.is_conditional().then(|| {
        let mut lr = rng::substream(seed, Stream::Labels);
        (0..count)
            .map(|_| lr.random_range(0..model.config().class_count))
            .collect()
    });
    let run = |x: &Vec<f64>, label: Option<usize>| -> Result<Vec<f64>> {
        let t = match label {
            Some(l) => integrate(&model.conditioned(l), schedule, x, method)?,
            None => integrate(model, schedule, x, method)?,
        };
        Ok(t.endpoint().to_vec())
    };
    let ends: Vec<Vec<f64>> = inits
        .par_iter()
        .enumerate()
        .map(|(i, x)| run(x, labels.as_ref().map(|l| l[i])))
        .collect::<Result<_>>()?;
    Ok((
        Array2::from_shape_vec((count, d), ends.concat()).expect("shape"),
        labels,
    ))
}

fn integrate<D: Denoiser + ?Sized>(d: &D, s: &NoiseSchedule, x: &[f64], method: Method) -> Result<Trajectory> {
    match method {
        Method::Heun => heun_sample(d, s, x),
        Method::Euler => euler_sample(d, s, x),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => Err(Error::validation("threads", "must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Numerical(e.to_string()))?
            .install(f),
    }
}

/// `sample`: writes samples (in the data's original coordinates) as CSV.
pub fn cmd_sample(args: &SampleArgs, seed: Option<u64>) -> Result<()> {
    let schedule = args.schedule.build()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.denoiser(args.raw)?;
    let seed = resolve_seed(seed, 0);
    write_manifest(
        &manifest_path(&args.out),
        "sample",
        json!({"checkpoint": args.checkpoint, "schedule": schedule, "count": args.count, "method": Method::from(args.method), "raw": args.raw}),
        seed,
        vec![args.out.clone()],
    )?;
    let (points, labels) = generate(&model, &schedule, args.count, seed, args.method.into())?;
    let points = match &ck.normalization {
        Some(n) => n.invert(points.view()),
        None => points,
    };
    data::write_csv(&args.out, points.view(), labels.as_deref())
}

fn trajectory_stats(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<CurvatureReport>> {
    let mut r = rng::substream(seed, Stream::Sampling);
    let inits: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            standard_normal_vec(&mut r, model.dim())
                .into_iter()
                .map(|v| v * schedule.sigma_max)
                .collect()
        })
        .collect();
    inits
        .par_iter()
        .map(|x| curvature(&heun_sample(model, schedule, x)?))
        .collect()
}

/// `eval`: W2 and mode counts; optionally curvature of a checkpoint's trajectories.
pub fn cmd_eval(args: &EvalArgs, seed: Option<u64>) -> Result<serde_json::Value> {
    let samples = data::load_csv(&args.samples)?;
    let reference = data::load_csv(&args.reference)?;
    if samples.len() != reference.len() {
        return Err(Error::validation(
            "samples",
            format!(
                "{} samples vs {} reference points; counts must match",
                samples.len(),
                reference.len()
            ),
        ));
    }
    let m = eval_generation(
        samples.points.view(),
        reference.points.view(),
        reference.labels.as_deref(),
    )?;
    let mut out = serde_json::to_value(&m)?;
    if let Some(ck) = &args.checkpoint {
        let model = Checkpoint::load(ck)?.denoiser(false)?;
        let schedule = args.schedule.build()?;
        let reports = trajectory_stats(&model, &schedule, args.trajectories, resolve_seed(seed, 0))?;
        let k = reports.len() as f64;
        out["tangent_curvature"] = json!(reports.iter().map(|r| r.tangent_curvature).sum::<f64>() / k);
        out["x0_drift"] = json!(reports.iter().map(|r| r.x0_drift).sum::<f64>() / k);
        if let Some(path) = &args.curvature_out {
            let mut csv = String::from("step,sigma,mean_turn,mean_x0_change\n");
            for i in 0..reports[0].per_step.len() {
                let turns: Vec<f64> = reports.iter().filter_map(|r| r.per_step[i].turn).collect();
                let turn = if turns.is_empty() {
                    0.0
                } else {
                    turns.iter().sum::<f64>() / turns.len() as f64
                };
                let change = reports.iter().map(|r| r.per_step[i].x0_change).sum::<f64>() / k;
                csv.push_str(&format!(
                    "{i},{},{},{}\n",
                    fmt_f64(reports[0].per_step[i].sigma),
                    fmt_f64(turn),
                    fmt_f64(change)
                ));
            }
            fs::write(path, csv)?;
        }
    } else if args.curvature_out.is_some() {
        return Err(Error::validation("curvature-out", "requires --checkpoint"));
    }
    let text = serde_json::to_string_pretty(&out)?;
    println!("{text}");
    if let Some(p) = &args.out {
        fs::write(p, text)?;
    }
    Ok(out)
}

/// `pair-stats`: per-trial mean pairing costs, assignment vs independent.
pub fn cmd_pair_stats(args: &PairStatsArgs, seed: Option<u64>) -> Result<String> {
    if args.trials == 0 {
        return Err(Error::validation("trials", "must be positive"));
    }
    if args.pairs == 0 {
        return Err(Error::validation("pairs", "must be positive"));
    }
    if args.bins == 0 {
        return Err(Error::validation("bins", "must be positive"));
    }
    let seed = resolve_seed(seed, 0);
    let dataset = load_data(&args.data, seed, false)?;
    let kind = if args.squared {
        CostKind::SquaredEuclidean
    } else {
        CostKind::Euclidean
    };
    let mut data_rng = rng::substream(seed, Stream::Data);
    let mut noise_rng = rng::substream(seed, Stream::Noise);
    let mut csv = String::from("trial,aot_mean,independent_mean,relative_reduction\n");
    let mut aot_costs = Vec::new();
    let mut ind_costs = Vec::new();
    for trial in 0..args.trials {
        let (points, d) = match &dataset {
            Some(ds) => (ds.draw(args.pairs, false, &mut data_rng)?.0, ds.dim()),
            None => {
                let v = standard_normal_vec(&mut data_rng, args.pairs * 2);
                (Array2::from_shape_vec((args.pairs, 2), v).expect("shape"), 2)
            }
        };
        let noises = Array2::from_shape_vec((args.pairs, d), standard_normal_vec(&mut noise_rng, args.pairs * d))
            .expect("shape");
        let batch = SampleBatch::new(points, noises, None)?;
        let aot = pair_unconditional(&batch, kind)?;
        let ind = pair_independent(&batch, kind);
        let per_pair = |p: &crate::transport::PairedBatch| -> Vec<f64> {
            p.points
                .outer_iter()
                .zip(p.noises.outer_iter())
                .map(|(a, b)| {
                    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    if args.squared {
                        sq
                    } else {
                        sq.sqrt()
                    }
                })
                .collect()
        };
        aot_costs.extend(per_pair(&aot));
        ind_costs.extend(per_pair(&ind));
        let (a, i) = (aot.mean_cost(), ind.mean_cost());
        csv.push_str(&format!(
            "{trial},{},{},{}\n",
            fmt_f64(a),
            fmt_f64(i),
            fmt_f64((i - a) / i)
        ));
    }
    match &args.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &args.histogram {
        let hi = aot_costs.iter().chain(&ind_costs).cloned().fold(0.0, f64::max);
        let width = if hi > 0.0 { hi / args.bins as f64 } else { 1.0 };
        let count = |v: &[f64]| {
            let mut h = vec![0usize; args.bins];
            for &c in v {
                h[((c / width) as usize).min(args.bins - 1)] += 1;
            }
            h
        };
        let (ha, hi_) = (count(&aot_costs), count(&ind_costs));
        let mut s = String::from("bin_low,bin_high,aot_count,independent_count\n");
        for b in 0..args.bins {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(b as f64 * width),
                fmt_f64((b + 1) as f64 * width),
                ha[b],
                hi_[b]
            ));
        }
        fs::write(p, s)?;
    }
    Ok(csv)
}

/// `schedule`: `i,sigma` rows including the terminal zero.
pub fn cmd_schedule(args: &ScheduleArgs) -> Result<String> {
    let s = args.schedule.build()?;
    let mut csv = String::from("i,sigma\n");
    for (i, t) in s.timesteps.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", fmt_f64(*t)));
    }
    print!("{csv}");
    Ok(csv)
}

fn parse_oracle(spec: &str) -> Result<AnalyticDenoiser> {
    let bad = || Error::validation("oracle", format!("cannot parse {spec:?}"));
    let nums = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    };
    let (kind, rest) = spec.split_once(':').ok_or_else(bad)?;
    match kind {
        "point-mass" => Ok(AnalyticDenoiser::PointMass(nums(rest)?)),
        "gaussian" => {
            let (std, mean) = rest.split_once(':').ok_or_else(bad)?;
            let std: f64 = std.parse().map_err(|_| bad())?;
            if !(std.is_finite() && std > 0.0) {
                return Err(Error::validation("oracle", "gaussian std must be positive"));
            }
            Ok(AnalyticDenoiser::IsotropicGaussian { mean: nums(mean)?, std })
        }
        "empirical" => AnalyticDenoiser::empirical(data::load_csv(Path::new(rest))?.points),
        _ => Err(bad()),
    }
}

/// `traj`: trajectory CSV (`traj,step,sigma,x…,x0_hat…`) plus curvature JSON.
pub fn cmd_traj(args: &TrajArgs, seed: Option<u64>) -> Result<Vec<CurvatureReport>> {
    let schedule = args.schedule.build()?;
    let denoiser: Box<dyn Denoiser + Sync> = match (&args.checkpoint, &args.oracle) {
        (Some(p), None) => Box::new(Checkpoint::load(p)?.denoiser(false)?),
        (None, Some(spec)) => Box::new(parse_oracle(spec)?),
        _ => {
            return Err(Error::validation(
                "checkpoint",
                "pass exactly one of --checkpoint or --oracle",
            ))
        }
    };
    if args.count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    let d = denoiser.dim();
    let seed = resolve_seed(seed, 0);
    let inits: Vec<Vec<f64>> = match &args.x_init {
        Some(x) if x.len() != d => {
            return Err(Error::validation(
                "x-init",
                format!("expected {d} values, got {}", x.len()),
            ));
        }
        Some(x) => vec![x.clone(); args.count],
        None => {
            let mut r = rng::substream(seed, Stream::Sampling);
            (0..args.count)
                .map(|_| {
                    standard_normal_vec(&mut r, d)
                        .into_iter()
                        .map(|v| v * schedule.sigma_max)
                        .collect()
                })
                .collect()
        }
    };
    let method = Method::from(args.method);
    let trajs: Vec<Trajectory> = inits
        .par_iter()
        .map(|x| integrate(denoiser.as_ref(), &schedule, x, method))
        .collect::<Result<_>>()?;
    let mut header = vec!["traj".to_string(), "step".into(), "sigma".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..d).map(|j| format!("x0_hat{j}")));
    let mut csv = header.join(",") + "\n";
    for (k, t) in trajs.iter().enumerate() {
        for (i, r) in t.records.iter().enumerate() {
            let mut f = vec![k.to_string(), i.to_string(), fmt_f64(r.sigma)];
            f.extend(r.x.iter().map(|&v| fmt_f64(v)));
            f.extend(r.x0_hat.iter().map(|&v| fmt_f64(v)));
            csv.push_str(&(f.join(",") + "\n"));
        }
    }
    fs::write(&args.out, csv)?;
    let reports: Vec<CurvatureReport> = trajs.iter().map(curvature).collect::<Result<_>>()?;
    let text = serde_json::to_string_pretty(&reports)?;
    match &args.report {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(reports)
}

/// `dg-train`: discriminator in the base model's coordinates.
pub fn cmd_dg_train(args: &DgTrainArgs, seed: Option<u64>) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.denoiser(false)?;
    let seed = resolve_seed(seed, 0);
    let to_model_space = |ds: Dataset| -> Result<Dataset> {
        match &ck.normalization {
            Some(n) => Dataset::new(n.apply(ds.points.view()), ds.labels, ds.class_count),
            None => Ok(ds),
        }
    };
    let real = to_model_space(load_data(&args.data, seed, true)?.expect("required"))?;
    let mut cfg = DiscTrainConfig {
        use_aot: args.use_aot,
        conditional: args.conditional,
        seed,
        ..DiscTrainConfig::default()
    };
    cfg.model.sigma_data = model.config().sigma_data;
    if let Some(v) = args.pairs {
        cfg.pairs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.refreshes {
        cfg.refreshes = v;
    }
    write_manifest(
        &manifest_path(&args.out),
        "dg-train",
        serde_json::to_value(&cfg)?,
        seed,
        vec![args.out.clone()],
    )?;
    let generated = match &args.generated {
        Some(p) => to_model_space(data::load_csv(p)?)?,
        None => {
            let schedule = args.schedule.build()?;
            let (pts, labels) = generate(&model, &schedule, args.generated_count, seed ^ 0x5eed, Method::Heun)?;
            let c = model.config().class_count.max(1);
            Dataset::new(pts, labels, c)?
        }
    };
    let (disc, _) = train_discriminator(&real, &generated, &cfg)?;
    disc.to_checkpoint(serde_json::to_value(&cfg)?, seed, cfg.refreshes as u64)
        .save(&args.out)
}

/// `dg-sample`: guided Heun sampling.
pub fn cmd_dg_sample(args: &DgSampleArgs, seed: Option<u64>) -> Result<()> {
    let schedule = args.schedule.build()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.denoiser(false)?;
    let disc = Discriminator::from_checkpoint(&Checkpoint::load(&args.discriminator)?)?;
    if args.count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    let seed = resolve_seed(seed, 0);
    write_manifest(
        &manifest_path(&args.out),
        "dg-sample",
        json!({"checkpoint": args.checkpoint, "discriminator": args.discriminator, "weight": args.weight, "schedule": schedule, "count": args.count}),
        seed,
        vec![args.out.clone()],
    )?;
    let d = model.dim();
    let mut r = rng::substream(seed, Stream::Sampling);
    let inits: Vec<Vec<f64>> = (0..args.count)
        .map(|_| {
            standard_normal_vec(&mut r, d)
                .into_iter()
                .map(|v| v * schedule.sigma_max)
                .collect()
        })
        .collect();
    let labels: Option<Vec<usize>> = model.is_conditional().then(|| {
        let mut lr = rng::substream(seed, Stream::Labels);
        (0..args.count)
            .map(|_| lr.random_range(0..model.config().class_count))
            .collect()
    });
    let disc_label = |l: Option<usize>| if disc.config().class_count > 0 { l } else { None };
    let ends: Vec<Vec<f64>> = inits
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let l = labels.as_ref().map(|v| v[i]);
            let run = match l {
                Some(l) => guided_sample(
                    &model.conditioned(l),
                    &disc,
                    &schedule,
                    x,
                    args.weight,
                    disc_label(Some(l)),
                )?,
                None => guided_sample(&model, &disc, &schedule, x, args.weight, None)?,
            };
            Ok(run.trajectory.endpoint().to_vec())
        })
        .collect::<Result<_>>()?;
    let pts = Array2::from_shape_vec((args.count, d), ends.concat()).expect("shape");
    let pts = match &ck.normalization {
        Some(n) => n.invert(pts.view()),
        None => pts,
    };
    data::write_csv(&args.out, pts.view(), labels.as_deref())
}

/// Dispatches a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    with_threads(cli.threads, || match &cli.command {
        Command::Train(a) => cmd_train(a, seed),
        Command::Sample(a) => cmd_sample(a, seed),
        Command::Eval(a) => cmd_eval(a, seed).map(drop),
        Command::PairStats(a) => cmd_pair_stats(a, seed).map(drop),
        Command::Schedule(a) => cmd_schedule(a).map(drop),
        Command::Traj(a) => cmd_traj(a, seed).map(drop),
        Command::DgTrain(a) => cmd_dg_train(a, seed),
        Command::DgSample(a) => cmd_dg_sample(a, seed),
    })
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation { .. } | Error::Parse { .. } => 2,
        _ => 3,
    }
}

/// Single-line machine-readable description of an error.
pub fn error_json(e: &Error) -> serde_json::Value {
    match e {
        Error::Validation { field, message } => {
            json!({"error": "validation", "flag": format!("--{field}"), "message": message})
        }
        Error::Parse { path, line, message } => {
            json!({"error": "parse", "path": path, "line": line, "message": message})
        }
        Error::Corrupt { path, message } => json!({"error": "corrupt", "path": path, "message": message}),
        Error::Version { found, expected } => json!({"error": "version", "found": found, "expected": expected}),
        other => json!({"error": "runtime", "message": other.to_string()}),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let flag = match e.get(ContextKind::InvalidArg) {
                Some(ContextValue::String(s)) => s.split([' ', '=']).next().unwrap_or_default().to_string(),
                _ => String::new(),
            };
            let message = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", json!({"error": "validation", "flag": flag, "message": message}));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
