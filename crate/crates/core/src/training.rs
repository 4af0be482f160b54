//! The pool-based training loop: draw and pair a pool, sweep it in
//! minibatches with one σ per element, take Adam steps, track an EMA.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::guidance::DiscriminatorConfig;
use crate::model::{DenoiserConfig, DenoiserModel};
use crate::rng::{self, Rng, Stream};
use crate::schedule::{LossWeighting, SigmaSampler, DEFAULT_SIGMA_DATA};
use crate::transport::{make_pair_pool, CostKind, PairingMode, PoolSpec, PoolStreams};

/// Checkpoint format version written by this build.
pub const CHECKPOINT_VERSION: u64 = 1;

/// Per-pool perturbation of the data points.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Adds `N(0, ε²)` to every coordinate.
    Jitter(f64),
}

/// Applies `mode` to `points`; `None` and zero jitter return the input untouched.
pub fn augment(points: Array2<f64>, mode: Augmentation, rng: &mut Rng) -> Array2<f64> {
    match mode {
        Augmentation::None => points,
        Augmentation::Jitter(0.0) => points,
        Augmentation::Jitter(eps) => {
            let normal = Normal::new(0.0, eps).expect("validated jitter");
            points.mapv_into(|v| v + normal.sample(rng))
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything needed to reproduce a training run.
///
/// `model.input_dim`, `model.class_count` and `model.sigma_data` are filled
/// in from the dataset and this config when training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: DenoiserConfig,
    pub pairs: usize,
    pub batch: usize,
    pub mode: PairingMode,
    pub conditional: bool,
    pub sigma: SigmaSampler,
    pub sigma_data: f64,
    pub optimizer: AdamConfig,
    pub ema_decay: f64,
    pub refreshes: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub cost: CostKind,
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: DenoiserConfig::default(),
            pairs: 512,
            batch: 32,
            mode: PairingMode::Aot,
            conditional: false,
            sigma: SigmaSampler::default(),
            sigma_data: DEFAULT_SIGMA_DATA,
            optimizer: AdamConfig::default(),
            ema_decay: 0.999,
            refreshes: 2000,
            seed: 0,
            augmentation: Augmentation::None,
            cost: CostKind::Euclidean,
            weighting: LossWeighting::Edm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::validation("pairs", "must be positive"));
        }
        if self.batch == 0 || self.batch > self.pairs {
            return Err(Error::validation("batch", format!("must be in 1..={}", self.pairs)));
        }
        if !self.pairs.is_multiple_of(self.batch) {
            return Err(Error::validation(
                "batch",
                format!("pairs ({}) must be divisible by batch ({})", self.pairs, self.batch),
            ));
        }
        if self.refreshes == 0 {
            return Err(Error::validation("refreshes", "must be positive"));
        }
        SigmaSampler::new(self.sigma.p_mean, self.sigma.p_std)?;
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(Error::validation("sigma-data", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::validation("lr", format!("must be positive, got {}", o.lr)));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::validation("betas", "must lie in [0, 1)"));
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            return Err(Error::validation("adam-eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::validation(
                "ema-decay",
                format!("must lie in [0, 1), got {}", self.ema_decay),
            ));
        }
        if let Augmentation::Jitter(e) = self.augmentation {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::validation("jitter", "must be non-negative"));
            }
        }
        self.model.validate()
    }

    fn resolved_model(&self, dataset: &Dataset) -> DenoiserConfig {
        DenoiserConfig {
            input_dim: dataset.dim(),
            class_count: if self.conditional { dataset.class_count } else { 0 },
            sigma_data: self.sigma_data,
            ..self.model.clone()
        }
    }

    fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            pairs: self.pairs,
            batch: self.batch,
            mode: self.mode,
            conditional: self.conditional,
            cost: self.cost,
            augmentation: self.augmentation,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Exponential moving average of a parameter vector.
///
/// The effective decay is `min(decay, (1 + t) / (10 + t))` after `t`
/// updates, so short runs are not dominated by the initial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    decay: f64,
    updates: u64,
    params: Vec<f64>,
}

impl Ema {
    pub fn new(decay: f64, init: &[f64]) -> Self {
        Ema {
            decay,
            updates: 0,
            params: init.to_vec(),
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let t = self.updates as f64;
        let d = self.decay.min((1.0 + t) / (10.0 + t));
        for (e, p) in self.params.iter_mut().zip(params) {
            *e = d * *e + (1.0 - d) * p;
        }
        self.updates += 1;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }
}

/// Summary of one pool refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub refresh: usize,
    /// Mean minibatch loss over the pool.
    pub mean_loss: f64,
    /// Mean per-pair pairing cost of the pool.
    pub mean_cost: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<RefreshRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    /// Mean loss over the first and last `fraction` of refreshes.
    pub fn loss_trend(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.records.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        if n == 0 {
            return None;
        }
        let mean = |r: &[RefreshRecord]| r.iter().map(|x| x.mean_loss).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..k]), mean(&self.records[n - k..])))
    }

    /// CSV with columns `refresh,mean_loss,mean_cost` (wall time is omitted so
    /// reruns are byte-identical).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("refresh,mean_loss,mean_cost\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{}\n",
                r.refresh,
                crate::data::fmt_f64(r.mean_loss),
                crate::data::fmt_f64(r.mean_cost)
            ));
        }
        s
    }
}

/// A training run in progress. [`train`] drives it to completion; tests and
/// the CLI may step it one refresh at a time.
#[derive(Debug)]
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    model: DenoiserModel,
    adam: Adam,
    ema: Ema,
    streams: PoolStreams,
    sigma_rng: Rng,
    refresh: usize,
}

impl<'a> Trainer<'a> {
    /// Validates everything before any work is done.
    pub fn new(config: &TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if config.conditional && dataset.labels.is_none() {
            return Err(Error::validation("conditional", "dataset has no labels"));
        }
        let model_cfg = config.resolved_model(dataset);
        let model = DenoiserModel::new(model_cfg, &mut rng::substream(config.seed, Stream::Init))?;
        let adam = Adam::new(config.optimizer, model.param_count());
        let ema = Ema::new(config.ema_decay, model.params());
        Ok(Trainer {
            config: config.clone(),
            dataset,
            model,
            adam,
            ema,
            streams: PoolStreams::from_seed(config.seed),
            sigma_rng: rng::substream(config.seed, Stream::Sigma),
            refresh: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn refreshes_done(&self) -> usize {
        self.refresh
    }

    /// Raw (non-averaged) model.
    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn ema_model(&self) -> DenoiserModel {
        DenoiserModel::from_params(self.model.config().clone(), self.ema.params().to_vec()).expect("ema matches layout")
    }

    /// Builds one pool and consumes it.
    pub fn refresh(&mut self) -> Result<RefreshRecord> {
        let start = Instant::now();
        let mut pool = make_pair_pool(self.dataset, &mut self.streams, &self.config.pool_spec())?;
        let mean_cost = pool.paired().mean_cost();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        while let Some(mb) = pool.next_minibatch() {
            let sigmas: Vec<f64> = (0..mb.points.nrows())
                .map(|_| self.config.sigma.sample(&mut self.sigma_rng))
                .collect();
            let g = self
                .model
                .loss_and_grad(mb.points, mb.noises, &sigmas, mb.labels, self.config.weighting)?;
            self.adam.step(self.model.params_mut(), &g.grads);
            self.ema.update(self.model.params());
            loss_sum += g.loss;
            batches += 1;
        }
        let record = RefreshRecord {
            refresh: self.refresh,
            mean_loss: loss_sum / batches as f64,
            mean_cost,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.refresh += 1;
        Ok(record)
    }

    /// Checkpoint of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Denoiser(self.model.config().clone()),
            params: self.model.params().to_vec(),
            ema_params: self.ema.params().to_vec(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            rng: RngState {
                seed: self.config.seed,
                refreshes: self.refresh as u64,
                streams: vec![
                    "data".into(),
                    "noise".into(),
                    "sigma".into(),
                    "augment".into(),
                    "init".into(),
                ],
            },
            normalization: (!self.dataset.normalization.is_identity()).then(|| self.dataset.normalization.clone()),
        }
    }
}

/// Runs `config.refreshes` refreshes and returns the EMA model with its log.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(DenoiserModel, TrainLog)> {
    train_with(config, dataset, |_, _| Ok(()))
}

/// [`train`] with a callback after every refresh.
pub fn train_with<F>(config: &TrainConfig, dataset: &Dataset, mut observe: F) -> Result<(DenoiserModel, TrainLog)>
where
    F: FnMut(&Trainer<'_>, &RefreshRecord) -> Result<()>,
{
    let mut trainer = Trainer::new(config, dataset)?;
    let mut log = TrainLog::default();
    for _ in 0..config.refreshes {
        let record = trainer.refresh()?;
        log::debug!(
            "refresh {} loss {:.5} cost {:.4}",
            record.refresh,
            record.mean_loss,
            record.mean_cost
        );
        observe(&trainer, &record)?;
        log.records.push(record);
    }
    Ok((trainer.ema_model(), log))
}

/// Network described by a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Denoiser(DenoiserConfig),
    Discriminator(DiscriminatorConfig),
}

/// Where the run's randomness came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub refreshes: u64,
    pub streams: Vec<String>,
}

/// Self-describing, versioned parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u64,
    pub model: ModelSpec,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    pub config: serde_json::Value,
    pub rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads and version-checks a checkpoint.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| corrupt("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        if ck.params.len() != ck.ema_params.len() {
            return Err(corrupt("params and ema_params differ in length".into()));
        }
        Ok(ck)
    }

    /// The EMA denoiser (or the raw one with `raw`).
    pub fn denoiser(&self, raw: bool) -> Result<DenoiserModel> {
        match &self.model {
            ModelSpec::Denoiser(cfg) => {
                DenoiserModel::from_params(cfg.clone(), if raw { &self.params } else { &self.ema_params }.clone())
            }
            ModelSpec::Discriminator(_) => {
                Err(Error::validation("checkpoint", "holds a discriminator, not a denoiser"))
            }
        }
    }
}

/// Writes the EMA model as a checkpoint with no training context.
pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        model: ModelSpec::Denoiser(model.config().clone()),
        params: model.params().to_vec(),
        ema_params: model.params().to_vec(),
        config: serde_json::Value::Null,
        rng: RngState {
            seed: 0,
            refreshes: 0,
            streams: Vec::new(),
        },
        normalization: None,
    }
    .save(path)
}

/// Loads the EMA denoiser from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    Checkpoint::load(path)?.denoiser(false)
}
