//! Discriminator guidance: a real-vs-generated classifier on noisy inputs
//! whose logit gradient nudges the denoiser toward the data distribution.
//!
//! With `d = sigmoid(logit)`, `log(d / (1 − d))` is the logit itself, so the
//! guided denoiser is `D′(x; σ) = D(x; σ) + w·σ²·∇ₓ logit(x, σ)`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig, GradientBundle, Mlp, Precond};
use crate::rng::{self, Rng, Stream};
use crate::sampler::{heun_sample, Trajectory};
use crate::schedule::{NoiseSchedule, SigmaSampler, DEFAULT_SIGMA_DATA};
use crate::training::{Adam, AdamConfig, Augmentation, Checkpoint, ModelSpec, RngState, CHECKPOINT_VERSION};
use crate::transport::{make_pair_pool, CostKind, PairingMode, PoolSpec, PoolStreams};

/// Architecture of [`Discriminator`]. Inputs are encoded like the denoiser's:
/// `[c_in(σ)·x, sinusoidal(c_noise(σ)), one_hot(label)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub frequencies: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub sigma_data: f64,
    pub class_count: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_dim: 2,
            hidden: vec![64, 64],
            frequencies: 16,
            min_frequency: 0.25,
            max_frequency: 16.0,
            sigma_data: DEFAULT_SIGMA_DATA,
            class_count: 0,
        }
    }
}

impl DiscriminatorConfig {
    fn encoding(&self) -> DenoiserConfig {
        DenoiserConfig {
            input_dim: self.input_dim,
            hidden: self.hidden.clone(),
            frequencies: self.frequencies,
            min_frequency: self.min_frequency,
            max_frequency: self.max_frequency,
            sigma_data: self.sigma_data,
            class_count: self.class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding().validate()
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.encoding().feature_width()];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Something with a differentiable logit over noisy inputs.
pub trait Critic {
    fn dim(&self) -> usize;
    fn logit(&self, x: &[f64], sigma: f64, label: Option<usize>) -> Result<f64>;
    /// `∇ₓ logit(x, σ)`.
    fn logit_grad(&self, x: &[f64], sigma: f64, label: Option<usize>) -> Result<Vec<f64>>;
}

/// MLP classifier: logit > 0 means "real".
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    mlp: Mlp,
    params: Vec<f64>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&config.widths());
        let params = mlp.init_params(rng, false);
        Ok(Discriminator { config, mlp, params })
    }

    pub fn from_params(config: DiscriminatorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&config.widths());
        if params.len() != mlp.param_count() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation(
                "params",
                format!("expected {} finite parameters, got {}", mlp.param_count(), params.len()),
            ));
        }
        Ok(Discriminator { config, mlp, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn features(
        &self,
        x: ArrayView2<'_, f64>,
        sigmas: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        if sigmas.len() != x.nrows() || sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::validation("sigma", "one positive sigma per row required"));
        }
        if let Some(l) = labels {
            if l.len() != x.nrows() {
                return Err(Error::validation("labels", "one label per row required"));
            }
        }
        let pre: Vec<Precond> = sigmas
            .iter()
            .map(|&s| Precond::new(s, self.config.sigma_data))
            .collect();
        let scales: Vec<f64> = pre.iter().map(|p| p.c_in).collect();
        let noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let feats = self.config.encoding().features(x, &scales, &noise, labels)?;
        Ok((feats, scales))
    }

    /// One logit per row.
    pub fn logits(&self, x: ArrayView2<'_, f64>, sigmas: &[f64], labels: Option<&[usize]>) -> Result<Vec<f64>> {
        let (feats, _) = self.features(x, sigmas, labels)?;
        Ok(self.mlp.predict(&self.params, feats.view()).column(0).to_vec())
    }

    /// Mean binary cross-entropy against `targets` (1 = real) and its
    /// parameter gradient.
    pub fn bce_loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        sigmas: &[f64],
        labels: Option<&[usize]>,
        targets: &[f64],
    ) -> Result<GradientBundle> {
        if targets.len() != x.nrows() {
            return Err(Error::validation("targets", "one target per row required"));
        }
        let (feats, _) = self.features(x, sigmas, labels)?;
        let (z, cache) = self.mlp.forward(&self.params, feats.view());
        let n = x.nrows() as f64;
        let mut loss = 0.0;
        let mut grad_z = Array2::zeros(z.dim());
        for (r, &t) in targets.iter().enumerate() {
            let zv = z[[r, 0]];
            // softplus(z) − t·z, written to stay finite for large |z|
            loss += zv.max(0.0) + (-zv.abs()).exp().ln_1p() - t * zv;
            grad_z[[r, 0]] = (sigmoid(zv) - t) / n;
        }
        let mut grads = vec![0.0; self.params.len()];
        self.mlp.backward(&self.params, &cache, grad_z.view(), &mut grads);
        let loss = loss / n;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite discriminator loss".into()));
        }
        Ok(GradientBundle { loss, grads })
    }

    /// Fraction of rows classified correctly (logit > 0 means real).
    pub fn accuracy(
        &self,
        x: ArrayView2<'_, f64>,
        sigmas: &[f64],
        labels: Option<&[usize]>,
        targets: &[f64],
    ) -> Result<f64> {
        let z = self.logits(x, sigmas, labels)?;
        let hits = z
            .iter()
            .zip(targets)
            .filter(|(z, t)| (**z > 0.0) == (**t > 0.5))
            .count();
        Ok(hits as f64 / targets.len() as f64)
    }

    pub fn to_checkpoint(&self, config: serde_json::Value, seed: u64, refreshes: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: ModelSpec::Discriminator(self.config.clone()),
            params: self.params.clone(),
            ema_params: self.params.clone(),
            config,
            rng: RngState {
                seed,
                refreshes,
                streams: vec!["data".into(), "noise".into(), "sigma".into(), "init".into()],
            },
            normalization: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match &ck.model {
            ModelSpec::Discriminator(cfg) => Discriminator::from_params(cfg.clone(), ck.params.clone()),
            ModelSpec::Denoiser(_) => Err(Error::validation("checkpoint", "holds a denoiser, not a discriminator")),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Critic for Discriminator {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn logit(&self, x: &[f64], sigma: f64, label: Option<usize>) -> Result<f64> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::validation("x", e.to_string()))?;
        let labels = label.map(|l| [l]);
        Ok(self.logits(view, &[sigma], labels.as_ref().map(|l| &l[..]))?[0])
    }

    fn logit_grad(&self, x: &[f64], sigma: f64, label: Option<usize>) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::validation("x", e.to_string()))?;
        let labels = label.map(|l| [l]);
        let (feats, scales) = self.features(view, &[sigma], labels.as_ref().map(|l| &l[..]))?;
        let (_, cache) = self.mlp.forward(&self.params, feats.view());
        let mut scratch = vec![0.0; self.params.len()];
        let g = self
            .mlp
            .backward(&self.params, &cache, Array2::ones((1, 1)).view(), &mut scratch);
        Ok((0..x.len()).map(|j| scales[0] * g[[0, j]]).collect())
    }
}

/// A critic with a fixed logit; its gradient is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCritic {
    pub dim: usize,
    pub value: f64,
}

impl Critic for ConstantCritic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logit(&self, _x: &[f64], _sigma: f64, _label: Option<usize>) -> Result<f64> {
        Ok(self.value)
    }

    fn logit_grad(&self, x: &[f64], _sigma: f64, _label: Option<usize>) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// Hand-built critic with logit `−‖x‖²/2` and gradient `−x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCritic {
    pub dim: usize,
}

impl Critic for QuadraticCritic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logit(&self, x: &[f64], _sigma: f64, _label: Option<usize>) -> Result<f64> {
        Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn logit_grad(&self, x: &[f64], _sigma: f64, _label: Option<usize>) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| -v).collect())
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::validation(
            "weight",
            format!("must be finite and non-negative, got {w}"),
        ));
    }
    Ok(())
}

/// `D(x; σ) + w·σ²·∇ₓ logit(x, σ)`. With `w = 0` the critic is not consulted.
pub fn guided_denoise<D, C>(
    model: &D,
    critic: &C,
    x: &[f64],
    sigma: f64,
    w: f64,
    label: Option<usize>,
) -> Result<Vec<f64>>
where
    D: Denoiser + ?Sized,
    C: Critic + ?Sized,
{
    check_weight(w)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::validation("sigma", format!("must be positive, got {sigma}")));
    }
    let mut d = model.denoise(x, sigma)?;
    if w == 0.0 {
        return Ok(d);
    }
    let g = critic.logit_grad(x, sigma, label)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite discriminator gradient at sigma {sigma}"
        )));
    }
    let k = w * sigma * sigma;
    for (v, gv) in d.iter_mut().zip(&g) {
        *v += k * gv;
    }
    Ok(d)
}

/// A denoiser wrapped with guidance; counts critic gradient evaluations.
pub struct GuidedDenoiser<'a, D: ?Sized, C: ?Sized> {
    pub model: &'a D,
    pub critic: &'a C,
    pub weight: f64,
    pub label: Option<usize>,
    critic_evals: AtomicUsize,
}

impl<'a, D: Denoiser + ?Sized, C: Critic + ?Sized> GuidedDenoiser<'a, D, C> {
    pub fn new(model: &'a D, critic: &'a C, weight: f64, label: Option<usize>) -> Result<Self> {
        check_weight(weight)?;
        if model.dim() != critic.dim() {
            return Err(Error::validation(
                "discriminator",
                format!(
                    "dimension {} does not match model dimension {}",
                    critic.dim(),
                    model.dim()
                ),
            ));
        }
        Ok(GuidedDenoiser {
            model,
            critic,
            weight,
            label,
            critic_evals: AtomicUsize::new(0),
        })
    }

    pub fn critic_evals(&self) -> usize {
        self.critic_evals.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser + ?Sized, C: Critic + ?Sized> Denoiser for GuidedDenoiser<'_, D, C> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if self.weight != 0.0 {
            self.critic_evals.fetch_add(1, Ordering::Relaxed);
        }
        guided_denoise(self.model, self.critic, x, sigma, self.weight, self.label)
    }
}

/// A guided Heun run. `trajectory.nfe` counts base-model evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedRun {
    pub trajectory: Trajectory,
    pub critic_evals: usize,
}

/// Heun sampling with the guided denoiser.
pub fn guided_sample<D, C>(
    model: &D,
    critic: &C,
    schedule: &NoiseSchedule,
    x_init: &[f64],
    w: f64,
    label: Option<usize>,
) -> Result<GuidedRun>
where
    D: Denoiser + ?Sized,
    C: Critic + ?Sized,
{
    let guided = GuidedDenoiser::new(model, critic, w, label)?;
    let trajectory = heun_sample(&guided, schedule, x_init)?;
    Ok(GuidedRun {
        trajectory,
        critic_evals: guided.critic_evals(),
    })
}

/// Discriminator training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscTrainConfig {
    pub model: DiscriminatorConfig,
    pub pairs: usize,
    pub batch: usize,
    pub refreshes: usize,
    pub use_aot: bool,
    pub conditional: bool,
    pub sigma: SigmaSampler,
    pub optimizer: AdamConfig,
    pub cost: CostKind,
    pub seed: u64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            model: DiscriminatorConfig::default(),
            pairs: 256,
            batch: 32,
            refreshes: 100,
            use_aot: true,
            conditional: false,
            sigma: SigmaSampler::default(),
            optimizer: AdamConfig::default(),
            cost: CostKind::Euclidean,
            seed: 0,
        }
    }
}

/// Per-refresh mean BCE.
pub type DiscTrainLog = Vec<f64>;

/// Lane used for the generated-data pool streams.
const GENERATED_LANE: u32 = 1;

/// Trains a real (target 1) vs generated (target 0) classifier on noisy
/// inputs `y + σε`. Each refresh draws one pool from each set; with
/// `use_aot` the noises of each pool are assignment-paired to its points
/// (class-wise when `conditional`). Real and generated rows get separate σ draws.
pub fn train_discriminator(
    real: &Dataset,
    generated: &Dataset,
    config: &DiscTrainConfig,
) -> Result<(Discriminator, DiscTrainLog)> {
    if real.dim() != generated.dim() {
        return Err(Error::validation(
            "generated",
            format!(
                "dimension {} does not match real dimension {}",
                generated.dim(),
                real.dim()
            ),
        ));
    }
    if config.pairs == 0 || config.batch == 0 || !config.pairs.is_multiple_of(config.batch) {
        return Err(Error::validation("batch", "pairs must be a positive multiple of batch"));
    }
    if config.refreshes == 0 {
        return Err(Error::validation("refreshes", "must be positive"));
    }
    SigmaSampler::new(config.sigma.p_mean, config.sigma.p_std)?;
    if config.conditional && (real.labels.is_none() || generated.labels.is_none()) {
        return Err(Error::validation("conditional", "both datasets need labels"));
    }
    let model_cfg = DiscriminatorConfig {
        input_dim: real.dim(),
        class_count: if config.conditional {
            real.class_count.max(generated.class_count)
        } else {
            0
        },
        ..config.model.clone()
    };
    let mut disc = Discriminator::new(model_cfg, &mut rng::substream(config.seed, Stream::Init))?;
    let mut adam = Adam::new(config.optimizer, disc.params.len());
    let spec = PoolSpec {
        pairs: config.pairs,
        batch: config.batch,
        mode: if config.use_aot {
            PairingMode::Aot
        } else {
            PairingMode::Independent
        },
        conditional: config.conditional,
        cost: config.cost,
        augmentation: Augmentation::None,
    };
    let mut real_streams = PoolStreams::from_seed(config.seed);
    let mut gen_streams = PoolStreams::from_seed_lane(config.seed, GENERATED_LANE);
    let mut sigma_rng = rng::substream(config.seed, Stream::Sigma);
    let d = real.dim();
    let mut log = Vec::with_capacity(config.refreshes);
    for _ in 0..config.refreshes {
        let mut real_pool = make_pair_pool(real, &mut real_streams, &spec)?;
        let mut gen_pool = make_pair_pool(generated, &mut gen_streams, &spec)?;
        let mut total = 0.0;
        let mut batches = 0;
        while let (Some(r), Some(g)) = (real_pool.next_minibatch(), gen_pool.next_minibatch()) {
            let b = r.points.nrows();
            let mut x = Array2::zeros((2 * b, d));
            let mut sigmas = Vec::with_capacity(2 * b);
            let mut targets = Vec::with_capacity(2 * b);
            let mut labels = Vec::with_capacity(2 * b);
            for (half, mb) in [(1.0, &r), (0.0, &g)] {
                for i in 0..b {
                    let s = config.sigma.sample(&mut sigma_rng);
                    let row = sigmas.len();
                    for j in 0..d {
                        x[[row, j]] = mb.points[[i, j]] + s * mb.noises[[i, j]];
                    }
                    sigmas.push(s);
                    targets.push(half);
                    if let Some(l) = mb.labels {
                        labels.push(l[i]);
                    }
                }
            }
            let labels = config.conditional.then_some(&labels[..]);
            let gb = disc.bce_loss_and_grad(x.view(), &sigmas, labels, &targets)?;
            adam.step(&mut disc.params, &gb.grads);
            total += gb.loss;
            batches += 1;
        }
        log.push(total / batches as f64);
    }
    Ok((disc, log))
}
