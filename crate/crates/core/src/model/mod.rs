//! Denoisers: the trainable preconditioned MLP and closed-form oracles.

mod analytic;
mod mlp;

pub use analytic::{analytic_denoise, AnalyticDenoiser};
pub use mlp::{ForwardCache, Mlp};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{LossWeighting, DEFAULT_SIGMA_DATA};

/// Anything that maps a noisy point at level σ to an estimate of the clean point.
pub trait Denoiser {
    fn dim(&self) -> usize;
    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x, sigma)
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        let norm = (s2 + d2).sqrt();
        Precond {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / norm,
            c_in: 1.0 / norm,
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Architecture and conditioning hyperparameters of [`DenoiserModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoid frequencies applied to `c_noise` (sin and cos each).
    pub frequencies: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    pub sigma_data: f64,
    /// Zero for unconditional models; otherwise labels are one-hot encoded.
    pub class_count: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            input_dim: 2,
            hidden: vec![128, 128, 128],
            frequencies: 16,
            min_frequency: 0.25,
            max_frequency: 16.0,
            sigma_data: DEFAULT_SIGMA_DATA,
            class_count: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::validation("input-dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden", "layer widths must be positive"));
        }
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(Error::validation("sigma-data", "must be positive"));
        }
        if self.frequencies > 0
            && !(self.min_frequency > 0.0 && self.max_frequency >= self.min_frequency && self.max_frequency.is_finite())
        {
            return Err(Error::validation(
                "frequencies",
                "need 0 < min_frequency <= max_frequency",
            ));
        }
        Ok(())
    }

    /// Width of the network input: scaled point, σ features, label one-hot.
    pub fn feature_width(&self) -> usize {
        self.input_dim + 2 * self.frequencies + self.class_count
    }

    fn widths(&self, output: usize) -> Vec<usize> {
        let mut w = vec![self.feature_width()];
        w.extend(&self.hidden);
        w.push(output);
        w
    }

    /// Geometrically spaced embedding frequencies.
    pub fn frequency_grid(&self) -> Vec<f64> {
        let k = self.frequencies;
        (0..k)
            .map(|i| {
                if k == 1 {
                    self.min_frequency
                } else {
                    let t = i as f64 / (k - 1) as f64;
                    self.min_frequency * (self.max_frequency / self.min_frequency).powf(t)
                }
            })
            .collect()
    }

    /// Writes `[scale·x, sin(ω c_noise)..., cos(ω c_noise)..., one_hot(label)]`
    /// for each row.
    pub(crate) fn features(
        &self,
        x: ArrayView2<'_, f64>,
        scales: &[f64],
        c_noise: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        let b = x.nrows();
        let d = self.input_dim;
        if x.ncols() != d {
            return Err(Error::validation(
                "x",
                format!("expected dimension {d}, got {}", x.ncols()),
            ));
        }
        let freqs = self.frequency_grid();
        let k = freqs.len();
        let mut out = Array2::zeros((b, self.feature_width()));
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            for j in 0..d {
                row[j] = scales[r] * x[[r, j]];
            }
            for (f, w) in freqs.iter().enumerate() {
                let a = w * c_noise[r];
                row[d + f] = a.sin();
                row[d + k + f] = a.cos();
            }
            if let Some(labels) = labels {
                let l = labels[r];
                if l >= self.class_count {
                    return Err(Error::validation(
                        "label",
                        format!("label {l} out of range for {} classes", self.class_count),
                    ));
                }
                row[d + 2 * k + l] = 1.0;
            }
        }
        Ok(out)
    }
}

/// Preconditioned MLP denoiser
/// `D(x; σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x, c_noise(σ), label)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    mlp: Mlp,
    params: Vec<f64>,
}

/// Loss value with gradients aligned to the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub grads: Vec<f64>,
}

impl DenoiserModel {
    /// Fresh model: fan-in Gaussian hidden weights, zeroed output layer.
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&config.widths(config.input_dim));
        let params = mlp.init_params(rng, true);
        Ok(DenoiserModel { config, mlp, params })
    }

    /// Model with every weight drawn at random (output layer included).
    pub fn new_random(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&config.widths(config.input_dim));
        let params = mlp.init_params(rng, false);
        Ok(DenoiserModel { config, mlp, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&config.widths(config.input_dim));
        if params.len() != mlp.param_count() {
            return Err(Error::validation(
                "params",
                format!("expected {} parameters, got {}", mlp.param_count(), params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("params", "non-finite parameter"));
        }
        Ok(DenoiserModel { config, mlp, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_conditional(&self) -> bool {
        self.config.class_count > 0
    }

    /// Denoises every row of `x`; `labels` is required only for conditional
    /// models (a missing label leaves the one-hot block empty).
    pub fn denoise_batch(
        &self,
        x: ArrayView2<'_, f64>,
        sigmas: &[f64],
        labels: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        check_sigmas(sigmas, x.nrows())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite denoiser input".into()));
        }
        let pre: Vec<Precond> = sigmas
            .iter()
            .map(|&s| Precond::new(s, self.config.sigma_data))
            .collect();
        let scales: Vec<f64> = pre.iter().map(|p| p.c_in).collect();
        let noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let feats = self.config.features(x, &scales, &noise, labels)?;
        let f = self.mlp.predict(&self.params, feats.view());
        let mut out = f;
        for (r, mut row) in out.outer_iter_mut().enumerate() {
            let p = pre[r];
            for (j, v) in row.iter_mut().enumerate() {
                *v = p.c_skip * x[[r, j]] + p.c_out * *v;
            }
        }
        Ok(out)
    }

    /// Same model bound to a class label.
    pub fn conditioned(&self, label: usize) -> Conditioned<'_> {
        Conditioned { model: self, label }
    }

    /// Mean weighted reconstruction loss over a minibatch,
    /// `(1/B) Σ λ(σ_i)‖D(y_i + σ_i ε_i; σ_i) − y_i‖²`, with its parameter gradient.
    pub fn loss_and_grad(
        &self,
        points: ArrayView2<'_, f64>,
        noises: ArrayView2<'_, f64>,
        sigmas: &[f64],
        labels: Option<&[usize]>,
        weighting: LossWeighting,
    ) -> Result<GradientBundle> {
        if points.dim() != noises.dim() {
            return Err(Error::validation(
                "noises",
                format!(
                    "points {:?} and noises {:?} differ in shape",
                    points.dim(),
                    noises.dim()
                ),
            ));
        }
        let b = points.nrows();
        check_sigmas(sigmas, b)?;
        if let Some(l) = labels {
            if l.len() != b {
                return Err(Error::validation(
                    "labels",
                    format!("{} labels for {b} points", l.len()),
                ));
            }
        }
        let sd = self.config.sigma_data;
        let mut noisy = points.to_owned();
        for (r, mut row) in noisy.outer_iter_mut().enumerate() {
            row.scaled_add(sigmas[r], &noises.row(r));
        }
        let pre: Vec<Precond> = sigmas.iter().map(|&s| Precond::new(s, sd)).collect();
        let scales: Vec<f64> = pre.iter().map(|p| p.c_in).collect();
        let noise: Vec<f64> = pre.iter().map(|p| p.c_noise).collect();
        let feats = self.config.features(noisy.view(), &scales, &noise, labels)?;
        let (f, cache) = self.mlp.forward(&self.params, feats.view());

        let mut loss = 0.0;
        let mut grad_f = Array2::zeros(f.dim());
        for r in 0..b {
            let p = pre[r];
            let lambda = weighting.eval(sigmas[r], sd)?;
            let mut sq = 0.0;
            for j in 0..points.ncols() {
                let resid = p.c_skip * noisy[[r, j]] + p.c_out * f[[r, j]] - points[[r, j]];
                sq += resid * resid;
                grad_f[[r, j]] = 2.0 * lambda * resid * p.c_out / b as f64;
            }
            loss += lambda * sq;
        }
        loss /= b as f64;
        let mut grads = vec![0.0; self.params.len()];
        self.mlp.backward(&self.params, &cache, grad_f.view(), &mut grads);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite loss or gradient".into()));
        }
        Ok(GradientBundle { loss, grads })
    }
}

fn check_sigmas(sigmas: &[f64], rows: usize) -> Result<()> {
    if sigmas.len() != rows {
        return Err(Error::validation(
            "sigma",
            format!("{} sigmas for {rows} rows", sigmas.len()),
        ));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::validation("sigma", format!("must be positive, got {s}")));
    }
    Ok(())
}

impl Denoiser for DenoiserModel {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::validation("x", e.to_string()))?;
        Ok(self.denoise_batch(view, &[sigma], None)?.into_raw_vec_and_offset().0)
    }
}

/// A conditional model with its label fixed.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a> {
    model: &'a DenoiserModel,
    label: usize,
}

impl Denoiser for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::validation("x", e.to_string()))?;
        Ok(self
            .model
            .denoise_batch(view, &[sigma], Some(&[self.label]))?
            .into_raw_vec_and_offset()
            .0)
    }
}
