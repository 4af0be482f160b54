//! Noise levels: the ρ-warped sampling grid, the training σ distribution and
//! the per-σ loss weight.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SIGMA_MIN: f64 = 0.002;
pub const DEFAULT_SIGMA_MAX: f64 = 80.0;
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_P_MEAN: f64 = -1.2;
pub const DEFAULT_P_STD: f64 = 1.2;

/// Decreasing σ grid `t_0 = σ_max, ..., t_{n−1} = σ_min` followed by `t_n = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub n: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// `n + 1` entries; the last is exactly zero.
    pub timesteps: Vec<f64>,
}

impl NoiseSchedule {
    /// The `n` positive levels (terminal zero excluded).
    pub fn levels(&self) -> &[f64] {
        &self.timesteps[..self.n]
    }

    /// Consecutive `(t_i, t_{i+1})` intervals, terminal one included.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timesteps.windows(2).map(|w| (w[0], w[1]))
    }

    /// Checks the structural invariants; used by samplers on caller-built schedules.
    pub fn validate(&self) -> Result<()> {
        let t = &self.timesteps;
        if t.len() != self.n + 1 || self.n < 2 {
            return Err(Error::validation(
                "schedule",
                "expected n >= 2 levels plus a terminal zero",
            ));
        }
        if *t.last().unwrap() != 0.0 {
            return Err(Error::validation("schedule", "schedule must end with a terminal zero"));
        }
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::validation(
                "schedule",
                "timesteps must be finite and strictly decreasing",
            ));
        }
        Ok(())
    }
}

/// ρ-warped grid: `t_i = (σ_max^{1/ρ} + i/(n−1) · (σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`
/// for `i < n`, then `t_n = 0`.
pub fn timesteps(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<NoiseSchedule> {
    if n < 2 {
        return Err(Error::validation("steps", format!("need at least 2 steps, got {n}")));
    }
    if !(sigma_min.is_finite() && sigma_min > 0.0) {
        return Err(Error::validation(
            "sigma-min",
            format!("must be positive, got {sigma_min}"),
        ));
    }
    if !(sigma_max.is_finite() && sigma_max > sigma_min) {
        return Err(Error::validation(
            "sigma-max",
            format!("must exceed sigma-min ({sigma_min}), got {sigma_max}"),
        ));
    }
    if !(rho.is_finite() && rho >= 1.0) {
        return Err(Error::validation("rho", format!("must be >= 1, got {rho}")));
    }
    let hi = sigma_max.powf(1.0 / rho);
    let lo = sigma_min.powf(1.0 / rho);
    let mut t: Vec<f64> = (0..n)
        .map(|i| (hi + (i as f64 / (n - 1) as f64) * (lo - hi)).powf(rho))
        .collect();
    t.push(0.0);
    let schedule = NoiseSchedule {
        n,
        sigma_min,
        sigma_max,
        rho,
        timesteps: t,
    };
    // Very large ρ with tiny n can collapse neighbours in floating point.
    schedule.validate()?;
    Ok(schedule)
}

/// Log-normal training σ distribution: `σ = exp(g)`, `g ~ N(p_mean, p_std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSampler {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for SigmaSampler {
    fn default() -> Self {
        SigmaSampler {
            p_mean: DEFAULT_P_MEAN,
            p_std: DEFAULT_P_STD,
        }
    }
}

impl SigmaSampler {
    pub fn new(p_mean: f64, p_std: f64) -> Result<Self> {
        if !p_mean.is_finite() {
            return Err(Error::validation("p-mean", "must be finite"));
        }
        if !(p_std.is_finite() && p_std >= 0.0) {
            return Err(Error::validation("p-std", format!("must be non-negative, got {p_std}")));
        }
        Ok(SigmaSampler { p_mean, p_std })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        sample_sigma(self, rng)
    }
}

/// One draw from the log-normal σ distribution. Always strictly positive.
pub fn sample_sigma(sampler: &SigmaSampler, rng: &mut Rng) -> f64 {
    let g = Normal::new(sampler.p_mean, sampler.p_std)
        .expect("validated std")
        .sample(rng);
    g.exp().max(f64::MIN_POSITIVE)
}

/// Loss weight λ(σ) = (σ² + σ_data²) / (σ·σ_data)².
pub fn loss_weight(sigma: f64, sigma_data: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::validation("sigma", format!("must be positive, got {sigma}")));
    }
    if !(sigma_data.is_finite() && sigma_data > 0.0) {
        return Err(Error::validation(
            "sigma-data",
            format!("must be positive, got {sigma_data}"),
        ));
    }
    Ok((sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2))
}

/// Per-σ weight applied to the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// [`loss_weight`]; balances the effective target magnitude across σ.
    #[default]
    Edm,
    /// λ ≡ 1.
    Unit,
}

impl LossWeighting {
    pub fn eval(self, sigma: f64, sigma_data: f64) -> Result<f64> {
        match self {
            LossWeighting::Edm => loss_weight(sigma, sigma_data),
            LossWeighting::Unit => Ok(1.0),
        }
    }
}
