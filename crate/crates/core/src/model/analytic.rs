//! Closed-form posterior means `E[y | y + σε = x]` for simple data laws.

use ndarray::Array2;

use super::Denoiser;
use crate::error::{Error, Result};

/// Exact denoisers used as oracles for samplers and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticDenoiser {
    /// All data at `μ`; the posterior mean is `μ` at every σ.
    PointMass(Vec<f64>),
    /// Data `~ N(μ, s² I)`; the posterior mean shrinks `x` toward `μ` by `s²/(s²+σ²)`.
    IsotropicGaussian { mean: Vec<f64>, std: f64 },
    /// Uniform mixture of Dirac masses at the rows of `points`.
    Empirical(Array2<f64>),
}

impl AnalyticDenoiser {
    pub fn empirical(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::validation(
                "points",
                "empirical denoiser needs at least one point",
            ));
        }
        Ok(AnalyticDenoiser::Empirical(points))
    }

    /// Normalized posterior weights of the empirical variant, via log-sum-exp.
    pub fn empirical_weights(points: &Array2<f64>, x: &[f64], sigma: f64) -> Vec<f64> {
        let logits: Vec<f64> = points
            .outer_iter()
            .map(|p| {
                let sq: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                -sq / (2.0 * sigma * sigma)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Free-function form of [`Denoiser::denoise`] for the analytic oracles.
pub fn analytic_denoise(oracle: &AnalyticDenoiser, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    oracle.denoise(x, sigma)
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        match self {
            AnalyticDenoiser::PointMass(mu) => mu.len(),
            AnalyticDenoiser::IsotropicGaussian { mean, .. } => mean.len(),
            AnalyticDenoiser::Empirical(p) => p.ncols(),
        }
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::validation("sigma", format!("must be positive, got {sigma}")));
        }
        if x.len() != self.dim() {
            return Err(Error::validation(
                "x",
                format!("expected dimension {}, got {}", self.dim(), x.len()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite denoiser input".into()));
        }
        Ok(match self {
            AnalyticDenoiser::PointMass(mu) => mu.clone(),
            AnalyticDenoiser::IsotropicGaussian { mean, std } => {
                let k = std * std / (std * std + sigma * sigma);
                mean.iter().zip(x).map(|(m, xi)| m + k * (xi - m)).collect()
            }
            AnalyticDenoiser::Empirical(points) => {
                let w = AnalyticDenoiser::empirical_weights(points, x, sigma);
                let mut out = vec![0.0; points.ncols()];
                for (wi, p) in w.iter().zip(points.outer_iter()) {
                    for (o, v) in out.iter_mut().zip(p.iter()) {
                        *o += wi * v;
                    }
                }
                out
            }
        })
    }
}
