//! Deterministic probability-flow ODE samplers.
//!
//! The ODE is `dx/dσ = (x − D(x; σ)) / σ`, integrated from `σ_max` down to zero.
//! A step that lands on `σ = 0` is the full Euler jump, which is exactly
//! `D(x; σ)`; it is computed that way so no rounding sneaks in.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::schedule::NoiseSchedule;

/// One committed node of a sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub sigma: f64,
    pub x: Vec<f64>,
    /// `D(x; σ)`; equals `x` at the terminal node.
    pub x0_hat: Vec<f64>,
    /// `(x − D(x; σ)) / σ`; zero at the terminal node (no evaluation there).
    pub tangent: Vec<f64>,
}

/// Ordered nodes of a run plus the number of denoiser evaluations spent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub nfe: usize,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        &self.records.last().expect("non-empty trajectory").x
    }

    /// Nodes with σ > 0, i.e. those carrying an evaluated tangent.
    pub fn evaluated(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.records.iter().filter(|r| r.sigma > 0.0)
    }
}

/// Which integrator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Heun,
    Euler,
}

struct Counter<'a, D: Denoiser + ?Sized> {
    inner: &'a D,
    calls: usize,
}

impl<D: Denoiser + ?Sized> Counter<'_, D> {
    fn eval(&mut self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.calls += 1;
        let out = self.inner.denoise(x, sigma)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "denoiser returned non-finite output at sigma {sigma}"
            )));
        }
        Ok(out)
    }
}

fn tangent(x: &[f64], d: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| (a - b) / sigma).collect()
}

fn check_grid(sigmas: &[f64], x_init: &[f64], dim: usize) -> Result<()> {
    if sigmas.len() < 2 {
        return Err(Error::validation("schedule", "need at least two noise levels"));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) || sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::validation(
            "schedule",
            "levels must be finite, non-negative and strictly decreasing",
        ));
    }
    if x_init.len() != dim {
        return Err(Error::validation(
            "x-init",
            format!("expected dimension {dim}, got {}", x_init.len()),
        ));
    }
    Ok(())
}

/// Heun's method over an arbitrary strictly decreasing σ grid. Only the last
/// level may be zero; the interval into zero takes a single Euler step.
pub fn heun_integrate<D: Denoiser + ?Sized>(denoiser: &D, sigmas: &[f64], x_init: &[f64]) -> Result<Trajectory> {
    check_grid(sigmas, x_init, denoiser.dim())?;
    let mut f = Counter {
        inner: denoiser,
        calls: 0,
    };
    let mut records = Vec::with_capacity(sigmas.len());
    let mut x = x_init.to_vec();
    let mut d_hat = f.eval(&x, sigmas[0])?;
    for w in sigmas.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let slope = tangent(&x, &d_hat, t);
        records.push(TrajectoryRecord {
            sigma: t,
            x: x.clone(),
            x0_hat: d_hat.clone(),
            tangent: slope.clone(),
        });
        if t_next == 0.0 {
            x = d_hat;
            records.push(TrajectoryRecord {
                sigma: 0.0,
                x: x.clone(),
                x0_hat: x.clone(),
                tangent: vec![0.0; x.len()],
            });
            return Ok(Trajectory { records, nfe: f.calls });
        }
        let h = t_next - t;
        let predictor: Vec<f64> = x.iter().zip(&slope).map(|(xi, di)| xi + h * di).collect();
        let d_pred = f.eval(&predictor, t_next)?;
        let slope_next = tangent(&predictor, &d_pred, t_next);
        for ((xi, a), b) in x.iter_mut().zip(&slope).zip(&slope_next) {
            *xi += h * 0.5 * (a + b);
        }
        d_hat = f.eval(&x, t_next)?;
    }
    // Grid ended above zero; the last evaluation is the record at the final level.
    let t = *sigmas.last().unwrap();
    records.push(TrajectoryRecord {
        sigma: t,
        tangent: tangent(&x, &d_hat, t),
        x,
        x0_hat: d_hat,
    });
    Ok(Trajectory { records, nfe: f.calls })
}

/// Euler's method over an arbitrary strictly decreasing σ grid (one evaluation per interval).
pub fn euler_integrate<D: Denoiser + ?Sized>(denoiser: &D, sigmas: &[f64], x_init: &[f64]) -> Result<Trajectory> {
    check_grid(sigmas, x_init, denoiser.dim())?;
    let mut f = Counter {
        inner: denoiser,
        calls: 0,
    };
    let mut records = Vec::with_capacity(sigmas.len());
    let mut x = x_init.to_vec();
    for w in sigmas.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let d_hat = f.eval(&x, t)?;
        let slope = tangent(&x, &d_hat, t);
        records.push(TrajectoryRecord {
            sigma: t,
            x: x.clone(),
            x0_hat: d_hat.clone(),
            tangent: slope.clone(),
        });
        if t_next == 0.0 {
            x = d_hat;
        } else {
            let h = t_next - t;
            for (xi, di) in x.iter_mut().zip(&slope) {
                *xi += h * di;
            }
        }
    }
    let t = *sigmas.last().unwrap();
    if t == 0.0 {
        records.push(TrajectoryRecord {
            sigma: 0.0,
            x0_hat: x.clone(),
            tangent: vec![0.0; x.len()],
            x,
        });
    } else {
        // Final node of an open grid: record its position, evaluated for a tangent.
        let d_hat = f.eval(&x, t)?;
        records.push(TrajectoryRecord {
            sigma: t,
            tangent: tangent(&x, &d_hat, t),
            x,
            x0_hat: d_hat,
        });
    }
    Ok(Trajectory { records, nfe: f.calls })
}

/// Heun sampling on a schedule with terminal zero; spends `2n − 1` evaluations.
pub fn heun_sample<D: Denoiser + ?Sized>(denoiser: &D, schedule: &NoiseSchedule, x_init: &[f64]) -> Result<Trajectory> {
    schedule.validate()?;
    heun_integrate(denoiser, &schedule.timesteps, x_init)
}

/// Euler sampling on a schedule with terminal zero; spends `n` evaluations.
pub fn euler_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_init: &[f64],
) -> Result<Trajectory> {
    schedule.validate()?;
    euler_integrate(denoiser, &schedule.timesteps, x_init)
}

/// Full Euler jump from σ to zero, which is the denoiser output itself.
pub fn one_step_estimate<D: Denoiser + ?Sized>(denoiser: &D, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    denoiser.denoise(x, sigma)
}

/// Runs one sampler per row of `inits` in parallel; row order is preserved and
/// each row is independent, so results do not depend on the thread count.
pub fn sample_endpoints<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    inits: &Array2<f64>,
    method: Method,
) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = inits.outer_iter().map(|r| r.to_vec()).collect();
    let ends: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|x| {
            let t = match method {
                Method::Heun => heun_sample(denoiser, schedule, x)?,
                Method::Euler => euler_sample(denoiser, schedule, x)?,
            };
            Ok(t.endpoint().to_vec())
        })
        .collect::<Result<_>>()?;
    let d = inits.ncols();
    Ok(Array2::from_shape_vec((ends.len(), d), ends.concat()).expect("shape"))
}
