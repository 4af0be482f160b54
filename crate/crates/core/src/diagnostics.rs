//! Trajectory curvature, truncation error and generation metrics.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::sampler::{heun_sample, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::transport::empirical_w2;

/// Per-node breakdown for [`CurvatureReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurvature {
    /// Index of the first record of the pair.
    pub step: usize,
    pub sigma: f64,
    /// `1 − cos(d_step, d_{step+1})`; `None` if either tangent is zero.
    pub turn: Option<f64>,
    /// `‖x̂0_{step+1} − x̂0_step‖`.
    pub x0_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// Mean of `1 − cos` between successive tangents, in `[0, 2]`.
    pub tangent_curvature: f64,
    /// Total variation of the denoised estimates along the run.
    pub x0_drift: f64,
    /// Tangent pairs skipped because a tangent had zero norm.
    pub degenerate: usize,
    pub per_step: Vec<StepCurvature>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Curvature metrics of a recorded trajectory.
///
/// Tangents are compared only between nodes with σ > 0; the terminal node
/// carries no evaluated tangent.
pub fn curvature(traj: &Trajectory) -> Result<CurvatureReport> {
    if traj.records.len() < 3 {
        return Err(Error::validation(
            "trajectory",
            format!("need at least 3 records, got {}", traj.records.len()),
        ));
    }
    let mut per_step = Vec::with_capacity(traj.records.len() - 1);
    let mut turns = Vec::new();
    let mut degenerate = 0;
    let mut drift = 0.0;
    for (i, w) in traj.records.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        let dx0: Vec<f64> = b.x0_hat.iter().zip(&a.x0_hat).map(|(p, q)| p - q).collect();
        let x0_change = norm(&dx0);
        drift += x0_change;
        let turn = if a.sigma > 0.0 && b.sigma > 0.0 {
            let (na, nb) = (norm(&a.tangent), norm(&b.tangent));
            if na == 0.0 || nb == 0.0 {
                degenerate += 1;
                None
            } else {
                let dot: f64 = a.tangent.iter().zip(&b.tangent).map(|(p, q)| p * q).sum();
                let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
                let t = 1.0 - cos;
                turns.push(t);
                Some(t)
            }
        } else {
            None
        };
        per_step.push(StepCurvature {
            step: i,
            sigma: a.sigma,
            turn,
            x0_change,
        });
    }
    let tangent_curvature = if turns.is_empty() {
        0.0
    } else {
        turns.iter().sum::<f64>() / turns.len() as f64
    };
    Ok(CurvatureReport {
        tangent_curvature,
        x0_drift: drift,
        degenerate,
        per_step,
    })
}

/// `‖heun(coarse) − heun(fine)‖` from the same start.
pub fn truncation_error<D: Denoiser + ?Sized>(
    denoiser: &D,
    coarse: &NoiseSchedule,
    fine: &NoiseSchedule,
    x_init: &[f64],
) -> Result<f64> {
    if coarse.sigma_min != fine.sigma_min || coarse.sigma_max != fine.sigma_max {
        return Err(Error::validation(
            "fine",
            "coarse and fine schedules must share sigma bounds",
        ));
    }
    let same = coarse.timesteps == fine.timesteps;
    if !same && fine.n < 4 * coarse.n {
        return Err(Error::validation(
            "fine",
            format!("fine schedule needs at least {} steps, got {}", 4 * coarse.n, fine.n),
        ));
    }
    let a = heun_sample(denoiser, coarse, x_init)?;
    if same {
        return Ok(0.0);
    }
    let b = heun_sample(denoiser, fine, x_init)?;
    let diff: Vec<f64> = a.endpoint().iter().zip(b.endpoint()).map(|(p, q)| p - q).collect();
    Ok(norm(&diff))
}

/// Quality of a generated sample set against a reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub count: usize,
    pub w2: f64,
    /// For labeled references: how many samples fall nearest to each class centroid.
    pub mode_counts: Option<Vec<usize>>,
    /// Reference label proportions matching `mode_counts`.
    pub reference_counts: Option<Vec<usize>>,
}

/// Empirical W2 plus, when reference labels are given, per-mode sample counts
/// by nearest class centroid.
pub fn eval_generation(
    samples: ArrayView2<'_, f64>,
    reference: ArrayView2<'_, f64>,
    reference_labels: Option<&[usize]>,
) -> Result<GenerationMetrics> {
    let w2 = empirical_w2(samples, reference)?;
    let (mode_counts, reference_counts) = match reference_labels {
        None => (None, None),
        Some(labels) => {
            if labels.len() != reference.nrows() {
                return Err(Error::validation("labels", "one label per reference point required"));
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let d = reference.ncols();
            let mut centroids = vec![vec![0.0; d]; classes];
            let mut ref_counts = vec![0usize; classes];
            for (row, &l) in reference.outer_iter().zip(labels) {
                ref_counts[l] += 1;
                for (c, v) in centroids[l].iter_mut().zip(row.iter()) {
                    *c += v;
                }
            }
            for (c, &n) in centroids.iter_mut().zip(&ref_counts) {
                if n > 0 {
                    c.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            let mut counts = vec![0usize; classes];
            for row in samples.outer_iter() {
                let best = (0..classes).filter(|&k| ref_counts[k] > 0).min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.total_cmp(&db)
                });
                if let Some(k) = best {
                    counts[k] += 1;
                }
            }
            (Some(counts), Some(ref_counts))
        }
    };
    Ok(GenerationMetrics {
        count: samples.nrows(),
        w2,
        mode_counts,
        reference_counts,
    })
}

/// Outcome of a paired one-sided sign test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first value is strictly smaller.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// One-sided sign test of "`first[i] < second[i]` more often than chance".
/// Ties are dropped.
pub fn paired_sign_test(first: &[f64], second: &[f64]) -> Result<SignTest> {
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::validation("pairs", "need equally many, non-zero paired values"));
    }
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (a, b) in first.iter().zip(second) {
        match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 { 1.0 } else { binomial_upper_tail(n, wins) };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    let mut coeff = 1.0f64;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            coeff = coeff * (n - i + 1) as f64 / i as f64;
        }
        if i >= k {
            total += coeff;
        }
    }
    total / 2f64.powi(n as i32)
}
