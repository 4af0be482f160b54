//! Data–noise pairing.
//!
//! A pool of `N` data points is matched against `N` fresh standard-normal noises
//! by solving an assignment problem on their pairwise distances. The selected
//! noises are always a rearrangement of the drawn ones, so the noise marginal
//! stays exactly Gaussian.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_solve, CostMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::training::{augment, Augmentation};

/// Default cap on set size for [`empirical_w2`].
pub const DEFAULT_W2_CAP: usize = 2048;

/// Pairing cost between a data point and a noise sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// ‖y − ε‖₂
    #[default]
    Euclidean,
    /// ‖y − ε‖₂²
    SquaredEuclidean,
}

impl CostKind {
    #[inline]
    fn of_squared(self, sq: f64) -> f64 {
        match self {
            CostKind::Euclidean => sq.sqrt(),
            CostKind::SquaredEuclidean => sq,
        }
    }

    #[inline]
    fn eval<'a>(self, a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
        self.of_squared(a.into_iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
    }
}

/// How noises are matched to data points inside a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Minimum-cost assignment.
    #[default]
    Aot,
    /// Keep draw order (identity permutation).
    Independent,
}

/// Data points with an equal number of noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Array2<f64>,
    pub noises: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl SampleBatch {
    pub fn new(points: Array2<f64>, noises: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.dim() != noises.dim() {
            return Err(Error::validation(
                "batch",
                format!(
                    "points {:?} and noises {:?} differ in shape",
                    points.dim(),
                    noises.dim()
                ),
            ));
        }
        if points.nrows() == 0 {
            return Err(Error::validation("batch", "batch is empty"));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(Error::validation(
                    "labels",
                    format!("{} labels for {} points", l.len(), points.nrows()),
                ));
            }
        }
        Ok(SampleBatch { points, noises, labels })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Output of a pairing: `noises[i]` is the noise matched to `points[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub points: Array2<f64>,
    pub noises: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    /// `noises[i] == input_noises[permutation[i]]`.
    pub permutation: Vec<usize>,
    /// Σ_i cost(points[i], noises[i]) under the cost kind used.
    pub total_cost: f64,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost / self.len() as f64
    }
}

/// Pairwise cost matrix, `entry(i, j) = cost(images[i], noises[j])`.
///
/// Rows are filled in parallel; every entry is computed independently so the
/// result does not depend on the thread count.
pub fn build_cost_matrix(
    images: ArrayView2<'_, f64>,
    noises: ArrayView2<'_, f64>,
    kind: CostKind,
) -> Result<CostMatrix> {
    if images.dim() != noises.dim() {
        return Err(Error::validation(
            "noises",
            format!(
                "images {:?} and noises {:?} differ in shape",
                images.dim(),
                noises.dim()
            ),
        ));
    }
    let n = images.nrows();
    let d = images.ncols();
    let a = images.as_standard_layout();
    let b = noises.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut costs = vec![0.0; n * n];
    costs.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let ai = &a[i * d..(i + 1) * d];
        for (j, c) in row.iter_mut().enumerate() {
            *c = kind.eval(ai, &b[j * d..(j + 1) * d]);
        }
    });
    CostMatrix::new(n, costs)
}

fn identity_cost(points: ArrayView2<'_, f64>, noises: ArrayView2<'_, f64>, kind: CostKind) -> f64 {
    points
        .outer_iter()
        .zip(noises.outer_iter())
        .map(|(p, e)| kind.eval(p.iter(), e.iter()))
        .sum()
}

fn gather_rows(src: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    src.select(Axis(0), perm)
}

/// Matches every point with the noise minimizing the summed cost over the batch.
pub fn pair_unconditional(batch: &SampleBatch, kind: CostKind) -> Result<PairedBatch> {
    let cost = build_cost_matrix(batch.points.view(), batch.noises.view(), kind)?;
    let a = hungarian_solve(&cost);
    Ok(PairedBatch {
        points: batch.points.clone(),
        noises: gather_rows(&batch.noises, &a.permutation),
        labels: batch.labels.clone(),
        permutation: a.permutation,
        total_cost: a.total_cost,
    })
}

/// Class-wise pairing.
///
/// The noise draws are split into consecutive blocks whose sizes match the class
/// sizes (class 0 takes the first `n₀` noises, class 1 the next `n₁`, ...), and
/// each class is matched only against its own block. Point order and labels are
/// untouched.
pub fn pair_conditional(batch: &SampleBatch, class_count: usize, kind: CostKind) -> Result<PairedBatch> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::validation("labels", "conditional pairing needs labels"))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::validation(
            "labels",
            format!("label {bad} out of range for {class_count} classes"),
        ));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    let n = batch.len();
    let mut permutation = vec![usize::MAX; n];
    let mut total_cost = 0.0;
    let mut offset = 0;
    for idx in members.iter().filter(|m| !m.is_empty()) {
        let k = idx.len();
        let pts = batch.points.select(Axis(0), idx);
        let block = batch.noises.slice(ndarray::s![offset..offset + k, ..]);
        let cost = build_cost_matrix(pts.view(), block, kind)?;
        let a = hungarian_solve(&cost);
        for (local, &global) in idx.iter().enumerate() {
            permutation[global] = offset + a.permutation[local];
        }
        total_cost += a.total_cost;
        offset += k;
    }
    debug_assert_eq!(offset, n);
    Ok(PairedBatch {
        points: batch.points.clone(),
        noises: gather_rows(&batch.noises, &permutation),
        labels: batch.labels.clone(),
        permutation,
        total_cost,
    })
}

/// Identity pairing; the baseline for A/B comparisons.
pub fn pair_independent(batch: &SampleBatch, kind: CostKind) -> PairedBatch {
    PairedBatch {
        points: batch.points.clone(),
        noises: batch.noises.clone(),
        labels: batch.labels.clone(),
        permutation: (0..batch.len()).collect(),
        total_cost: identity_cost(batch.points.view(), batch.noises.view(), kind),
    }
}

/// Dispatches to the pairing selected by `mode` and `class_count`
/// (`Some(C)` for class-wise pairing).
pub fn pair(batch: &SampleBatch, mode: PairingMode, class_count: Option<usize>, kind: CostKind) -> Result<PairedBatch> {
    match (mode, class_count) {
        (PairingMode::Independent, _) => Ok(pair_independent(batch, kind)),
        (PairingMode::Aot, None) => pair_unconditional(batch, kind),
        (PairingMode::Aot, Some(c)) => pair_conditional(batch, c, kind),
    }
}

/// RNG streams consumed while building a pool.
#[derive(Debug, Clone)]
pub struct PoolStreams {
    pub data: Rng,
    pub noise: Rng,
    pub augment: Rng,
}

impl PoolStreams {
    pub fn from_seed(seed: u64) -> Self {
        PoolStreams {
            data: rng::substream(seed, Stream::Data),
            noise: rng::substream(seed, Stream::Noise),
            augment: rng::substream(seed, Stream::Augment),
        }
    }

    /// Streams on a separate lane, independent of [`PoolStreams::from_seed`].
    pub fn from_seed_lane(seed: u64, lane: u32) -> Self {
        PoolStreams {
            data: rng::substream_lane(seed, Stream::Data, lane),
            noise: rng::substream_lane(seed, Stream::Noise, lane),
            augment: rng::substream_lane(seed, Stream::Augment, lane),
        }
    }
}

/// Parameters for [`make_pair_pool`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSpec {
    pub pairs: usize,
    pub batch: usize,
    pub mode: PairingMode,
    pub conditional: bool,
    pub cost: CostKind,
    pub augmentation: Augmentation,
}

/// `N` paired samples consumed sequentially in minibatches of `B`.
#[derive(Debug, Clone)]
pub struct PairPool {
    paired: PairedBatch,
    batch: usize,
    cursor: usize,
}

/// One minibatch borrowed from a [`PairPool`].
#[derive(Debug, Clone, Copy)]
pub struct MiniBatch<'a> {
    pub points: ArrayView2<'a, f64>,
    pub noises: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
    /// Index of the first pair in the pool.
    pub start: usize,
}

impl PairPool {
    /// Wraps an already paired batch. `batch` must not exceed the pool size.
    pub fn new(paired: PairedBatch, batch: usize) -> Result<Self> {
        if batch == 0 || batch > paired.len() {
            return Err(Error::validation(
                "batch",
                format!("minibatch size {batch} must be in 1..={}", paired.len()),
            ));
        }
        Ok(PairPool {
            paired,
            batch,
            cursor: 0,
        })
    }

    pub fn paired(&self) -> &PairedBatch {
        &self.paired
    }

    pub fn len(&self) -> usize {
        self.paired.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paired.is_empty()
    }

    /// Number of minibatches a full pass yields (the last may be short).
    pub fn minibatch_count(&self) -> usize {
        self.len().div_ceil(self.batch)
    }

    /// Next unconsumed minibatch, or `None` once every pair has been used.
    pub fn next_minibatch(&mut self) -> Option<MiniBatch<'_>> {
        if self.cursor >= self.len() {
            return None;
        }
        let start = self.cursor;
        let end = (start + self.batch).min(self.len());
        self.cursor = end;
        Some(MiniBatch {
            points: self.paired.points.slice(ndarray::s![start..end, ..]),
            noises: self.paired.noises.slice(ndarray::s![start..end, ..]),
            labels: self.paired.labels.as_deref().map(|l| &l[start..end]),
            start,
        })
    }
}

/// Draws `N` data points and `N` fresh noises, augments the points, pairs them
/// and wraps the result as a pool of minibatches.
pub fn make_pair_pool(dataset: &Dataset, streams: &mut PoolStreams, spec: &PoolSpec) -> Result<PairPool> {
    if spec.batch == 0 || spec.batch > spec.pairs {
        return Err(Error::validation(
            "batch",
            format!("minibatch size {} must be in 1..={}", spec.batch, spec.pairs),
        ));
    }
    if spec.conditional && dataset.labels.is_none() {
        return Err(Error::validation("conditional", "dataset has no labels"));
    }
    let (points, labels) = dataset.draw(spec.pairs, spec.conditional, &mut streams.data)?;
    let d = dataset.dim();
    let noises = Array2::from_shape_vec(
        (spec.pairs, d),
        rng::standard_normal_vec(&mut streams.noise, spec.pairs * d),
    )
    .expect("shape");
    let points = augment(points, spec.augmentation, &mut streams.augment);
    let batch = SampleBatch::new(points, noises, if spec.conditional { labels } else { None })?;
    let class_count = spec.conditional.then_some(dataset.class_count);
    let paired = pair(&batch, spec.mode, class_count, spec.cost)?;
    PairPool::new(paired, spec.batch)
}

/// Empirical 2-Wasserstein distance between equal-size point sets:
/// `sqrt(min_π (1/M) Σ ‖a_i − b_π(i)‖²)`. Sets larger than
/// [`DEFAULT_W2_CAP`] are subsampled with a fixed seed.
pub fn empirical_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    empirical_w2_with(a, b, DEFAULT_W2_CAP, 0)
}

/// [`empirical_w2`] with an explicit size cap and subsampling seed.
pub fn empirical_w2_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cap: usize, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation(
            "samples",
            format!("sets have shapes {:?} and {:?}", a.dim(), b.dim()),
        ));
    }
    if a.nrows() == 0 {
        return Err(Error::validation("samples", "sets are empty"));
    }
    if cap == 0 {
        return Err(Error::validation("cap", "must be positive"));
    }
    let m = a.nrows();
    if m > cap {
        log::warn!("empirical W2: subsampling {m} points to {cap}");
        let mut rng = rng::substream(seed, Stream::Subsample);
        let ia = rand::seq::index::sample(&mut rng, m, cap).into_vec();
        let ib = rand::seq::index::sample(&mut rng, m, cap).into_vec();
        let sa = a.select(Axis(0), &ia);
        let sb = b.select(Axis(0), &ib);
        return empirical_w2_with(sa.view(), sb.view(), cap, seed);
    }
    let cost = build_cost_matrix(a, b, CostKind::SquaredEuclidean)?;
    let opt = hungarian_solve(&cost);
    Ok((opt.total_cost / m as f64).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{assignment_cost, brute_force_solve};
    use crate::rng::standard_normal_vec;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn gaussian(n: usize, d: usize, seed: u64, stream: Stream) -> Array2<f64> {
        let mut r = rng::substream(seed, stream);
        Array2::from_shape_vec((n, d), standard_normal_vec(&mut r, n * d)).unwrap()
    }

    fn sorted_rows(a: &Array2<f64>) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = a
            .outer_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn cost_matrix_examples() {
        let x = gaussian(5, 2, 1, Stream::Data);
        let c = build_cost_matrix(x.view(), x.view(), CostKind::Euclidean).unwrap();
        assert!((0..5).all(|i| c.get(i, i) == 0.0));

        let c = build_cost_matrix(
            array![[0.0, 0.0]].view(),
            array![[3.0, 4.0]].view(),
            CostKind::Euclidean,
        )
        .unwrap();
        assert_eq!(c.as_slice(), &[5.0]);
        let c = build_cost_matrix(
            array![[0.0, 0.0]].view(),
            array![[3.0, 4.0]].view(),
            CostKind::SquaredEuclidean,
        )
        .unwrap();
        assert_eq!(c.as_slice(), &[25.0]);

        let err = build_cost_matrix(array![[0.0, 0.0]].view(), array![[3.0]].view(), CostKind::Euclidean);
        assert!(err.unwrap_err().is_validation());
    }

    #[test]
    fn cost_matrix_matches_direct_recomputation() {
        let a = gaussian(16, 2, 4, Stream::Data);
        let b = gaussian(16, 2, 4, Stream::Noise);
        let c = build_cost_matrix(a.view(), b.view(), CostKind::Euclidean).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let dx = a[[i, 0]] - b[[j, 0]];
                let dy = a[[i, 1]] - b[[j, 1]];
                assert_eq!(c.get(i, j), (dx * dx + dy * dy).sqrt());
            }
        }
    }

    #[test]
    fn single_pair_keeps_noise() {
        let batch = SampleBatch::new(array![[1.0, 2.0]], array![[0.3, -0.1]], None).unwrap();
        let p = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
        assert_eq!(p.noises, batch.noises);
        assert_eq!(p.permutation, vec![0]);
    }

    #[test]
    fn obvious_pairing() {
        let batch = SampleBatch::new(array![[0.0, 0.0], [10.0, 10.0]], array![[9.0, 9.0], [1.0, 1.0]], None).unwrap();
        let p = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
        assert_eq!(p.noises, array![[1.0, 1.0], [9.0, 9.0]]);
        assert_eq!(p.permutation, vec![1, 0]);
    }

    #[test]
    fn pairing_on_64_points() {
        let batch = SampleBatch::new(
            gaussian(64, 2, 9, Stream::Data),
            gaussian(64, 2, 9, Stream::Noise),
            None,
        )
        .unwrap();
        let p = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
        assert_eq!(sorted_rows(&p.noises), sorted_rows(&batch.noises));
        let ind = pair_independent(&batch, CostKind::Euclidean);
        assert!(p.total_cost <= ind.total_cost);

        // Every 7-point block of the solution is itself optimal for its own subproblem.
        let cost = build_cost_matrix(batch.points.view(), batch.noises.view(), CostKind::Euclidean).unwrap();
        for block in p.permutation.chunks(7).enumerate() {
            let rows: Vec<usize> = (block.0 * 7..block.0 * 7 + block.1.len()).collect();
            let cols = block.1;
            let k = rows.len();
            let sub: Vec<f64> = rows
                .iter()
                .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| cost.get(i, j))
                .collect();
            let sub = CostMatrix::new(k, sub).unwrap();
            let identity: Vec<usize> = (0..k).collect();
            let here = assignment_cost(&sub, &identity).unwrap();
            let best = brute_force_solve(&sub).unwrap().total_cost;
            assert!((here - best).abs() <= 1e-12 * (1.0 + best));
        }

        // Monte-Carlo: random pairings are never better than the optimum.
        let mut r = rng::substream(9, Stream::Sampling);
        let mut perm: Vec<usize> = (0..64).collect();
        let mut mean = 0.0;
        for _ in 0..200 {
            perm.shuffle(&mut r);
            let c = assignment_cost(&cost, &perm).unwrap();
            assert!(p.total_cost <= c);
            mean += c / 200.0;
        }
        assert!(p.total_cost <= mean);
    }

    #[test]
    fn conditional_single_class_matches_unconditional() {
        let batch = SampleBatch::new(
            gaussian(20, 2, 2, Stream::Data),
            gaussian(20, 2, 2, Stream::Noise),
            Some(vec![0; 20]),
        )
        .unwrap();
        let c = pair_conditional(&batch, 3, CostKind::Euclidean).unwrap();
        let u = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
        assert_eq!(c.noises, u.noises);
        assert_eq!(c.total_cost, u.total_cost);
    }

    #[test]
    fn conditional_singleton_classes() {
        let batch = SampleBatch::new(
            array![[0.0, 0.0], [5.0, 5.0]],
            array![[5.0, 5.0], [0.0, 0.0]],
            Some(vec![1, 0]),
        )
        .unwrap();
        // Class 0 owns the first noise, class 1 the second.
        let c = pair_conditional(&batch, 2, CostKind::Euclidean).unwrap();
        assert_eq!(c.noises, array![[0.0, 0.0], [5.0, 5.0]]);
        assert_eq!(c.permutation, vec![1, 0]);
        assert_eq!(c.labels, Some(vec![1, 0]));
    }

    #[test]
    fn conditional_rejects_bad_labels() {
        let batch = SampleBatch::new(array![[0.0], [1.0]], array![[0.0], [1.0]], Some(vec![0, 3])).unwrap();
        assert!(pair_conditional(&batch, 2, CostKind::Euclidean)
            .unwrap_err()
            .is_validation());
        let unlabeled = SampleBatch::new(array![[0.0]], array![[0.0]], None).unwrap();
        assert!(pair_conditional(&unlabeled, 2, CostKind::Euclidean).is_err());
        assert!(SampleBatch::new(array![[0.0]], array![[0.0]], Some(vec![0, 1])).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = gaussian(40, 2, 5, Stream::Data);
        assert_eq!(empirical_w2(a.view(), a.view()).unwrap(), 0.0);
        let shifted = &a + &array![[1.0, 0.0]];
        let w = empirical_w2(a.view(), shifted.view()).unwrap();
        assert!((w - 1.0).abs() < 1e-12, "{w}");
        let w_sym = empirical_w2(shifted.view(), a.view()).unwrap();
        assert!((w - w_sym).abs() < 1e-12);
        assert!(empirical_w2(a.view(), gaussian(39, 2, 5, Stream::Noise).view()).is_err());
    }

    #[test]
    fn w2_matches_brute_force() {
        for seed in 0..10 {
            let a = gaussian(6, 2, seed, Stream::Data);
            let b = gaussian(6, 2, seed, Stream::Noise);
            let cost = build_cost_matrix(a.view(), b.view(), CostKind::SquaredEuclidean).unwrap();
            let expect = (brute_force_solve(&cost).unwrap().total_cost / 6.0).sqrt();
            let got = empirical_w2(a.view(), b.view()).unwrap();
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn w2_subsamples_above_cap() {
        let a = gaussian(50, 2, 1, Stream::Data);
        let b = gaussian(50, 2, 1, Stream::Noise);
        let capped = empirical_w2_with(a.view(), b.view(), 20, 3).unwrap();
        assert_eq!(capped, empirical_w2_with(a.view(), b.view(), 20, 3).unwrap());
        assert!(capped.is_finite() && capped > 0.0);
    }

    #[test]
    fn pool_bookkeeping() {
        let ds = Dataset::new(gaussian(100, 2, 0, Stream::Data), None, 1).unwrap();
        for (n, b, expect) in [(8, 8, 1), (8, 4, 2), (512, 32, 16)] {
            let spec = PoolSpec {
                pairs: n,
                batch: b,
                mode: PairingMode::Aot,
                conditional: false,
                cost: CostKind::Euclidean,
                augmentation: Augmentation::None,
            };
            let mut pool = make_pair_pool(&ds, &mut PoolStreams::from_seed(4), &spec).unwrap();
            assert_eq!(pool.minibatch_count(), expect);
            let full = pool.paired().clone();
            let mut seen = Vec::new();
            let mut count = 0;
            while let Some(mb) = pool.next_minibatch() {
                assert_eq!(mb.points.nrows(), b);
                assert_eq!(mb.points, full.points.slice(ndarray::s![mb.start..mb.start + b, ..]));
                seen.extend(mb.start..mb.start + b);
                count += 1;
            }
            assert_eq!(count, expect);
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(pool.next_minibatch().is_none());
        }
        let bad = PoolSpec {
            pairs: 4,
            batch: 8,
            mode: PairingMode::Aot,
            conditional: false,
            cost: CostKind::Euclidean,
            augmentation: Augmentation::None,
        };
        assert!(make_pair_pool(&ds, &mut PoolStreams::from_seed(4), &bad)
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn pool_modes_differ_only_by_noise_permutation() {
        let ds = Dataset::new(gaussian(300, 2, 0, Stream::Data), None, 1).unwrap();
        let mut spec = PoolSpec {
            pairs: 64,
            batch: 16,
            mode: PairingMode::Aot,
            conditional: false,
            cost: CostKind::Euclidean,
            augmentation: Augmentation::Jitter(0.01),
        };
        let aot = make_pair_pool(&ds, &mut PoolStreams::from_seed(8), &spec).unwrap();
        spec.mode = PairingMode::Independent;
        let ind = make_pair_pool(&ds, &mut PoolStreams::from_seed(8), &spec).unwrap();
        assert_eq!(aot.paired().points, ind.paired().points);
        assert_eq!(ind.paired().permutation, (0..64).collect::<Vec<_>>());
        assert_eq!(
            aot.paired().noises,
            ind.paired().noises.select(Axis(0), &aot.paired().permutation)
        );
        assert!(aot.paired().total_cost <= ind.paired().total_cost);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pairing_is_a_rearrangement_and_dominates(n in 1usize..60, d in 1usize..4, seed in any::<u64>()) {
            let batch = SampleBatch::new(gaussian(n, d, seed, Stream::Data), gaussian(n, d, seed, Stream::Noise), None).unwrap();
            let p = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
            prop_assert_eq!(sorted_rows(&p.noises), sorted_rows(&batch.noises));
            prop_assert_eq!(&p.points, &batch.points);
            let ind = pair_independent(&batch, CostKind::Euclidean);
            prop_assert!(p.mean_cost() <= ind.mean_cost() + 1e-12);
        }

        #[test]
        fn joint_scaling_scales_cost(n in 1usize..40, seed in any::<u64>(), alpha in 0.1f64..10.0) {
            let batch = SampleBatch::new(gaussian(n, 2, seed, Stream::Data), gaussian(n, 2, seed, Stream::Noise), None).unwrap();
            let base = pair_unconditional(&batch, CostKind::Euclidean).unwrap();
            let scaled = SampleBatch::new(&batch.points * alpha, &batch.noises * alpha, None).unwrap();
            let s = pair_unconditional(&scaled, CostKind::Euclidean).unwrap();
            prop_assert!((s.total_cost - alpha * base.total_cost).abs() <= 1e-10 * (1.0 + s.total_cost));
        }

        #[test]
        fn conditional_is_blockwise_bijection(n in 1usize..40, classes in 1usize..5, seed in any::<u64>()) {
            let mut r = rng::substream(seed, Stream::Labels);
            let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..classes)).collect();
            let batch = SampleBatch::new(gaussian(n, 2, seed, Stream::Data), gaussian(n, 2, seed, Stream::Noise), Some(labels.clone())).unwrap();
            let p = pair_conditional(&batch, classes, CostKind::Euclidean).unwrap();
            let mut sorted = p.permutation.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(p.labels.as_ref().unwrap(), &labels);
            prop_assert_eq!(&p.points, &batch.points);
        }
    }
}
