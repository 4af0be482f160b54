//! Toy datasets, CSV ingestion and normalization.
//!
//! CSV layout: a header row, one numeric column per dimension and an optional
//! integer column named `label`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Affine map from raw coordinates to stored ones: `stored = (raw − shift) · scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|&v| v == 0.0) && self.scale.iter().all(|&v| v == 1.0)
    }

    pub fn apply(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        for mut row in out.rows_mut() {
            for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) * c;
            }
        }
        out
    }

    pub fn invert(&self, stored: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = stored.to_owned();
        for mut row in out.rows_mut() {
            for ((v, s), c) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = *v / c + s;
            }
        }
        out
    }
}

/// A finite point set with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(points: Array2<f64>, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::validation("points", "dataset must be non-empty"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("points", "entries must be finite"));
        }
        if class_count == 0 {
            return Err(Error::validation("class_count", "must be at least 1"));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(Error::validation(
                    "labels",
                    format!("{} labels for {} points", l.len(), points.nrows()),
                ));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= class_count) {
                return Err(Error::validation(
                    "labels",
                    format!("label {bad} outside 0..{class_count}"),
                ));
            }
        }
        let dim = points.ncols();
        Ok(Dataset {
            points,
            labels,
            class_count,
            normalization: Normalization::identity(dim),
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Draws `n` points (and their labels, if any).
    ///
    /// Without replacement when `n` fits in the dataset, with replacement
    /// otherwise. With `balanced` and labels present, each class gets
    /// `n / C` slots (remainder to the lowest classes) and the result is
    /// shuffled; if some class has no points the draw falls back to uniform.
    pub fn draw(&self, n: usize, balanced: bool, rng: &mut Rng) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
        if n == 0 {
            return Err(Error::validation("pairs", "must draw at least one point"));
        }
        let idx = match &self.labels {
            Some(labels) if balanced => {
                let mut by_class = vec![Vec::new(); self.class_count];
                for (i, &l) in labels.iter().enumerate() {
                    by_class[l].push(i);
                }
                if by_class.iter().any(Vec::is_empty) {
                    draw_indices(self.len(), n, rng)
                } else {
                    let c = self.class_count;
                    let mut idx = Vec::with_capacity(n);
                    for (k, members) in by_class.iter().enumerate() {
                        let quota = n / c + usize::from(k < n % c);
                        idx.extend(draw_indices(members.len(), quota, rng).into_iter().map(|j| members[j]));
                    }
                    idx.shuffle(rng);
                    idx
                }
            }
            _ => draw_indices(self.len(), n, rng),
        };
        let points = self.points.select(Axis(0), &idx);
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok((points, labels))
    }

    /// Rescales to per-dimension mean 0 and std `target_std`. Constant
    /// dimensions are only centred.
    pub fn normalize(&self, target_std: f64) -> Result<Dataset> {
        if !(target_std.is_finite() && target_std > 0.0) {
            return Err(Error::validation(
                "target_std",
                format!("must be positive, got {target_std}"),
            ));
        }
        let n = self.len() as f64;
        let mean = self.points.mean_axis(Axis(0)).expect("non-empty");
        let mut scale = Vec::with_capacity(self.dim());
        for (j, col) in self.points.axis_iter(Axis(1)).enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            scale.push(if var > 0.0 { target_std / var.sqrt() } else { 1.0 });
        }
        let step = Normalization {
            shift: mean.to_vec(),
            scale,
        };
        let points = step.apply(self.points.view());
        let prev = &self.normalization;
        let normalization = Normalization {
            shift: (0..self.dim())
                .map(|j| prev.shift[j] + step.shift[j] / prev.scale[j])
                .collect(),
            scale: (0..self.dim()).map(|j| prev.scale[j] * step.scale[j]).collect(),
        };
        Ok(Dataset {
            points,
            labels: self.labels.clone(),
            class_count: self.class_count,
            normalization,
        })
    }

    /// Maps stored-space points back to raw coordinates.
    pub fn denormalize(&self, points: ArrayView2<'_, f64>) -> Array2<f64> {
        self.normalization.invert(points)
    }

    /// Seeded shuffle split; the first part holds `round(fraction · K)` points.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::validation("fraction", "must lie in [0, 1]"));
        }
        let k = ((self.len() as f64) * fraction).round() as usize;
        if k == 0 || k == self.len() {
            return Err(Error::validation(
                "fraction",
                "both parts of the split must be non-empty",
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let part = |ids: &[usize]| Dataset {
            points: self.points.select(Axis(0), ids),
            labels: self.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        };
        Ok((part(&idx[..k]), part(&idx[k..])))
    }
}

fn draw_indices(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= len {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::validation("count", "must be positive"));
    }
    Ok(())
}

fn check_std(std: f64) -> Result<Normal<f64>> {
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::validation("std", format!("must be positive, got {std}")));
    }
    Ok(Normal::new(0.0, std).expect("positive std"))
}

/// Isotropic Gaussian mixture with equally likely modes; labels are mode indices.
pub fn make_mixture(means: &[Vec<f64>], std: f64, count: usize, rng: &mut Rng) -> Result<Dataset> {
    if means.is_empty() {
        return Err(Error::validation("means", "need at least one mode"));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
        return Err(Error::validation(
            "means",
            "modes must share a positive dimension and be finite",
        ));
    }
    let noise = check_std(std)?;
    check_count(count)?;
    let mut points = Array2::zeros((count, d));
    let mut labels = Vec::with_capacity(count);
    for mut row in points.rows_mut() {
        let k = rng.random_range(0..means.len());
        for (v, m) in row.iter_mut().zip(&means[k]) {
            *v = m + noise.sample(rng);
        }
        labels.push(k);
    }
    Dataset::new(points, Some(labels), means.len())
}

/// The two-mode mixture at `±(offset, 0)`.
pub fn make_two_modes(offset: f64, std: f64, count: usize, rng: &mut Rng) -> Result<Dataset> {
    make_mixture(&[vec![-offset, 0.0], vec![offset, 0.0]], std, count, rng)
}

/// Points at uniform angles on a circle of `radius`, with isotropic noise.
pub fn make_ring(radius: f64, std: f64, count: usize, rng: &mut Rng) -> Result<Dataset> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::validation("radius", format!("must be positive, got {radius}")));
    }
    let noise = check_std(std)?;
    check_count(count)?;
    let mut points = Array2::zeros((count, 2));
    for mut row in points.rows_mut() {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        row[0] = radius * a.cos() + noise.sample(rng);
        row[1] = radius * a.sin() + noise.sample(rng);
    }
    Dataset::new(points, None, 1)
}

/// Side length of each checkerboard cell; the board spans `[-2, 2]²`.
pub const CHECKER_CELL: f64 = 1.0;

/// Uniform points on the dark cells of a 4×4 board over `[-2, 2]²`
/// (cells whose row and column indices have an even sum).
pub fn make_checkerboard(count: usize, rng: &mut Rng) -> Result<Dataset> {
    check_count(count)?;
    let mut points = Array2::zeros((count, 2));
    for mut row in points.rows_mut() {
        let cell = rng.random_range(0..8usize);
        let r = cell / 2;
        let c = 2 * (cell % 2) + r % 2;
        row[0] = -2.0 + CHECKER_CELL * (c as f64 + rng.random::<f64>());
        row[1] = -2.0 + CHECKER_CELL * (r as f64 + rng.random::<f64>());
    }
    Dataset::new(points, None, 1)
}

/// Whether `p` lies on a dark checkerboard cell.
pub fn on_checkerboard(p: &[f64]) -> bool {
    if p.len() != 2 || p.iter().any(|v| !(-2.0..2.0).contains(v)) {
        return false;
    }
    let c = ((p[0] + 2.0) / CHECKER_CELL).floor() as usize;
    let r = ((p[1] + 2.0) / CHECKER_CELL).floor() as usize;
    (r + c).is_multiple_of(2)
}

/// Standard-normal points, mainly for tests and pairing statistics.
pub fn make_gaussian(dim: usize, count: usize, rng: &mut Rng) -> Result<Dataset> {
    check_count(count)?;
    if dim == 0 {
        return Err(Error::validation("dim", "must be positive"));
    }
    let v: Vec<f64> = (0..count * dim).map(|_| StandardNormal.sample(rng)).collect();
    Dataset::new(Array2::from_shape_vec((count, dim), v).expect("shape"), None, 1)
}

/// Reads a dataset from CSV. The class count is one more than the largest label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_err(1, "empty file".into()));
    }
    let label_col = headers.iter().position(|h| h == "label");
    let dim = headers.len() - usize::from(label_col.is_some());
    if dim == 0 {
        return Err(parse_err(1, "no coordinate columns".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (j, field) in record.iter().enumerate() {
            if Some(j) == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("label {field:?} is not a non-negative integer")))?;
                labels.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column {} value {field:?} is not a number", &headers[j])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("non-finite value {field:?}")));
                }
                values.push(v);
            }
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let rows = values.len() / dim;
    let points = Array2::from_shape_vec((rows, dim), values).expect("row-major shape");
    match label_col {
        Some(_) => {
            let c = labels.iter().max().map_or(1, |m| m + 1);
            Dataset::new(points, Some(labels), c)
        }
        None => Dataset::new(points, None, 1),
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes points (and labels) in the [`load_csv`] layout.
pub fn write_csv(path: &Path, points: ArrayView2<'_, f64>, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.nrows() {
            return Err(Error::validation("labels", "one label per point required"));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in points.outer_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        if let Some(l) = labels {
            fields.push(l[i].to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
