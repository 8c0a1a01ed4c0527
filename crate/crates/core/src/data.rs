//! Dataset files, z-score normalization, and chronological windowing.
//!
//! The on-disk format is a wide CSV: header `time,feat_0,...,feat_{F-1}`,
//! one row per timestep with strictly increasing integer times, and missing
//! cells either empty or the literal `NaN`. Values are written with Rust's
//! shortest round-trip float formatting, so write -> read reproduces every
//! bit. Station coordinates travel in a `feature_id,x,y` sidecar.

use crate::tensor::{Tensor, TensorError};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{row}:{col}: {detail}")]
    Parse { path: String, row: usize, col: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }

    /// `row`/`col` are 1-based file coordinates (row 1 is the header).
    fn parse(path: &Path, row: usize, col: usize, detail: impl Into<String>) -> Self {
        DataError::Parse { path: path.display().to_string(), row, col, detail: detail.into() }
    }
}

/// A loaded series: integer timestamps, `[T,F]` values (0 where missing),
/// and the 0/1 observation mask.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub times: Vec<i64>,
    pub values: Tensor,
    pub mask: Tensor,
}

impl Dataset {
    /// Wraps a fully-observed value matrix with unit mask and 0.. times.
    pub fn fully_observed(values: Tensor) -> Result<Self, DataError> {
        if values.ndim() != 2 {
            return Err(DataError::Invalid(format!("expected [T,F] values, got {:?}", values.shape())));
        }
        let t = values.shape()[0];
        Ok(Dataset {
            times: (0..t as i64).collect(),
            mask: Tensor::filled(values.shape().to_vec(), 1.0),
            values,
        })
    }

    pub fn t_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Reads a wide-CSV dataset. Missing cells (empty or `NaN`) get value 0 and
/// mask 0; parse failures carry 1-based row and column locations.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::parse(path, 1, 1, "empty file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"time") {
        return Err(DataError::parse(path, 1, 1, format!("first column must be 'time', got '{}'", columns.first().unwrap_or(&""))));
    }
    let f = columns.len() - 1;
    if f == 0 {
        return Err(DataError::parse(path, 1, 1, "no feature columns"));
    }
    let mut times: Vec<i64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut mask: Vec<f64> = Vec::new();
    for (line_idx, line) in lines {
        let row = line_idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != f + 1 {
            return Err(DataError::parse(
                path,
                row,
                1,
                format!("expected {} columns, found {}", f + 1, cells.len()),
            ));
        }
        let t: i64 = cells[0]
            .trim()
            .parse()
            .map_err(|_| DataError::parse(path, row, 1, format!("bad time '{}'", cells[0])))?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(DataError::parse(
                    path,
                    row,
                    1,
                    format!("time must be strictly increasing, {} after {}", t, prev),
                ));
            }
        }
        times.push(t);
        for (c, cell) in cells[1..].iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell == "NaN" {
                values.push(0.0);
                mask.push(0.0);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| DataError::parse(path, row, c + 2, format!("bad number '{}'", cell)))?;
            if v.is_nan() {
                values.push(0.0);
                mask.push(0.0);
            } else {
                values.push(v);
                mask.push(1.0);
            }
        }
    }
    let t_len = times.len();
    if t_len == 0 {
        return Err(DataError::parse(path, 2, 1, "no data rows"));
    }
    Ok(Dataset {
        times,
        values: Tensor::new(vec![t_len, f], values)?,
        mask: Tensor::new(vec![t_len, f], mask)?,
    })
}

/// Writes a dataset in the wide-CSV format; masked-out cells become empty.
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let (t_len, f) = (data.t_len(), data.n_features());
    if data.times.len() != t_len || data.mask.shape() != data.values.shape() {
        return Err(DataError::Invalid("dataset fields disagree on length".into()));
    }
    let mut out = String::from("time");
    for c in 0..f {
        write!(out, ",feat_{}", c).expect("string write");
    }
    out.push('\n');
    for t in 0..t_len {
        write!(out, "{}", data.times[t]).expect("string write");
        for c in 0..f {
            out.push(',');
            if data.mask.at(&[t, c]) == 1.0 {
                write!(out, "{}", data.values.at(&[t, c])).expect("string write");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Reads the `feature_id,x,y` coordinate sidecar; ids must be 0..F in order.
pub fn load_coords(path: &Path) -> Result<Vec<(f64, f64)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut coords = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let row = line_idx + 1;
        if row == 1 {
            if line != "feature_id,x,y" {
                return Err(DataError::parse(path, 1, 1, format!("expected header 'feature_id,x,y', got '{}'", line)));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(DataError::parse(path, row, 1, format!("expected 3 columns, found {}", cells.len())));
        }
        let id: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| DataError::parse(path, row, 1, format!("bad feature id '{}'", cells[0])))?;
        if id != coords.len() {
            return Err(DataError::parse(path, row, 1, format!("feature ids must be 0.. in order, got {}", id)));
        }
        let x: f64 = cells[1]
            .trim()
            .parse()
            .map_err(|_| DataError::parse(path, row, 2, format!("bad number '{}'", cells[1])))?;
        let y: f64 = cells[2]
            .trim()
            .parse()
            .map_err(|_| DataError::parse(path, row, 3, format!("bad number '{}'", cells[2])))?;
        coords.push((x, y));
    }
    if coords.is_empty() {
        return Err(DataError::parse(path, 2, 1, "no coordinate rows"));
    }
    Ok(coords)
}

pub fn save_coords(path: &Path, coords: &[(f64, f64)]) -> Result<(), DataError> {
    let mut out = String::from("feature_id,x,y\n");
    for (i, (x, y)) in coords.iter().enumerate() {
        writeln!(out, "{},{},{}", i, x, y).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| DataError::io(path, e))
}

/// Per-feature z-score statistics fitted on observed entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Floor applied to per-feature standard deviations so constant features
/// normalize to 0 instead of dividing by 0.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Fits per-feature mean and standard deviation over observed entries.
/// Every feature needs at least 2 observations in the fitting split.
pub fn normalize_fit(values: &Tensor, mask: &Tensor) -> Result<NormStats, DataError> {
    if values.ndim() != 2 || mask.shape() != values.shape() {
        return Err(DataError::Invalid(format!(
            "normalize_fit expects matching [T,F] tensors, got {:?} and {:?}",
            values.shape(),
            mask.shape()
        )));
    }
    let (t_len, f) = (values.shape()[0], values.shape()[1]);
    let mut mu = vec![0.0; f];
    let mut sigma = vec![0.0; f];
    for c in 0..f {
        let mut n = 0usize;
        let mut sum = 0.0;
        for t in 0..t_len {
            if mask.at(&[t, c]) == 1.0 {
                sum += values.at(&[t, c]);
                n += 1;
            }
        }
        if n < 2 {
            return Err(DataError::Invalid(format!(
                "feature {} has {} observed entries in the fitting split; normalization needs at least 2",
                c, n
            )));
        }
        let mean = sum / n as f64;
        let mut var = 0.0;
        for t in 0..t_len {
            if mask.at(&[t, c]) == 1.0 {
                var += (values.at(&[t, c]) - mean).powi(2);
            }
        }
        mu[c] = mean;
        sigma[c] = (var / n as f64).sqrt().max(SIGMA_FLOOR);
    }
    Ok(NormStats { mu, sigma })
}

/// Applies `(x - mu) / sigma` per feature to every entry. Masking is the
/// caller's concern: hidden entries should be re-zeroed afterwards.
pub fn normalize_apply(values: &Tensor, stats: &NormStats) -> Result<Tensor, DataError> {
    transform(values, stats, |v, mu, sigma| (v - mu) / sigma)
}

/// Inverts [`normalize_apply`]: `y * sigma + mu`.
pub fn normalize_inverse(values: &Tensor, stats: &NormStats) -> Result<Tensor, DataError> {
    transform(values, stats, |v, mu, sigma| v * sigma + mu)
}

fn transform(
    values: &Tensor,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor, DataError> {
    let n_feat = *values
        .shape()
        .last()
        .ok_or_else(|| DataError::Invalid("cannot normalize a scalar".into()))?;
    if stats.mu.len() != n_feat || stats.sigma.len() != n_feat {
        return Err(DataError::Invalid(format!(
            "stats cover {} features, data has {}",
            stats.mu.len(),
            n_feat
        )));
    }
    let data: Vec<f64> = values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, stats.mu[i % n_feat], stats.sigma[i % n_feat]))
        .collect();
    Ok(Tensor::new(values.shape().to_vec(), data)?)
}

/// Chronological window split: which windows belong to train, val, test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub n_windows: usize,
    pub t_window: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SplitPlan {
    pub fn train_range(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn val_range(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_val
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.n_train + self.n_val..self.n_windows
    }
}

/// Plans non-overlapping windows of `t_window` steps split 70/10/20 in
/// chronological order. The trailing partial window is dropped.
pub fn split_plan(t_total: usize, t_window: usize) -> Result<SplitPlan, DataError> {
    if t_window == 0 {
        return Err(DataError::Invalid("window length must be positive".into()));
    }
    if t_total < t_window {
        return Err(DataError::Invalid(format!(
            "series has {} steps, shorter than one {}-step window",
            t_total, t_window
        )));
    }
    let n_windows = t_total / t_window;
    let n_train = n_windows * 7 / 10;
    let n_val = n_windows / 10;
    let n_test = n_windows - n_train - n_val;
    Ok(SplitPlan { n_windows, t_window, n_train, n_val, n_test })
}

/// Cuts a `[T,F]` series into `[N, t_window, F]` stacked windows following
/// `plan`; rows beyond the last full window are dropped.
pub fn make_windows(series: &Tensor, plan: &SplitPlan) -> Result<Tensor, DataError> {
    if series.ndim() != 2 {
        return Err(DataError::Invalid(format!("expected [T,F] series, got {:?}", series.shape())));
    }
    let f = series.shape()[1];
    let needed = plan.n_windows * plan.t_window;
    if series.shape()[0] < needed {
        return Err(DataError::Invalid(format!(
            "series has {} steps, plan covers {}",
            series.shape()[0], needed
        )));
    }
    // row-major [T,F] means each window is a contiguous run
    let data = series.data()[..needed * f].to_vec();
    Ok(Tensor::new(vec![plan.n_windows, plan.t_window, f], data)?)
}

/// Slices stacked windows `[N,T,F]` down to `range`.
pub fn window_range(windows: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor, DataError> {
    if windows.ndim() != 3 {
        return Err(DataError::Invalid(format!("expected [N,T,F] windows, got {:?}", windows.shape())));
    }
    let (n, t, f) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    if range.end > n {
        return Err(DataError::Invalid(format!("window range {:?} exceeds {} windows", range, n)));
    }
    let per = t * f;
    let data = windows.data()[range.start * per..range.end * per].to_vec();
    Ok(Tensor::new(vec![range.len(), t, f], data)?)
}
