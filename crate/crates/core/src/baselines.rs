//! Naive imputation baselines: per-feature mean and median fill, last
//! observation carried forward, and linear interpolation between observed
//! neighbors.
//!
//! All four are pure per-feature functions on a `[T,F]` series with a 0/1
//! observation mask. Observed entries always pass through unchanged, so
//! every baseline is idempotent on fully-observed data. Mean and median
//! take their statistics from a caller-supplied reference split so that
//! evaluation stays leak-free.

use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Baseline selector, mirroring the CLI `--method` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mean,
    Median,
    Locf,
    Linear,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] =
        [BaselineKind::Mean, BaselineKind::Median, BaselineKind::Locf, BaselineKind::Linear];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Mean => "mean",
            BaselineKind::Median => "median",
            BaselineKind::Locf => "locf",
            BaselineKind::Linear => "linear",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(BaselineKind::Mean),
            "median" => Ok(BaselineKind::Median),
            "locf" => Ok(BaselineKind::Locf),
            "linear" => Ok(BaselineKind::Linear),
            other => Err(format!("unknown baseline '{}', expected mean, median, locf, or linear", other)),
        }
    }
}

fn check_series(op: &'static str, values: &Tensor, mask: &Tensor) -> Result<(usize, usize), TensorError> {
    if values.ndim() != 2 {
        return Err(TensorError::shape(op, format!("expected [T,F], got {:?}", values.shape())));
    }
    if mask.shape() != values.shape() {
        return Err(TensorError::shape(
            op,
            format!("mask {:?} does not match values {:?}", mask.shape(), values.shape()),
        ));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(TensorError::invalid(op, format!("mask entry {} is not 0/1", bad)));
    }
    Ok((values.shape()[0], values.shape()[1]))
}

/// Per-feature central statistics over the observed entries of a reference
/// split. Features with no observations fall back to 0 and are listed in
/// `empty_features` so callers can warn.
#[derive(Clone, Debug)]
pub struct FillStats {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub empty_features: Vec<usize>,
}

impl FillStats {
    pub fn fit(values: &Tensor, mask: &Tensor) -> Result<Self, TensorError> {
        let (t_len, f) = check_series("fill_stats", values, mask)?;
        let mut mean = vec![0.0; f];
        let mut median = vec![0.0; f];
        let mut empty_features = Vec::new();
        for c in 0..f {
            let mut observed = Vec::new();
            let mut sum = 0.0;
            for t in 0..t_len {
                if mask.at(&[t, c]) == 1.0 {
                    let v = values.at(&[t, c]);
                    sum += v;
                    observed.push(v);
                }
            }
            if observed.is_empty() {
                empty_features.push(c);
                continue;
            }
            mean[c] = sum / observed.len() as f64;
            observed.sort_by(f64::total_cmp);
            let n = observed.len();
            median[c] = if n % 2 == 1 {
                observed[n / 2]
            } else {
                (observed[n / 2 - 1] + observed[n / 2]) / 2.0
            };
        }
        Ok(FillStats { mean, median, empty_features })
    }
}

fn fill_with(values: &Tensor, mask: &Tensor, fills: &[f64]) -> Result<Tensor, TensorError> {
    let (t_len, f) = check_series("impute_fill", values, mask)?;
    if fills.len() != f {
        return Err(TensorError::shape(
            "impute_fill",
            format!("stats cover {} features, series has {}", fills.len(), f),
        ));
    }
    let mut out = values.data().to_vec();
    for t in 0..t_len {
        for c in 0..f {
            if mask.at(&[t, c]) == 0.0 {
                out[t * f + c] = fills[c];
            }
        }
    }
    Tensor::new(vec![t_len, f], out)
}

/// Fills each missing entry with its feature's reference-split mean.
pub fn impute_mean(values: &Tensor, mask: &Tensor, stats: &FillStats) -> Result<Tensor, TensorError> {
    fill_with(values, mask, &stats.mean)
}

/// Fills each missing entry with its feature's reference-split median.
pub fn impute_median(values: &Tensor, mask: &Tensor, stats: &FillStats) -> Result<Tensor, TensorError> {
    fill_with(values, mask, &stats.median)
}

/// Carries the most recent observation forward; leading gaps take the first
/// later observation instead, and a fully-missing feature falls back to 0.
pub fn impute_locf(values: &Tensor, mask: &Tensor) -> Result<Tensor, TensorError> {
    let (t_len, f) = check_series("impute_locf", values, mask)?;
    let mut out = values.data().to_vec();
    for c in 0..f {
        let first_observed = (0..t_len).find(|&t| mask.at(&[t, c]) == 1.0);
        let mut last = match first_observed {
            Some(t0) => values.at(&[t0, c]),
            None => 0.0,
        };
        for t in 0..t_len {
            if mask.at(&[t, c]) == 1.0 {
                last = values.at(&[t, c]);
            } else {
                out[t * f + c] = last;
            }
        }
    }
    Tensor::new(vec![t_len, f], out)
}

/// Straight-line interpolation between the nearest observed neighbors by
/// time index; boundary gaps extend flat from the nearest observation, and a
/// fully-missing feature falls back to 0.
///
/// The interior formula multiplies before dividing, so an affine series with
/// exactly representable slope and intercept is reconstructed without error.
pub fn impute_linear(values: &Tensor, mask: &Tensor) -> Result<Tensor, TensorError> {
    let (t_len, f) = check_series("impute_linear", values, mask)?;
    let mut out = values.data().to_vec();
    for c in 0..f {
        let observed: Vec<usize> = (0..t_len).filter(|&t| mask.at(&[t, c]) == 1.0).collect();
        if observed.is_empty() {
            for t in 0..t_len {
                out[t * f + c] = 0.0;
            }
            continue;
        }
        let mut next_idx = 0usize;
        let mut prev: Option<usize> = None;
        for t in 0..t_len {
            if next_idx < observed.len() && observed[next_idx] == t {
                prev = Some(t);
                next_idx += 1;
                continue;
            }
            let next = observed.get(next_idx).copied();
            out[t * f + c] = match (prev, next) {
                (Some(p), Some(n)) => {
                    let xp = values.at(&[p, c]);
                    let xn = values.at(&[n, c]);
                    xp + ((xn - xp) * (t - p) as f64) / ((n - p) as f64)
                }
                (Some(p), None) => values.at(&[p, c]),
                (None, Some(n)) => values.at(&[n, c]),
                (None, None) => unreachable!("observed is nonempty"),
            };
        }
    }
    Tensor::new(vec![t_len, f], out)
}

/// Dispatches on `kind`; `stats` is required for mean and median.
pub fn impute_baseline(
    kind: BaselineKind,
    values: &Tensor,
    mask: &Tensor,
    stats: Option<&FillStats>,
) -> Result<Tensor, TensorError> {
    match kind {
        BaselineKind::Mean | BaselineKind::Median => {
            let stats = stats.ok_or_else(|| {
                TensorError::invalid("impute_baseline", format!("{} requires fill statistics", kind))
            })?;
            if kind == BaselineKind::Mean {
                impute_mean(values, mask, stats)
            } else {
                impute_median(values, mask, stats)
            }
        }
        BaselineKind::Locf => impute_locf(values, mask),
        BaselineKind::Linear => impute_linear(values, mask),
    }
}

/// Features with no observed entry at all, for caller-side warnings.
pub fn fully_missing_features(mask: &Tensor) -> Vec<usize> {
    if mask.ndim() != 2 {
        return Vec::new();
    }
    let (t_len, f) = (mask.shape()[0], mask.shape()[1]);
    (0..f)
        .filter(|&c| (0..t_len).all(|t| mask.at(&[t, c]) == 0.0))
        .collect()
}
