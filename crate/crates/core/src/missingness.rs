//! Corruption generators and a synthetic dataset with latent geography.
//!
//! Corruption hides entries of a `[T,F]` series that were originally
//! observed, producing the model-visible series plus an evaluation mask that
//! remembers where the hidden ground truth lives. Three patterns: pointwise
//! independent hiding, axis-aligned rectangular blocks sampled until a target
//! rate is reached, and one contiguous all-feature interval per window.
//!
//! The synthetic generator places stations in the unit square, correlates
//! them through a Gaussian kernel over distance, and drives the system with
//! a temporally smooth AR(1) process, so embedding and attention analyses
//! have a known ground-truth structure to recover.

use crate::rng::{standard_normal, uniform};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum CorruptionError {
    #[error("{0}")]
    Invalid(String),
    #[error("requested missing rate {rate} is unreachable: {detail}")]
    UnreachableRate { rate: f64, detail: String },
    #[error("covariance is not positive definite even with jitter {max_jitter}")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Corruption pattern selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Point,
    Block,
    Subseq,
}

impl Pattern {
    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Point => "point",
            Pattern::Block => "block",
            Pattern::Subseq => "subseq",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point" => Ok(Pattern::Point),
            "block" => Ok(Pattern::Block),
            "subseq" => Ok(Pattern::Subseq),
            other => Err(format!("unknown pattern '{}', expected point, block, or subseq", other)),
        }
    }
}

/// One sampled rectangle of a block corruption, kept for replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRect {
    pub t0: usize,
    pub f0: usize,
    pub t_len: usize,
    pub f_len: usize,
}

/// Result of corrupting a series: the hidden-entry view the model sees, and
/// the bookkeeping needed to score imputations later. The input tensors are
/// never modified.
#[derive(Clone, Debug)]
pub struct Corrupted {
    /// `[T,F]` values, zero-filled wherever `mask` is 0.
    pub values: Tensor,
    /// Observation mask after corruption.
    pub mask: Tensor,
    /// 1 exactly on entries this corruption hid (all originally observed).
    pub eval_mask: Tensor,
    /// Hidden fraction relative to originally observed entries.
    pub realized_rate: f64,
    /// The rectangles a block corruption sampled, in order; empty otherwise.
    pub blocks: Vec<BlockRect>,
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

fn check_rate(op: &'static str, rate: f64) -> Result<(), CorruptionError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(CorruptionError::Invalid(format!(
            "{}: rate must lie in (0, 1), got {}",
            op, rate
        )));
    }
    Ok(())
}

fn finish(
    values: &Tensor,
    original: &Tensor,
    hidden: &[bool],
    blocks: Vec<BlockRect>,
) -> Result<Corrupted, TensorError> {
    let n_observed = original.data().iter().filter(|&&m| m == 1.0).count();
    let mut mask = Vec::with_capacity(hidden.len());
    let mut eval_mask = Vec::with_capacity(hidden.len());
    let mut out_values = Vec::with_capacity(hidden.len());
    let mut n_hidden = 0usize;
    for (i, &h) in hidden.iter().enumerate() {
        let observed = original.data()[i] == 1.0;
        let hide = h && observed;
        if hide {
            n_hidden += 1;
        }
        let m = if observed && !hide { 1.0 } else { 0.0 };
        mask.push(m);
        eval_mask.push(if hide { 1.0 } else { 0.0 });
        out_values.push(values.data()[i] * m);
    }
    Ok(Corrupted {
        values: Tensor::new(values.shape().to_vec(), out_values)?,
        mask: Tensor::new(values.shape().to_vec(), mask)?,
        eval_mask: Tensor::new(values.shape().to_vec(), eval_mask)?,
        realized_rate: n_hidden as f64 / n_observed.max(1) as f64,
        blocks,
    })
}

/// Hides each originally-observed entry independently with probability `rate`.
pub fn corrupt_point(
    values: &Tensor,
    mask: &Tensor,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted, CorruptionError> {
    check_series("corrupt_point", values, mask)?;
    check_rate("corrupt_point", rate)?;
    let hidden: Vec<bool> = mask
        .data()
        .iter()
        .map(|&m| m == 1.0 && uniform(rng, 0.0, 1.0) < rate)
        .collect();
    Ok(finish(values, mask, &hidden, Vec::new())?)
}

/// Hides axis-aligned rectangles of `block_len` steps by `block_width`
/// features, sampled uniformly, until the hidden fraction of observed
/// entries first reaches `rate`. Block dims are clipped to the series.
pub fn corrupt_block(
    values: &Tensor,
    mask: &Tensor,
    rate: f64,
    block_len: usize,
    block_width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted, CorruptionError> {
    let (t_len, f) = check_series("corrupt_block", values, mask)?;
    check_rate("corrupt_block", rate)?;
    if block_len == 0 || block_width == 0 {
        return Err(CorruptionError::Invalid("corrupt_block: block dims must be positive".into()));
    }
    let b_t = block_len.min(t_len);
    let b_f = block_width.min(f);
    let n_observed = mask.data().iter().filter(|&&m| m == 1.0).count();
    if n_observed == 0 {
        return Err(CorruptionError::UnreachableRate {
            rate,
            detail: "series has no observed entries".into(),
        });
    }
    let mut hidden = vec![false; t_len * f];
    let mut blocks = Vec::new();
    let mut n_hidden = 0usize;
    // a rectangle can land anywhere, so sampling covers every cell; the cap
    // only guards against astronomically unlucky streams
    let max_rects = 1_000_000usize;
    while (n_hidden as f64) < rate * n_observed as f64 {
        if blocks.len() >= max_rects {
            return Err(CorruptionError::UnreachableRate {
                rate,
                detail: format!("still at {:.4} after {} rectangles", n_hidden as f64 / n_observed as f64, blocks.len()),
            });
        }
        let t0 = rng.random_range(0..=t_len - b_t);
        let f0 = rng.random_range(0..=f - b_f);
        blocks.push(BlockRect { t0, f0, t_len: b_t, f_len: b_f });
        for t in t0..t0 + b_t {
            for c in f0..f0 + b_f {
                let idx = t * f + c;
                if mask.data()[idx] == 1.0 && !hidden[idx] {
                    hidden[idx] = true;
                    n_hidden += 1;
                }
            }
        }
    }
    Ok(finish(values, mask, &hidden, blocks)?)
}

/// Hides one contiguous all-feature interval per window of `window_len`
/// steps (a shorter tail window gets its own proportional interval). The
/// interval covers `ceil(rate * window)` steps at a uniform start.
pub fn corrupt_subseq(
    values: &Tensor,
    mask: &Tensor,
    rate: f64,
    window_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted, CorruptionError> {
    let (t_len, f) = check_series("corrupt_subseq", values, mask)?;
    check_rate("corrupt_subseq", rate)?;
    if window_len == 0 {
        return Err(CorruptionError::Invalid("corrupt_subseq: window_len must be positive".into()));
    }
    let mut hidden = vec![false; t_len * f];
    let mut start = 0usize;
    while start < t_len {
        let chunk = window_len.min(t_len - start);
        let gap = ((rate * chunk as f64).ceil() as usize).clamp(1, chunk);
        let offset = rng.random_range(0..=chunk - gap);
        for t in start + offset..start + offset + gap {
            for c in 0..f {
                hidden[t * f + c] = true;
            }
        }
        start += chunk;
    }
    Ok(finish(values, mask, &hidden, Vec::new())?)
}

/// Applies the pattern named by `pattern` with its geometry arguments.
pub fn corrupt(
    values: &Tensor,
    mask: &Tensor,
    pattern: Pattern,
    rate: f64,
    block_len: usize,
    block_width: usize,
    window_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted, CorruptionError> {
    match pattern {
        Pattern::Point => corrupt_point(values, mask, rate, rng),
        Pattern::Block => corrupt_block(values, mask, rate, block_len, block_width, rng),
        Pattern::Subseq => corrupt_subseq(values, mask, rate, window_len, rng),
    }
}

/// Shape of a synthetic dataset with planted spatial correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_features: usize,
    /// Steps per window; total length is `n_windows * t_window`.
    pub t_window: usize,
    pub n_windows: usize,
    /// Gaussian-kernel length-scale of the station correlation.
    pub length_scale: f64,
    /// Standard deviation of the iid observation noise.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_features: 12,
            t_window: 24,
            n_windows: 400,
            length_scale: 0.4,
            noise_std: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if self.n_features == 0 || self.t_window == 0 || self.n_windows == 0 {
            return Err(CorruptionError::Invalid(
                "synthetic spec requires positive n_features, t_window, n_windows".into(),
            ));
        }
        if !(self.length_scale > 0.0) {
            return Err(CorruptionError::Invalid(format!(
                "length_scale must be positive, got {}",
                self.length_scale
            )));
        }
        if self.noise_std < 0.0 {
            return Err(CorruptionError::Invalid(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn t_total(&self) -> usize {
        self.t_window * self.n_windows
    }
}

/// A generated dataset plus the station coordinates that shaped it.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    /// `[t_total, F]`, fully observed.
    pub values: Tensor,
    /// Unit-square position of each feature.
    pub coords: Vec<(f64, f64)>,
}

/// Lower-triangular Cholesky factor of `k` (`n` x `n`, row-major), adding an
/// escalating diagonal jitter when the factorization stalls numerically.
pub(crate) fn cholesky_with_jitter(k: &[f64], n: usize) -> Result<Vec<f64>, CorruptionError> {
    let mut jitter = 0.0f64;
    loop {
        match cholesky(k, n, jitter) {
            Some(l) => return Ok(l),
            None => {
                jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
                if jitter > 1e-6 {
                    return Err(CorruptionError::NotPositiveDefinite { max_jitter: 1e-6 });
                }
            }
        }
    }
}

fn cholesky(k: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = k[i * n + j];
            if i == j {
                acc += jitter;
            }
            for p in 0..j {
                acc -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if !(acc > 0.0) || !acc.is_finite() {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Generates the dataset with station coordinates drawn uniformly in the
/// unit square. See [`synth_with_coords`] for the generative model.
pub fn synth_spatial(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticData, CorruptionError> {
    spec.validate()?;
    let coords: Vec<(f64, f64)> = (0..spec.n_features)
        .map(|_| (uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)))
        .collect();
    synth_with_coords(spec, coords, rng)
}

/// Generates `t_total` cross-sections with covariance
/// `K[i][j] = exp(-dist(i,j)^2 / length_scale^2)` between stations, made
/// temporally smooth by an AR(1) driver with coefficient 0.8, plus iid
/// observation noise.
pub fn synth_with_coords(
    spec: &SyntheticSpec,
    coords: Vec<(f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticData, CorruptionError> {
    spec.validate()?;
    let f = spec.n_features;
    if coords.len() != f {
        return Err(CorruptionError::Invalid(format!(
            "expected {} coordinates, got {}",
            f,
            coords.len()
        )));
    }
    let mut k = vec![0.0; f * f];
    for i in 0..f {
        for j in 0..f {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            let d2 = dx * dx + dy * dy;
            k[i * f + j] = (-d2 / (spec.length_scale * spec.length_scale)).exp();
        }
    }
    let l = cholesky_with_jitter(&k, f)?;

    let ar = 0.8f64;
    let innovation_scale = (1.0 - ar * ar).sqrt();
    let t_total = spec.t_total();
    let mut values = vec![0.0; t_total * f];
    let mut z = vec![0.0; f];
    let mut colored = vec![0.0; f];
    for t in 0..t_total {
        // colored = L * eps, correlating this step's innovations
        let eps: Vec<f64> = (0..f).map(|_| standard_normal(rng)).collect();
        for i in 0..f {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[i * f + j] * eps[j];
            }
            colored[i] = acc;
        }
        for i in 0..f {
            z[i] = if t == 0 { colored[i] } else { ar * z[i] + innovation_scale * colored[i] };
            let noise = if spec.noise_std > 0.0 { spec.noise_std * standard_normal(rng) } else { 0.0 };
            values[t * f + i] = z[i] + noise;
        }
    }
    Ok(SyntheticData {
        values: Tensor::new(vec![t_total, f], values)?,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    fn observed_series(t: usize, f: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = stream(seed, StreamKind::Data, 0);
        let values = Tensor::new(vec![t, f], (0..t * f).map(|_| uniform(&mut rng, -3.0, 3.0)).collect()).unwrap();
        let mask = Tensor::filled(vec![t, f], 1.0);
        (values, mask)
    }

    fn holey_series(t: usize, f: usize, seed: u64) -> (Tensor, Tensor) {
        let (values, _) = observed_series(t, f, seed);
        let mut rng = stream(seed, StreamKind::Data, 1);
        let mask = Tensor::new(
            vec![t, f],
            (0..t * f).map(|_| if uniform(&mut rng, 0.0, 1.0) < 0.2 { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        (values, mask)
    }

    #[test]
    fn point_rate_matches_binomial_expectation() {
        let (values, mask) = observed_series(1000, 100, 1);
        let mut rng = stream(1, StreamKind::Data, 2);
        let out = corrupt_point(&values, &mask, 0.5, &mut rng).unwrap();
        assert!((out.realized_rate - 0.5).abs() < 0.01, "rate {}", out.realized_rate);
        // 3-sigma binomial bound on the same draw
        let n = 100_000f64;
        let sigma = (0.5 * 0.5 / n).sqrt();
        assert!((out.realized_rate - 0.5).abs() < 3.0 * sigma, "outside 3 sigma");
    }

    #[test]
    fn point_tiny_rate_hides_nothing() {
        let (values, mask) = observed_series(20, 30, 2);
        let mut rng = stream(2, StreamKind::Data, 2);
        let out = corrupt_point(&values, &mask, 1e-9, &mut rng).unwrap();
        assert_eq!(out.eval_mask.data().iter().filter(|&&v| v == 1.0).count(), 0);
        assert_eq!(out.realized_rate, 0.0);
    }

    #[test]
    fn corruption_bookkeeping_is_consistent() {
        let (values, mask) = holey_series(50, 8, 3);
        let mut rng = stream(3, StreamKind::Data, 2);
        let out = corrupt_point(&values, &mask, 0.4, &mut rng).unwrap();
        for i in 0..values.numel() {
            let originally = mask.data()[i] == 1.0;
            let hidden = out.eval_mask.data()[i] == 1.0;
            let still = out.mask.data()[i] == 1.0;
            assert!(!(hidden && still), "entry {} both hidden and observed", i);
            if hidden {
                assert!(originally, "hid an entry that was never observed");
            }
            assert_eq!(still, originally && !hidden);
            if still {
                assert_eq!(out.values.data()[i], values.data()[i]);
            } else {
                assert_eq!(out.values.data()[i], 0.0, "hidden entries must be zero-filled");
            }
        }
        // inputs remain untouched
        let (values2, mask2) = holey_series(50, 8, 3);
        assert_eq!(values.data(), values2.data());
        assert_eq!(mask.data(), mask2.data());
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let (values, mask) = holey_series(40, 6, 4);
        for pattern in [Pattern::Point, Pattern::Block, Pattern::Subseq] {
            let run = || {
                let mut rng = stream(9, StreamKind::Data, 2);
                corrupt(&values, &mask, pattern, 0.3, 6, 3, 10, &mut rng).unwrap()
            };
            let a = run();
            let b = run();
            assert_eq!(a.mask.data(), b.mask.data(), "{:?}", pattern);
            assert_eq!(a.eval_mask.data(), b.eval_mask.data(), "{:?}", pattern);
            assert_eq!(a.blocks, b.blocks, "{:?}", pattern);
        }
    }

    #[test]
    fn block_full_cover_hides_everything() {
        let (values, mask) = observed_series(12, 5, 5);
        let mut rng = stream(5, StreamKind::Data, 2);
        let out = corrupt_block(&values, &mask, 0.9, 12, 5, &mut rng).unwrap();
        assert_eq!(out.realized_rate, 1.0);
        assert_eq!(out.blocks.len(), 1);
        assert!(out.mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn block_replay_reproduces_eval_mask() {
        let (values, mask) = holey_series(48, 12, 6);
        let mut rng = stream(6, StreamKind::Data, 2);
        let out = corrupt_block(&values, &mask, 0.5, 6, 3, &mut rng).unwrap();
        let f = 12;
        let mut replay = vec![false; 48 * f];
        for b in &out.blocks {
            for t in b.t0..b.t0 + b.t_len {
                for c in b.f0..b.f0 + b.f_len {
                    replay[t * f + c] = true;
                }
            }
        }
        for i in 0..48 * f {
            let expected = replay[i] && mask.data()[i] == 1.0;
            assert_eq!(out.eval_mask.data()[i] == 1.0, expected, "replay mismatch at {}", i);
        }
    }

    #[test]
    fn block_overshoot_is_bounded_by_one_rectangle() {
        let (values, mask) = observed_series(48, 12, 7);
        let mut rng = stream(7, StreamKind::Data, 2);
        let rate = 0.5;
        let out = corrupt_block(&values, &mask, rate, 6, 3, &mut rng).unwrap();
        assert!(out.realized_rate >= rate);
        let block_fraction = (6.0 * 3.0) / (48.0 * 12.0);
        assert!(
            out.realized_rate - rate < block_fraction,
            "overshoot {} exceeds one block {}",
            out.realized_rate - rate,
            block_fraction
        );
    }

    #[test]
    fn block_requires_observations() {
        let values = Tensor::zeros(vec![10, 4]);
        let mask = Tensor::zeros(vec![10, 4]);
        let mut rng = stream(8, StreamKind::Data, 2);
        assert!(matches!(
            corrupt_block(&values, &mask, 0.5, 3, 2, &mut rng),
            Err(CorruptionError::UnreachableRate { .. })
        ));
    }

    #[test]
    fn subseq_hides_one_interval_per_window() {
        let (values, mask) = observed_series(72, 4, 9);
        let window = 24;
        let rate = 0.5;
        let mut rng = stream(9, StreamKind::Data, 3);
        let out = corrupt_subseq(&values, &mask, rate, window, &mut rng).unwrap();
        for w in 0..3 {
            let hidden_steps: Vec<usize> = (0..window)
                .filter(|&t| out.eval_mask.at(&[w * window + t, 0]) == 1.0)
                .collect();
            assert_eq!(hidden_steps.len(), 12, "window {} gap length", w);
            // contiguity: consecutive indices
            for pair in hidden_steps.windows(2) {
                assert_eq!(pair[1], pair[0] + 1, "window {} gap not contiguous", w);
            }
            // all features hidden at those steps
            for &t in &hidden_steps {
                for c in 0..4 {
                    assert_eq!(out.eval_mask.at(&[w * window + t, c]), 1.0);
                }
            }
        }
        // counting oracle for the realized rate
        let hidden = out.eval_mask.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(hidden, 3 * 12 * 4);
        assert!((out.realized_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn subseq_near_unit_rate_hides_whole_window() {
        let (values, mask) = observed_series(20, 3, 10);
        let mut rng = stream(10, StreamKind::Data, 3);
        let out = corrupt_subseq(&values, &mask, 0.999, 10, &mut rng).unwrap();
        assert!(out.mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn subseq_gap_uses_ceiling() {
        let (values, mask) = observed_series(10, 2, 11);
        let mut rng = stream(11, StreamKind::Data, 3);
        let out = corrupt_subseq(&values, &mask, 0.51, 10, &mut rng).unwrap();
        let hidden_steps = (0..10).filter(|&t| out.eval_mask.at(&[t, 0]) == 1.0).count();
        assert_eq!(hidden_steps, 6, "ceil(0.51 * 10)");
    }

    #[test]
    fn cholesky_factors_reproduce_the_matrix() {
        let k = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky_with_jitter(&k, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += l[i * 3 + p] * l[j * 3 + p];
                }
                assert!((acc - k[i * 3 + j]).abs() < 1e-12, "L L^T mismatch at {},{}", i, j);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite_matrices() {
        // eigenvalues 3 and -1: no tiny jitter can rescue it
        let k = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            cholesky_with_jitter(&k, 2),
            Err(CorruptionError::NotPositiveDefinite { .. })
        ));
    }

    fn base_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_features: 6,
            t_window: 25,
            n_windows: 4,
            length_scale: 0.5,
            noise_std: 0.0,
        }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = base_spec();
        let a = synth_spatial(&spec, &mut stream(12, StreamKind::Data, 0)).unwrap();
        let b = synth_spatial(&spec, &mut stream(12, StreamKind::Data, 0)).unwrap();
        assert_eq!(a.values.data(), b.values.data());
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.values.shape(), &[100, 6]);
    }

    #[test]
    fn coincident_stations_are_nearly_identical() {
        let spec = SyntheticSpec { n_features: 2, t_window: 50, n_windows: 4, ..base_spec() };
        let coords = vec![(0.3, 0.7), (0.3, 0.7)];
        let mut rng = stream(13, StreamKind::Data, 0);
        let data = synth_with_coords(&spec, coords, &mut rng).unwrap();
        let t = spec.t_total();
        let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..t {
            let a = data.values.at(&[i, 0]);
            let b = data.values.at(&[i, 1]);
            sa += a;
            sb += b;
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
        let n = t as f64;
        let cov = sab / n - (sa / n) * (sb / n);
        let corr = cov / ((saa / n - (sa / n).powi(2)).sqrt() * (sbb / n - (sb / n).powi(2)).sqrt());
        assert!(corr > 0.999, "coincident stations decorrelated: {}", corr);
    }

    #[test]
    fn empirical_correlations_recover_the_kernel() {
        let spec = SyntheticSpec {
            n_features: 6,
            t_window: 100,
            n_windows: 100,
            length_scale: 0.5,
            noise_std: 0.0,
        };
        let mut rng = stream(14, StreamKind::Data, 0);
        let data = synth_spatial(&spec, &mut rng).unwrap();
        let f = spec.n_features;
        let t = spec.t_total();
        let mut mean = vec![0.0; f];
        for i in 0..t {
            for j in 0..f {
                mean[j] += data.values.at(&[i, j]);
            }
        }
        for m in mean.iter_mut() {
            *m /= t as f64;
        }
        let mut cov = vec![0.0; f * f];
        for i in 0..t {
            for a in 0..f {
                for b in 0..f {
                    cov[a * f + b] +=
                        (data.values.at(&[i, a]) - mean[a]) * (data.values.at(&[i, b]) - mean[b]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= t as f64;
        }
        let mut err_sum = 0.0;
        let mut n_off = 0;
        for a in 0..f {
            for b in 0..f {
                if a == b {
                    continue;
                }
                let corr = cov[a * f + b] / (cov[a * f + a].sqrt() * cov[b * f + b].sqrt());
                let dx = data.coords[a].0 - data.coords[b].0;
                let dy = data.coords[a].1 - data.coords[b].1;
                let want = (-(dx * dx + dy * dy) / (0.5 * 0.5)).exp();
                err_sum += (corr - want).abs();
                n_off += 1;
            }
        }
        let mean_err = err_sum / n_off as f64;
        assert!(mean_err < 0.05, "mean absolute correlation error {}", mean_err);
    }

    #[test]
    fn vanishing_length_scale_decorrelates_stations() {
        let spec = SyntheticSpec {
            n_features: 5,
            t_window: 100,
            n_windows: 50,
            length_scale: 1e-3,
            noise_std: 0.0,
        };
        let mut rng = stream(15, StreamKind::Data, 0);
        let data = synth_spatial(&spec, &mut rng).unwrap();
        let f = spec.n_features;
        let t = spec.t_total();
        for a in 0..f {
            for b in a + 1..f {
                let (mut sa, mut sb, mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..t {
                    let x = data.values.at(&[i, a]);
                    let y = data.values.at(&[i, b]);
                    sa += x;
                    sb += y;
                    sab += x * y;
                    saa += x * x;
                    sbb += y * y;
                }
                let n = t as f64;
                let corr = (sab / n - sa / n * (sb / n))
                    / ((saa / n - (sa / n).powi(2)).sqrt() * (sbb / n - (sb / n).powi(2)).sqrt());
                assert!(corr.abs() < 0.1, "stations {} and {} correlate at {}", a, b, corr);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut bad = base_spec();
        bad.length_scale = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = base_spec();
        bad.n_features = 0;
        assert!(bad.validate().is_err());
        let mut bad = base_spec();
        bad.noise_std = -0.1;
        assert!(bad.validate().is_err());
    }
}
