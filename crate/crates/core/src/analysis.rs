//! Evaluation metrics and structure-discovery analyses.
//!
//! Metrics score imputations on an explicit evaluation mask. The structure
//! analyses probe what the model learned: whether identity embeddings mirror
//! station geography, whether feature attention concentrates on nearby
//! stations, and how error grows with gap length or shrinks with
//! cross-feature correlation. Every Pearson computation uses a fixed-order
//! two-pass covariance so reports are bitwise reproducible.

use crate::encoder::AttentionRecord;
use crate::tensor::{Tensor, TensorError};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Imputation quality over the evaluation-target entries.
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    /// Aggregate relative error, sum |err| / sum |truth|; NaN when the truth
    /// magnitudes sum to zero (see `mre_defined`).
    pub mre: f64,
    pub n: usize,
    pub mre_defined: bool,
}

/// MAE, MSE, and MRE over entries where `eval_mask` is 1.
pub fn metrics(truth: &Tensor, pred: &Tensor, eval_mask: &Tensor) -> Result<EvalReport, TensorError> {
    if truth.shape() != pred.shape() || truth.shape() != eval_mask.shape() {
        return Err(TensorError::shape(
            "metrics",
            format!(
                "truth {:?}, prediction {:?}, mask {:?} must agree",
                truth.shape(),
                pred.shape(),
                eval_mask.shape()
            ),
        ));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut truth_sum = 0.0;
    for i in 0..truth.numel() {
        let m = eval_mask.data()[i];
        if m == 0.0 {
            continue;
        }
        if m != 1.0 {
            return Err(TensorError::invalid("metrics", format!("mask entry {} is not 0/1", m)));
        }
        let err = pred.data()[i] - truth.data()[i];
        abs_sum += err.abs();
        sq_sum += err * err;
        truth_sum += truth.data()[i].abs();
        n += 1;
    }
    if n == 0 {
        return Err(TensorError::contract("metrics", "evaluation mask selects no entries"));
    }
    let mae = abs_sum / n as f64;
    let mse = sq_sum / n as f64;
    let mre_defined = truth_sum > 0.0;
    let mre = if mre_defined { abs_sum / truth_sum } else { f64::NAN };
    // Cauchy-Schwarz: mean|e| squared never exceeds mean e^2
    assert!(mae * mae <= mse * (1.0 + 1e-12) + 1e-300, "mae^2 {} > mse {}", mae * mae, mse);
    Ok(EvalReport { mae, mse, mre, n, mre_defined })
}

/// Pearson correlation with a two-sided p-value from the t-transform.
/// `degenerate` marks zero-variance inputs or too few points; `r` and `p`
/// are NaN in that case.
#[derive(Clone, Copy, Debug)]
pub struct Pearson {
    pub r: f64,
    pub p: f64,
    pub n: usize,
    pub degenerate: bool,
}

const DEGENERATE: Pearson = Pearson { r: f64::NAN, p: f64::NAN, n: 0, degenerate: true };

/// Two-pass fixed-order Pearson correlation of paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Pearson {
    assert_eq!(xs.len(), ys.len(), "pearson needs paired samples");
    let n = xs.len();
    if n < 2 {
        return Pearson { n, ..DEGENERATE };
    }
    // constant inputs are degenerate even when mean rounding leaves a
    // nonzero variance in the last bit
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return Pearson { n, ..DEGENERATE };
    }
    let nf = n as f64;
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..n {
        mx += xs[i];
        my += ys[i];
    }
    mx /= nf;
    my /= nf;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Pearson { n, ..DEGENERATE };
    }
    let r = cov / (vx * vy).sqrt();
    if !r.is_finite() {
        return Pearson { n, ..DEGENERATE };
    }
    let r = r.clamp(-1.0, 1.0);
    let p = if n < 3 {
        f64::NAN
    } else if r.abs() == 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Pearson { r, p, n, degenerate: false }
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// How identity embeddings relate to station geography: pairwise cosine
/// similarities against pairwise distances, correlated over the unordered
/// feature pairs. Zero-norm identity rows are excluded and listed.
#[derive(Clone, Debug)]
pub struct StructureReport {
    /// `[F,F]` cosine similarity; excluded rows carry NaN off-diagonal.
    pub similarity: Tensor,
    /// `[F,F]` Euclidean distances between stations.
    pub distance: Tensor,
    /// Correlation of similarity vs. distance over included pairs.
    pub pearson: Pearson,
    /// Features whose identity row had zero norm.
    pub excluded: Vec<usize>,
}

/// Correlates identity-embedding cosine similarity with station distance.
pub fn embedding_structure(table: &Tensor, coords: &[(f64, f64)]) -> Result<StructureReport, TensorError> {
    if table.ndim() != 2 {
        return Err(TensorError::shape(
            "embedding_structure",
            format!("expected [F,d_f] identity table, got {:?}", table.shape()),
        ));
    }
    let f = table.shape()[0];
    let d = table.shape()[1];
    if coords.len() != f {
        return Err(TensorError::shape(
            "embedding_structure",
            format!("{} coordinates for {} features", coords.len(), f),
        ));
    }
    let norms: Vec<f64> = (0..f)
        .map(|i| (0..d).map(|c| table.at(&[i, c]).powi(2)).sum::<f64>().sqrt())
        .collect();
    let excluded: Vec<usize> = (0..f).filter(|&i| norms[i] == 0.0).collect();

    let mut sim = vec![f64::NAN; f * f];
    let mut dist = vec![0.0; f * f];
    let mut sim_points = Vec::new();
    let mut dist_points = Vec::new();
    for i in 0..f {
        sim[i * f + i] = 1.0;
        for j in 0..f {
            dist[i * f + j] = euclid(coords[i], coords[j]);
        }
        for j in i + 1..f {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..d {
                dot += table.at(&[i, c]) * table.at(&[j, c]);
            }
            let s = dot / (norms[i] * norms[j]);
            sim[i * f + j] = s;
            sim[j * f + i] = s;
            sim_points.push(s);
            dist_points.push(dist[i * f + j]);
        }
    }
    Ok(StructureReport {
        similarity: Tensor::new(vec![f, f], sim)?,
        distance: Tensor::new(vec![f, f], dist)?,
        pearson: pearson(&sim_points, &dist_points),
        excluded,
    })
}

/// Proximity transform used by the attention analysis: exp(-dist / median
/// pairwise dist). Coincident stations (median 0) degenerate to all-1.
pub fn proximity_matrix(coords: &[(f64, f64)]) -> Vec<f64> {
    let f = coords.len();
    let mut pair_dists = Vec::new();
    for i in 0..f {
        for j in i + 1..f {
            pair_dists.push(euclid(coords[i], coords[j]));
        }
    }
    pair_dists.sort_by(f64::total_cmp);
    let median = if pair_dists.is_empty() {
        1.0
    } else {
        let n = pair_dists.len();
        if n % 2 == 1 { pair_dists[n / 2] } else { (pair_dists[n / 2 - 1] + pair_dists[n / 2]) / 2.0 }
    };
    let scale = if median > 0.0 { median } else { 1.0 };
    let mut prox = vec![0.0; f * f];
    for i in 0..f {
        for j in 0..f {
            prox[i * f + j] = (-euclid(coords[i], coords[j]) / scale).exp();
        }
    }
    prox
}

/// Averages the feature-axis attention matrices per layer across a set of
/// forward-pass records (e.g. one record per evaluation batch). Every record
/// must share the same layer structure and feature count.
pub fn layer_feature_attention(records: &[AttentionRecord]) -> Result<Vec<Vec<f64>>, TensorError> {
    let first = records
        .first()
        .ok_or_else(|| TensorError::contract("layer_feature_attention", "no attention records supplied"))?;
    let n_layers = first.layers.len();
    let mut per_layer: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut counts = vec![0usize; n_layers];
    for record in records {
        if record.layers.len() != n_layers {
            return Err(TensorError::contract(
                "layer_feature_attention",
                format!("record has {} layers, expected {}", record.layers.len(), n_layers),
            ));
        }
        for (l, _) in record.layers.iter().enumerate() {
            for mat in record.feature_matrices(l) {
                let flat = &mat.probs;
                match per_layer.get_mut(l) {
                    Some(acc) if acc.len() == flat.len() => {
                        for (a, &v) in acc.iter_mut().zip(flat) {
                            *a += v;
                        }
                    }
                    Some(acc) => {
                        return Err(TensorError::contract(
                            "layer_feature_attention",
                            format!("matrix size {} does not match accumulated {}", flat.len(), acc.len()),
                        ));
                    }
                    None => {
                        while per_layer.len() < l {
                            per_layer.push(Vec::new());
                        }
                        per_layer.push(flat.clone());
                    }
                }
                counts[l] += 1;
            }
        }
    }
    for (l, acc) in per_layer.iter_mut().enumerate() {
        if counts[l] == 0 {
            return Err(TensorError::contract(
                "layer_feature_attention",
                format!("layer {} has no feature-axis records", l),
            ));
        }
        for a in acc.iter_mut() {
            *a /= counts[l] as f64;
        }
    }
    if per_layer.len() != n_layers {
        return Err(TensorError::contract(
            "layer_feature_attention",
            "some layers produced no feature-axis records",
        ));
    }
    Ok(per_layer)
}

/// Per-layer Pearson r between off-diagonal feature-attention weights and
/// station proximity. Uniform attention has zero variance and comes back
/// flagged degenerate.
pub fn attention_structure(
    per_layer: &[Vec<f64>],
    coords: &[(f64, f64)],
) -> Result<Vec<Pearson>, TensorError> {
    let f = coords.len();
    let prox = proximity_matrix(coords);
    let mut out = Vec::with_capacity(per_layer.len());
    for (l, mat) in per_layer.iter().enumerate() {
        if mat.len() != f * f {
            return Err(TensorError::shape(
                "attention_structure",
                format!("layer {} matrix has {} entries, expected {}", l, mat.len(), f * f),
            ));
        }
        let mut weights = Vec::with_capacity(f * (f - 1));
        let mut proxs = Vec::with_capacity(f * (f - 1));
        for i in 0..f {
            for j in 0..f {
                if i == j {
                    continue;
                }
                weights.push(mat[i * f + j]);
                proxs.push(prox[i * f + j]);
            }
        }
        out.push(pearson(&weights, &proxs));
    }
    Ok(out)
}

/// One gap-length bucket of the error curve.
#[derive(Clone, Debug)]
pub struct GapBucket {
    pub label: &'static str,
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    /// NaN when the bucket is empty.
    pub mae: f64,
}

const GAP_BUCKETS: [(&str, usize, usize); 4] =
    [("1-2", 1, 2), ("3-5", 3, 5), ("6-10", 6, 10), ("11+", 11, usize::MAX)];

/// MAE bucketed by the length of the contiguous per-feature hidden run each
/// evaluation entry belongs to. Accepts `[T,F]` or `[N,T,F]`; runs never
/// cross window boundaries.
pub fn gap_length_curve(
    truth: &Tensor,
    pred: &Tensor,
    eval_mask: &Tensor,
) -> Result<Vec<GapBucket>, TensorError> {
    if truth.shape() != pred.shape() || truth.shape() != eval_mask.shape() {
        return Err(TensorError::shape(
            "gap_length_curve",
            format!(
                "truth {:?}, prediction {:?}, mask {:?} must agree",
                truth.shape(),
                pred.shape(),
                eval_mask.shape()
            ),
        ));
    }
    let (n_win, t_len, f) = match *truth.shape() {
        [t, f] => (1, t, f),
        [n, t, f] => (n, t, f),
        _ => {
            return Err(TensorError::shape(
                "gap_length_curve",
                format!("expected [T,F] or [N,T,F], got {:?}", truth.shape()),
            ))
        }
    };
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for w in 0..n_win {
        for c in 0..f {
            let mut t = 0;
            while t < t_len {
                let idx = |tt: usize| (w * t_len + tt) * f + c;
                if eval_mask.data()[idx(t)] != 1.0 {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < t_len && eval_mask.data()[idx(t)] == 1.0 {
                    t += 1;
                }
                let run = t - start;
                let bucket = GAP_BUCKETS
                    .iter()
                    .position(|&(_, lo, hi)| run >= lo && run <= hi)
                    .expect("buckets cover all positive lengths");
                for tt in start..start + run {
                    sums[bucket] += (pred.data()[idx(tt)] - truth.data()[idx(tt)]).abs();
                    counts[bucket] += 1;
                }
            }
        }
    }
    Ok(GAP_BUCKETS
        .iter()
        .zip(sums.iter().zip(counts.iter()))
        .map(|(&(label, lo, hi), (&s, &n))| GapBucket {
            label,
            lo,
            hi,
            n,
            mae: if n > 0 { s / n as f64 } else { f64::NAN },
        })
        .collect())
}

/// Per-feature maximum absolute correlation with any other feature, over
/// reference-split timesteps where both features are observed. Pairs with
/// fewer than two complete samples or zero variance contribute nothing.
pub fn feature_max_correlation(values: &Tensor, mask: &Tensor) -> Result<Vec<f64>, TensorError> {
    if values.ndim() != 2 || mask.shape() != values.shape() {
        return Err(TensorError::shape(
            "feature_max_correlation",
            format!("expected matching [T,F] tensors, got {:?} and {:?}", values.shape(), mask.shape()),
        ));
    }
    let (t_len, f) = (values.shape()[0], values.shape()[1]);
    let mut best = vec![0.0; f];
    for a in 0..f {
        for b in a + 1..f {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for t in 0..t_len {
                if mask.at(&[t, a]) == 1.0 && mask.at(&[t, b]) == 1.0 {
                    xs.push(values.at(&[t, a]));
                    ys.push(values.at(&[t, b]));
                }
            }
            let p = pearson(&xs, &ys);
            if p.degenerate {
                continue;
            }
            let r = p.r.abs();
            if r > best[a] {
                best[a] = r;
            }
            if r > best[b] {
                best[b] = r;
            }
        }
    }
    Ok(best)
}

/// One tercile of features grouped by cross-feature correlation strength.
#[derive(Clone, Debug)]
pub struct CorrelationBin {
    /// Range of max-|r| values landing in this tercile.
    pub lo: f64,
    pub hi: f64,
    pub features: Vec<usize>,
    pub n: usize,
    pub model_mae: f64,
    pub baseline_mae: f64,
    /// (baseline - model) / baseline; 0 when the two agree, NaN when the
    /// baseline is exactly 0 but the model is not.
    pub improvement: f64,
}

/// Buckets features into correlation terciles and compares model vs.
/// baseline MAE within each bucket. `truth`/predictions/mask accept `[T,F]`
/// or `[N,T,F]`; `max_corr` comes from [`feature_max_correlation`].
pub fn correlation_bin_curve(
    truth: &Tensor,
    model_pred: &Tensor,
    baseline_pred: &Tensor,
    eval_mask: &Tensor,
    max_corr: &[f64],
) -> Result<Vec<CorrelationBin>, TensorError> {
    if truth.shape() != model_pred.shape()
        || truth.shape() != baseline_pred.shape()
        || truth.shape() != eval_mask.shape()
    {
        return Err(TensorError::shape(
            "correlation_bin_curve",
            "truth, predictions, and mask must share a shape".to_string(),
        ));
    }
    let f = *truth
        .shape()
        .last()
        .ok_or_else(|| TensorError::shape("correlation_bin_curve", "scalar input".to_string()))?;
    if f < 2 {
        return Err(TensorError::contract(
            "correlation_bin_curve",
            "needs at least 2 features to bin by correlation",
        ));
    }
    if max_corr.len() != f {
        return Err(TensorError::shape(
            "correlation_bin_curve",
            format!("{} correlations for {} features", max_corr.len(), f),
        ));
    }
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| max_corr[a].total_cmp(&max_corr[b]).then(a.cmp(&b)));
    let rows = truth.numel() / f;
    let mut bins = Vec::with_capacity(3);
    for tercile in 0..3 {
        let lo_idx = tercile * f / 3;
        let hi_idx = (tercile + 1) * f / 3;
        let features: Vec<usize> = order[lo_idx..hi_idx].to_vec();
        let mut n = 0usize;
        let mut model_sum = 0.0;
        let mut base_sum = 0.0;
        for r in 0..rows {
            for &c in &features {
                let idx = r * f + c;
                if eval_mask.data()[idx] != 1.0 {
                    continue;
                }
                model_sum += (model_pred.data()[idx] - truth.data()[idx]).abs();
                base_sum += (baseline_pred.data()[idx] - truth.data()[idx]).abs();
                n += 1;
            }
        }
        let model_mae = if n > 0 { model_sum / n as f64 } else { f64::NAN };
        let baseline_mae = if n > 0 { base_sum / n as f64 } else { f64::NAN };
        let improvement = if n == 0 {
            f64::NAN
        } else if model_sum == base_sum {
            0.0
        } else if base_sum == 0.0 {
            f64::NAN
        } else {
            (baseline_mae - model_mae) / baseline_mae
        };
        bins.push(CorrelationBin {
            lo: features.iter().map(|&c| max_corr[c]).fold(f64::INFINITY, f64::min),
            hi: features.iter().map(|&c| max_corr[c]).fold(f64::NEG_INFINITY, f64::max),
            features,
            n,
            model_mae,
            baseline_mae,
            improvement,
        });
    }
    Ok(bins)
}
