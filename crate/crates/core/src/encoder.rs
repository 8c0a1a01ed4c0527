//! Encoder layers and multi-level fusion.
//!
//! The standard layer runs temporal and feature attention in parallel on the
//! incoming state, then crosses the two results (feature attention over the
//! temporal output and vice versa) and averages all four branches. A serial
//! alternative chains temporal, feature, temporal attention instead. Fusion
//! averages the input projection together with every branch of every layer,
//! optionally replacing the uniform average with learned per-token weights.

use crate::attention::{axis_attention, Axis, BoundAttention, RecordedAttention};
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::TensorError;
use rand_chacha::ChaCha8Rng;

/// Tape ids for one layer: the stage-1 attention pair plus an optional
/// distinct stage-2 pair. When the stage-2 ids are absent the cross stage
/// reuses the stage-1 weights.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub temporal: BoundAttention,
    pub feature: BoundAttention,
    pub temporal2: Option<BoundAttention>,
    pub feature2: Option<BoundAttention>,
}

/// Branch outputs of one layer, in computation order, plus their fusion.
/// The standard layer yields [temporal, feature, cross-feature, cross-temporal]
/// with `fused` their average; the serial layer yields its three chained
/// outputs with `fused` equal to the last.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub branches: Vec<TensorId>,
    pub fused: TensorId,
}

/// Attention matrices recorded during one forward pass: one entry per
/// attention call, grouped by layer, in call order.
#[derive(Clone, Debug, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<RecordedAttention>>,
}

impl AttentionRecord {
    /// All feature-axis matrices of one layer, in call order.
    pub fn feature_matrices(&self, layer: usize) -> Vec<&RecordedAttention> {
        self.layers[layer].iter().filter(|r| r.axis == Axis::Feature).collect()
    }

    /// The first feature-axis call of a layer, i.e. the one applied directly
    /// to that layer's input state.
    pub fn stage1_feature(&self, layer: usize) -> Option<&RecordedAttention> {
        self.layers[layer].iter().find(|r| r.axis == Axis::Feature)
    }

    pub fn temporal_matrices(&self, layer: usize) -> Vec<&RecordedAttention> {
        self.layers[layer].iter().filter(|r| r.axis == Axis::Temporal).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn attend(
    tape: &mut Tape,
    h: TensorId,
    axis: Axis,
    p: &BoundAttention,
    n_heads: usize,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    records: &mut Option<Vec<RecordedAttention>>,
) -> Result<TensorId, TensorError> {
    let (out, rec) =
        axis_attention(tape, h, axis, p, n_heads, dropout_p, mode, rng, records.is_some())?;
    if let (Some(buf), Some(rec)) = (records.as_mut(), rec) {
        buf.push(rec);
    }
    Ok(out)
}

/// One double-attention layer: parallel temporal/feature attention on the
/// input, then the crossed pair, averaged into the layer output.
///
/// Attention calls happen in a fixed order (temporal, feature, cross-feature,
/// cross-temporal), so dropout draws are reproducible for a given stream.
#[allow(clippy::too_many_arguments)]
pub fn helix_layer(
    tape: &mut Tape,
    h_prev: TensorId,
    layer: &BoundLayer,
    n_heads: usize,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<(LayerTrace, Vec<RecordedAttention>), TensorError> {
    let mut records = if record { Some(Vec::new()) } else { None };
    let h_t = attend(tape, h_prev, Axis::Temporal, &layer.temporal, n_heads, dropout_p, mode, rng, &mut records)?;
    let h_f = attend(tape, h_prev, Axis::Feature, &layer.feature, n_heads, dropout_p, mode, rng, &mut records)?;
    let f2 = layer.feature2.as_ref().unwrap_or(&layer.feature);
    let t2 = layer.temporal2.as_ref().unwrap_or(&layer.temporal);
    let h_tf = attend(tape, h_t, Axis::Feature, f2, n_heads, dropout_p, mode, rng, &mut records)?;
    let h_ft = attend(tape, h_f, Axis::Temporal, t2, n_heads, dropout_p, mode, rng, &mut records)?;
    let s1 = tape.add(h_t, h_f)?;
    let s2 = tape.add(h_tf, h_ft)?;
    let sum = tape.add(s1, s2)?;
    let fused = tape.scale(sum, 0.25)?;
    Ok((
        LayerTrace { branches: vec![h_t, h_f, h_tf, h_ft], fused },
        records.unwrap_or_default(),
    ))
}

/// Serial layer: temporal, feature, then temporal attention chained, the
/// temporal calls sharing one parameter set. All three intermediate outputs
/// are kept as branches; the layer output is the final one.
#[allow(clippy::too_many_arguments)]
pub fn serial_layer(
    tape: &mut Tape,
    h_prev: TensorId,
    layer: &BoundLayer,
    n_heads: usize,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<(LayerTrace, Vec<RecordedAttention>), TensorError> {
    let mut records = if record { Some(Vec::new()) } else { None };
    let h1 = attend(tape, h_prev, Axis::Temporal, &layer.temporal, n_heads, dropout_p, mode, rng, &mut records)?;
    let h2 = attend(tape, h1, Axis::Feature, &layer.feature, n_heads, dropout_p, mode, rng, &mut records)?;
    let h3 = attend(tape, h2, Axis::Temporal, &layer.temporal, n_heads, dropout_p, mode, rng, &mut records)?;
    Ok((
        LayerTrace { branches: vec![h1, h2, h3], fused: h3 },
        records.unwrap_or_default(),
    ))
}

/// Uniform average of the input projection and every branch of every layer.
/// With B branches per layer and L layers the divisor is 1 + B*L.
pub fn multi_level_fusion(
    tape: &mut Tape,
    h0: TensorId,
    traces: &[LayerTrace],
) -> Result<TensorId, TensorError> {
    if traces.is_empty() {
        return Err(TensorError::contract("multi_level_fusion", "at least one layer trace required"));
    }
    let mut acc = h0;
    let mut count = 1usize;
    for trace in traces {
        for &branch in &trace.branches {
            acc = tape.add(acc, branch)?;
            count += 1;
        }
    }
    tape.scale(acc, 1.0 / count as f64)
}

/// Learned fusion: per-token softmax weights over the same candidates the
/// uniform average uses. The gate maps the concatenation of all K candidates
/// (width K*d) to K logits; a zero gate reproduces the uniform average.
pub fn gated_fusion(
    tape: &mut Tape,
    h0: TensorId,
    traces: &[LayerTrace],
    gate_w: TensorId,
) -> Result<TensorId, TensorError> {
    if traces.is_empty() {
        return Err(TensorError::contract("gated_fusion", "at least one layer trace required"));
    }
    let mut candidates = vec![h0];
    for trace in traces {
        candidates.extend(trace.branches.iter().copied());
    }
    let k = candidates.len();
    let shape = tape.value(h0).shape().to_vec();
    let d = shape[3];
    let rows = shape[0] * shape[1] * shape[2];
    let gate_shape = tape.value(gate_w).shape().to_vec();
    if gate_shape != [k * d, k] {
        return Err(TensorError::shape(
            "gated_fusion",
            format!("gate must be [{}, {}] for {} candidates of width {}, got {:?}", k * d, k, k, d, gate_shape),
        ));
    }
    let concat = tape.concat_last(&candidates)?;
    let flat = tape.reshape(concat, vec![rows, k * d])?;
    let logits = tape.matmul(flat, gate_w)?;
    let weights = tape.softmax_last(logits)?;
    let mut acc: Option<TensorId> = None;
    for (i, &cand) in candidates.iter().enumerate() {
        let w_i = tape.slice_last(weights, i, 1)?;
        let w_i = tape.expand(w_i, vec![rows, d])?;
        let cand_flat = tape.reshape(cand, vec![rows, d])?;
        let term = tape.mul(w_i, cand_flat)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    tape.reshape(acc.expect("k >= 1"), shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionParams;
    use crate::rng::{stream, uniform, StreamKind};
    use crate::tensor::Tensor;

    fn bind_layer(tape: &mut Tape, d: usize, seed: u64) -> BoundLayer {
        let mut rng = stream(seed, StreamKind::Init, 0);
        let t = AttentionParams::init(d, &mut rng);
        let f = AttentionParams::init(d, &mut rng);
        let mut bind_one = |p: &AttentionParams| {
            let mut ids = Vec::new();
            p.for_each("x", &mut |_, t| ids.push(tape.param(t)));
            BoundAttention::from_ids(&mut ids.into_iter()).unwrap()
        };
        BoundLayer {
            temporal: bind_one(&t),
            feature: bind_one(&f),
            temporal2: None,
            feature2: None,
        }
    }

    fn random_state(tape: &mut Tape, b: usize, t: usize, f: usize, d: usize, seed: u64) -> TensorId {
        let mut rng = stream(seed, StreamKind::Data, 0);
        let data = (0..b * t * f * d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        tape.constant(Tensor::new(vec![b, t, f, d], data).unwrap())
    }

    #[test]
    fn layer_output_is_mean_of_branches() {
        let d = 8;
        let mut tape = Tape::new();
        let h = random_state(&mut tape, 2, 4, 3, d, 21);
        let layer = bind_layer(&mut tape, d, 31);
        let mut rng = stream(1, StreamKind::Dropout, 0);
        let (trace, recs) =
            helix_layer(&mut tape, h, &layer, 2, 0.0, Mode::Eval, &mut rng, true).unwrap();
        assert_eq!(trace.branches.len(), 4);
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[0].axis, Axis::Temporal);
        assert_eq!(recs[1].axis, Axis::Feature);
        assert_eq!(recs[2].axis, Axis::Feature);
        assert_eq!(recs[3].axis, Axis::Temporal);
        let fused = tape.value(trace.fused).data();
        let branches: Vec<&[f64]> = trace.branches.iter().map(|&b| tape.value(b).data()).collect();
        for i in 0..fused.len() {
            let mean = (branches[0][i] + branches[1][i] + branches[2][i] + branches[3][i]) / 4.0;
            assert!((fused[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn serial_layer_keeps_three_branches() {
        let d = 6;
        let mut tape = Tape::new();
        let h = random_state(&mut tape, 1, 3, 2, d, 22);
        let layer = bind_layer(&mut tape, d, 32);
        let mut rng = stream(2, StreamKind::Dropout, 0);
        let (trace, recs) =
            serial_layer(&mut tape, h, &layer, 2, 0.0, Mode::Eval, &mut rng, true).unwrap();
        assert_eq!(trace.branches.len(), 3);
        assert_eq!(trace.fused, trace.branches[2]);
        let axes: Vec<Axis> = recs.iter().map(|r| r.axis).collect();
        assert_eq!(axes, vec![Axis::Temporal, Axis::Feature, Axis::Temporal]);
    }

    #[test]
    fn degenerate_single_token_axes_run() {
        let d = 4;
        for variant in ["helix", "serial"] {
            let mut tape = Tape::new();
            let h = random_state(&mut tape, 1, 1, 1, d, 23);
            let layer = bind_layer(&mut tape, d, 33);
            let mut rng = stream(3, StreamKind::Dropout, 0);
            let (trace, _) = match variant {
                "helix" => helix_layer(&mut tape, h, &layer, 2, 0.0, Mode::Eval, &mut rng, false).unwrap(),
                _ => serial_layer(&mut tape, h, &layer, 2, 0.0, Mode::Eval, &mut rng, false).unwrap(),
            };
            let out = tape.value(trace.fused);
            assert_eq!(out.shape(), &[1, 1, 1, d]);
            assert!(out.all_finite());
        }
    }

    fn constant_trace(tape: &mut Tape, shape: &[usize], values: &[f64]) -> Vec<TensorId> {
        values
            .iter()
            .map(|&v| tape.constant(Tensor::filled(shape.to_vec(), v)))
            .collect()
    }

    #[test]
    fn fusion_divides_by_one_plus_branch_count() {
        let shape = [1usize, 2, 2, 3];
        // two layers of four branches: divisor 9
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::filled(shape.to_vec(), 9.0));
        let b1 = constant_trace(&mut tape, &shape, &[1.0, 2.0, 3.0, 4.0]);
        let b2 = constant_trace(&mut tape, &shape, &[5.0, 6.0, 7.0, 8.0]);
        let traces = vec![
            LayerTrace { branches: b1.clone(), fused: b1[3] },
            LayerTrace { branches: b2.clone(), fused: b2[3] },
        ];
        let fused = multi_level_fusion(&mut tape, h0, &traces).unwrap();
        let want = (9.0 + (1..=8).sum::<i32>() as f64) / 9.0;
        for &v in tape.value(fused).data() {
            assert!((v - want).abs() < 1e-12);
        }
        // two serial layers of three branches: divisor 7
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::filled(shape.to_vec(), 7.0));
        let b1 = constant_trace(&mut tape, &shape, &[1.0, 2.0, 3.0]);
        let b2 = constant_trace(&mut tape, &shape, &[4.0, 5.0, 6.0]);
        let traces = vec![
            LayerTrace { branches: b1.clone(), fused: b1[2] },
            LayerTrace { branches: b2.clone(), fused: b2[2] },
        ];
        let fused = multi_level_fusion(&mut tape, h0, &traces).unwrap();
        let want = (7.0 + 21.0) / 7.0;
        for &v in tape.value(fused).data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_stack_mean_oracle() {
        let shape = [2usize, 3, 2, 4];
        let n: usize = shape.iter().product();
        let mut rng = stream(24, StreamKind::Data, 0);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, rng: &mut _| {
            let data: Vec<f64> = (0..n).map(|_| uniform(rng, -2.0, 2.0)).collect();
            tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
        };
        let h0 = mk(&mut tape, &mut rng);
        let branches: Vec<TensorId> = (0..4).map(|_| mk(&mut tape, &mut rng)).collect();
        let traces = vec![LayerTrace { branches: branches.clone(), fused: branches[0] }];
        let fused = multi_level_fusion(&mut tape, h0, &traces).unwrap();
        // independent oracle: stack all five tensors and average index-wise
        let mut stacked = vec![Vec::with_capacity(5); n];
        for &id in std::iter::once(&h0).chain(&branches) {
            for (i, &v) in tape.value(id).data().iter().enumerate() {
                stacked[i].push(v);
            }
        }
        let got = tape.value(fused).data();
        for i in 0..n {
            let mean: f64 = stacked[i].iter().sum::<f64>() / 5.0;
            assert!((got[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_empty_traces() {
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::filled(vec![1, 1, 1, 2], 1.0));
        assert!(multi_level_fusion(&mut tape, h0, &[]).is_err());
        let gate = tape.constant(Tensor::zeros(vec![2, 1]));
        assert!(gated_fusion(&mut tape, h0, &[], gate).is_err());
    }

    #[test]
    fn zero_gate_reproduces_uniform_fusion() {
        let shape = [1usize, 2, 3, 4];
        let n: usize = shape.iter().product();
        let d = shape[3];
        let mut rng = stream(25, StreamKind::Data, 0);
        let mut tape = Tape::new();
        let mk = |tape: &mut Tape, rng: &mut _| {
            let data: Vec<f64> = (0..n).map(|_| uniform(rng, -2.0, 2.0)).collect();
            tape.constant(Tensor::new(shape.to_vec(), data).unwrap())
        };
        let h0 = mk(&mut tape, &mut rng);
        let branches: Vec<TensorId> = (0..4).map(|_| mk(&mut tape, &mut rng)).collect();
        let traces = vec![LayerTrace { branches, fused: h0 }];
        let k = 5;
        let gate = tape.constant(Tensor::zeros(vec![k * d, k]));
        let gated = gated_fusion(&mut tape, h0, &traces, gate).unwrap();
        let uniform_out = multi_level_fusion(&mut tape, h0, &traces).unwrap();
        let a = tape.value(gated).data();
        let b = tape.value(uniform_out).data();
        for i in 0..n {
            assert!((a[i] - b[i]).abs() < 1e-12, "index {}: {} vs {}", i, a[i], b[i]);
        }
    }

    #[test]
    fn saturated_gate_selects_one_candidate() {
        let shape = [1usize, 1, 2, 3];
        let d = shape[3];
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::filled(shape.to_vec(), 1.0));
        let branches = constant_trace(&mut tape, &shape, &[2.0, 3.0, 4.0, 5.0]);
        let target = branches[0]; // candidate index 1 overall
        let traces = vec![LayerTrace { branches: branches.clone(), fused: branches[0] }];
        let k = 5;
        // drive candidate 1's logit to +40 through the all-ones h0 block
        let mut gate = Tensor::zeros(vec![k * d, k]);
        for s in 0..d {
            gate.set(&[s, 1], 40.0 / d as f64);
        }
        let gate = tape.constant(gate);
        let fused = gated_fusion(&mut tape, h0, &traces, gate).unwrap();
        let got = tape.value(fused).data();
        let want = tape.value(target).data();
        for i in 0..got.len() {
            assert!((got[i] - want[i]).abs() < 1e-10, "index {}: {} vs {}", i, got[i], want[i]);
        }
    }

    #[test]
    fn gate_weights_are_normalized() {
        // probed indirectly: fusing K copies of the same tensor must return it
        let shape = [1usize, 2, 2, 2];
        let d = shape[3];
        let mut rng = stream(26, StreamKind::Data, 0);
        let data: Vec<f64> = (0..8).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::new(shape.to_vec(), data.clone()).unwrap());
        let traces = vec![LayerTrace { branches: vec![h0, h0, h0, h0], fused: h0 }];
        let k = 5;
        let gate_data: Vec<f64> = (0..k * d * k).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let gate = tape.constant(Tensor::new(vec![k * d, k], gate_data).unwrap());
        let fused = gated_fusion(&mut tape, h0, &traces, gate).unwrap();
        let got = tape.value(fused).data();
        for i in 0..data.len() {
            assert!((got[i] - data[i]).abs() < 1e-12, "weights must sum to 1");
        }
    }

    #[test]
    fn gate_arity_mismatch_is_rejected() {
        let shape = [1usize, 1, 1, 2];
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::filled(shape.to_vec(), 1.0));
        let branches = constant_trace(&mut tape, &shape, &[1.0, 2.0, 3.0, 4.0]);
        let traces = vec![LayerTrace { branches, fused: h0 }];
        let gate = tape.constant(Tensor::zeros(vec![4, 4]));
        assert!(gated_fusion(&mut tape, h0, &traces, gate).is_err());
    }
}
