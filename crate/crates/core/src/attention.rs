//! Multi-head attention over one axis of a `[B,T,F,d]` state.
//!
//! Temporal attention treats every (batch, feature) pair as an independent
//! sequence of T steps; feature attention treats every (batch, step) pair as
//! an unordered set of F tokens. Both share the same scaled dot-product core
//! with a post-norm residual: y = LayerNorm(x + MHA(x)).

use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;

/// Which axis the attention mixes; the other axes act as batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Temporal,
    Feature,
}

/// Weights of one attention block: q/k/v/output projections (each d -> d,
/// split into heads of width d/H) plus the post-residual LayerNorm affine.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| crate::rng::uniform(rng, -limit, limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

impl AttentionParams {
    /// Draws the four projections Xavier-uniform in field order; biases start
    /// at zero and the LayerNorm affine at identity.
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: xavier_uniform(rng, d, d),
            bq: Tensor::zeros(vec![d]),
            wk: xavier_uniform(rng, d, d),
            bk: Tensor::zeros(vec![d]),
            wv: xavier_uniform(rng, d, d),
            bv: Tensor::zeros(vec![d]),
            wo: xavier_uniform(rng, d, d),
            bo: Tensor::zeros(vec![d]),
            ln_g: Tensor::filled(vec![d], 1.0),
            ln_b: Tensor::zeros(vec![d]),
        }
    }

    /// Visits every weight with a stable name, in the same order for all
    /// enumeration, binding, and serialization paths.
    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        for (name, t) in self.fields() {
            f(format!("{}.{}", prefix, name), t);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        let pairs: [(&str, &mut Tensor); 10] = [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln_g", &mut self.ln_g),
            ("ln_b", &mut self.ln_b),
        ];
        for (name, t) in pairs {
            f(format!("{}.{}", prefix, name), t);
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln_g", &self.ln_g),
            ("ln_b", &self.ln_b),
        ]
    }
}

/// Tape ids of one bound attention block.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln_g: TensorId,
    pub ln_b: TensorId,
}

impl BoundAttention {
    /// Consumes ten ids from the iterator, in [`AttentionParams::for_each`] order.
    pub fn from_ids(ids: &mut impl Iterator<Item = TensorId>) -> Option<Self> {
        Some(BoundAttention {
            wq: ids.next()?,
            bq: ids.next()?,
            wk: ids.next()?,
            bk: ids.next()?,
            wv: ids.next()?,
            bv: ids.next()?,
            wo: ids.next()?,
            bo: ids.next()?,
            ln_g: ids.next()?,
            ln_b: ids.next()?,
        })
    }
}

/// One recorded attention distribution: the probability matrix of a single
/// call, averaged over batch slices and heads. Row-major `size` x `size`.
#[derive(Clone, Debug)]
pub struct RecordedAttention {
    pub axis: Axis,
    pub size: usize,
    pub probs: Vec<f64>,
}

/// Scaled dot-product multi-head attention over `axis`, with dropout on the
/// attention probabilities, a residual connection, and post-norm LayerNorm.
///
/// Returns the `[B,T,F,d]` output and, when `record` is set, the attention
/// probabilities (pre-dropout) averaged over batch and heads.
///
/// In eval mode the feature-axis probability-times-value contraction uses the
/// canonical value-ordered summation, which makes the whole call bit-exact
/// under a permutation of the feature axis.
#[allow(clippy::too_many_arguments)]
pub fn axis_attention(
    tape: &mut Tape,
    h: TensorId,
    axis: Axis,
    p: &BoundAttention,
    n_heads: usize,
    dropout_p: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<(TensorId, Option<RecordedAttention>), TensorError> {
    let shape = tape.value(h).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::shape(
            "axis_attention",
            format!("expected [B,T,F,d], got {:?}", shape),
        ));
    }
    let (b, t_len, f, d) = (shape[0], shape[1], shape[2], shape[3]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::invalid(
            "axis_attention",
            format!("head count {} must divide width {}", n_heads, d),
        ));
    }
    let d_k = d / n_heads;
    let (n, s) = match axis {
        Axis::Temporal => (b * f, t_len),
        Axis::Feature => (b * t_len, f),
    };

    // fold the passive axis into the batch dimension
    let x = match axis {
        Axis::Temporal => {
            let p = tape.permute(h, &[0, 2, 1, 3])?;
            tape.reshape(p, vec![n, s, d])?
        }
        Axis::Feature => tape.reshape(h, vec![n, s, d])?,
    };
    let flat = tape.reshape(x, vec![n * s, d])?;

    // the training path contracts heads in place; eval splits them out so the
    // feature-axis contraction below can use the canonical-order kernel
    let fused = mode == Mode::Train;
    let split_heads = |tape: &mut Tape, y: TensorId| -> Result<TensorId, TensorError> {
        if fused {
            return tape.reshape(y, vec![n, s, d]);
        }
        let y = tape.reshape(y, vec![n, s, n_heads, d_k])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        tape.reshape(y, vec![n * n_heads, s, d_k])
    };
    let q = tape.linear(flat, p.wq, p.bq)?;
    let q = split_heads(tape, q)?;
    let k = tape.linear(flat, p.wk, p.bk)?;
    let k = split_heads(tape, k)?;
    let v = tape.linear(flat, p.wv, p.bv)?;
    let v = split_heads(tape, v)?;

    let scores = if fused { tape.scores_heads(q, k, n_heads)? } else { tape.matmul_nt(q, k)? };
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    // canonical row sums are an eval-mode guarantee; training keeps the
    // cheaper fixed-order reduction, which is still deterministic
    let probs = if mode == Mode::Eval {
        tape.softmax_last(scaled)?
    } else {
        tape.softmax_last_seq(scaled)?
    };

    let recorded = if record {
        let raw = tape.value(probs).data();
        let slices = n * n_heads;
        let mut avg = vec![0.0; s * s];
        for sl in 0..slices {
            let base = sl * s * s;
            for cell in 0..s * s {
                avg[cell] += raw[base + cell];
            }
        }
        for cell in avg.iter_mut() {
            *cell /= slices as f64;
        }
        Some(RecordedAttention { axis, size: s, probs: avg })
    } else {
        None
    };

    let kept = tape.dropout(probs, dropout_p, mode, rng)?;
    let ctx = if fused {
        let ctx = tape.ctx_heads(kept, v, n_heads)?;
        tape.reshape(ctx, vec![n * s, d])?
    } else {
        let ctx = if axis == Axis::Feature {
            tape.matmul_canonical(kept, v)?
        } else {
            tape.matmul(kept, v)?
        };
        let ctx = tape.reshape(ctx, vec![n, n_heads, s, d_k])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        tape.reshape(ctx, vec![n * s, d])?
    };
    let out = tape.linear(ctx, p.wo, p.bo)?;

    let res = tape.add(flat, out)?;
    let y = tape.layer_norm(res, p.ln_g, p.ln_b)?;

    let y = match axis {
        Axis::Temporal => {
            let y = tape.reshape(y, vec![b, f, t_len, d])?;
            tape.permute(y, &[0, 2, 1, 3])?
        }
        Axis::Feature => tape.reshape(y, vec![b, t_len, f, d])?,
    };
    Ok((y, recorded))
}
