//! Reverse-mode autodiff on a Wengert tape.
//!
//! Operations compute their forward value eagerly, append a node describing
//! how to push gradients back to their inputs, and return the id of the new
//! output tensor. [`Tape::backward`] replays the nodes in reverse and
//! accumulates gradients additively, so a tensor used in several places
//! receives the sum of all contributions. Tensors with `requires_grad=false`
//! prune gradient flow: nothing is accumulated into them and subgraphs built
//! purely from them record no nodes.
//!
//! Reductions run in a fixed sequential order, which makes every result
//! bit-reproducible for a given build. Softmax row sums additionally use
//! value-ordered (canonical) summation so the result is invariant under
//! permutation of the reduced axis, as is [`Tape::matmul_canonical`].

use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a tensor recorded on a tape.
pub type TensorId = usize;

/// Whether stochastic layers (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// False when the right operand is a single matrix shared by every batch.
    b_batched: bool,
}

#[derive(Clone, Copy, Debug)]
struct HeadDims {
    n: usize,
    s: usize,
    heads: usize,
    dk: usize,
}

enum Node {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, factor: f64, out: TensorId },
    Abs { a: TensorId, out: TensorId },
    Matmul { a: TensorId, b: TensorId, out: TensorId, dims: MatmulDims },
    MatmulNT { a: TensorId, b: TensorId, out: TensorId, dims: MatmulDims },
    Linear { x: TensorId, w: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    HeadScores { q: TensorId, k: TensorId, out: TensorId, dims: HeadDims },
    HeadContext { p: TensorId, v: TensorId, out: TensorId, dims: HeadDims },
    Reshape { a: TensorId, out: TensorId },
    Permute { a: TensorId, perm: Vec<usize>, out: TensorId },
    Expand { a: TensorId, out: TensorId },
    ConcatLast { parts: Vec<TensorId>, widths: Vec<usize>, out: TensorId },
    SliceLast { a: TensorId, start: usize, len: usize, out: TensorId },
    SliceDim0 { a: TensorId, start: usize, out: TensorId },
    SoftmaxLast { a: TensorId, out: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId, mean: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: TensorId, out: TensorId, keep: Vec<f64> },
    SumAll { a: TensorId, out: TensorId },
}

/// Wengert tape: an append-only arena of tensors plus the op nodes linking
/// them. One tape records one forward pass; gradients live beside it after
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Monotone u64 key: ascending keys order exactly like `f64::total_cmp`.
#[inline]
fn total_order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    bits ^ (((bits as i64 >> 63) as u64) | 0x8000_0000_0000_0000)
}

/// Sums a buffer in ascending value order. The result depends only on the
/// multiset of values, not on their original arrangement.
pub(crate) fn canonical_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by_key(|&x| total_order_key(x));
    buf.iter().sum()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// C[m,n] += A[m,k] * B[k,n], fixed ikj order.
fn matmul_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let crow = &mut out[i * n..i * n + n];
        for kk in 0..k {
            let aik = arow[kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T; each output is a dot of two contiguous rows,
/// summed in ascending k order exactly as the untransposed form would.
fn matmul_nt_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let crow = &mut out[i * n..i * n + n];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            crow[j] = acc;
        }
    }
}

/// dA[m,k] += dC[m,n] * B[n,k] for the transposed-right product.
fn matmul_nt_backward_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..i * n + n];
        let darow = &mut da[i * k..i * k + k];
        for j in 0..n {
            let g = dcrow[j];
            let brow = &b[j * k..j * k + k];
            for kk in 0..k {
                darow[kk] += g * brow[kk];
            }
        }
    }
}

/// dB[n,k] += dC[m,n]^T * A[m,k] for the transposed-right product.
fn matmul_nt_backward_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let dcrow = &dc[i * n..i * n + n];
        for j in 0..n {
            let g = dcrow[j];
            let dbrow = &mut db[j * k..j * k + k];
            for kk in 0..k {
                dbrow[kk] += g * arow[kk];
            }
        }
    }
}

/// scores[(b*H+h), i, j] = sum_c q[b, i, h*dk+c] * k[b, j, h*dk+c].
/// Heads live interleaved in the last axis of q and k; the contraction runs
/// in ascending c order, exactly as a head-split matmul_nt would.
fn head_scores_kernel(q: &[f64], k: &[f64], out: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let qb = &q[b * s * d..(b + 1) * s * d];
        let kb = &k[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let ob = &mut out[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let qrow = &qb[i * d + h * dk..i * d + h * dk + dk];
                let orow = &mut ob[i * s..(i + 1) * s];
                for j in 0..s {
                    let krow = &kb[j * d + h * dk..j * d + h * dk + dk];
                    let mut acc = 0.0;
                    for c in 0..dk {
                        acc += qrow[c] * krow[c];
                    }
                    orow[j] = acc;
                }
            }
        }
    }
}

/// dQ[b, i, h*dk+c] += sum_j dS[(b*H+h), i, j] * k[b, j, h*dk+c], ascending j.
fn head_scores_backward_q(ds: &[f64], k: &[f64], dq: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let kb = &k[b * s * d..(b + 1) * s * d];
        let dqb = &mut dq[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let dsb = &ds[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let drow = &dsb[i * s..(i + 1) * s];
                let dqrow = &mut dqb[i * d + h * dk..i * d + h * dk + dk];
                for j in 0..s {
                    let g = drow[j];
                    let krow = &kb[j * d + h * dk..j * d + h * dk + dk];
                    for c in 0..dk {
                        dqrow[c] += g * krow[c];
                    }
                }
            }
        }
    }
}

/// dK[b, j, h*dk+c] += sum_i dS[(b*H+h), i, j] * q[b, i, h*dk+c], ascending i.
fn head_scores_backward_k(ds: &[f64], q: &[f64], dkbuf: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let qb = &q[b * s * d..(b + 1) * s * d];
        let dkb = &mut dkbuf[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let dsb = &ds[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let drow = &dsb[i * s..(i + 1) * s];
                let qrow = &qb[i * d + h * dk..i * d + h * dk + dk];
                for j in 0..s {
                    let g = drow[j];
                    let dkrow = &mut dkb[j * d + h * dk..j * d + h * dk + dk];
                    for c in 0..dk {
                        dkrow[c] += g * qrow[c];
                    }
                }
            }
        }
    }
}

/// ctx[b, i, h*dk+c] = sum_j p[(b*H+h), i, j] * v[b, j, h*dk+c], ascending j.
fn head_context_kernel(p: &[f64], v: &[f64], out: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let vb = &v[b * s * d..(b + 1) * s * d];
        let ob = &mut out[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let pb = &p[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let prow = &pb[i * s..(i + 1) * s];
                let orow = &mut ob[i * d + h * dk..i * d + h * dk + dk];
                for j in 0..s {
                    let pij = prow[j];
                    let vrow = &vb[j * d + h * dk..j * d + h * dk + dk];
                    for c in 0..dk {
                        orow[c] += pij * vrow[c];
                    }
                }
            }
        }
    }
}

/// dP[(b*H+h), i, j] += sum_c dCtx[b, i, h*dk+c] * v[b, j, h*dk+c].
fn head_context_backward_p(dctx: &[f64], v: &[f64], dp: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let vb = &v[b * s * d..(b + 1) * s * d];
        let db = &dctx[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let dpb = &mut dp[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let dorow = &db[i * d + h * dk..i * d + h * dk + dk];
                let dprow = &mut dpb[i * s..(i + 1) * s];
                for j in 0..s {
                    let vrow = &vb[j * d + h * dk..j * d + h * dk + dk];
                    let mut acc = 0.0;
                    for c in 0..dk {
                        acc += dorow[c] * vrow[c];
                    }
                    dprow[j] += acc;
                }
            }
        }
    }
}

/// dV[b, j, h*dk+c] += sum_i p[(b*H+h), i, j] * dCtx[b, i, h*dk+c], ascending i.
fn head_context_backward_v(dctx: &[f64], p: &[f64], dv: &mut [f64], dims: HeadDims) {
    let HeadDims { n, s, heads, dk } = dims;
    let d = heads * dk;
    for b in 0..n {
        let db = &dctx[b * s * d..(b + 1) * s * d];
        let dvb = &mut dv[b * s * d..(b + 1) * s * d];
        for h in 0..heads {
            let pb = &p[(b * heads + h) * s * s..(b * heads + h + 1) * s * s];
            for i in 0..s {
                let prow = &pb[i * s..(i + 1) * s];
                let dorow = &db[i * d + h * dk..i * d + h * dk + dk];
                for j in 0..s {
                    let pij = prow[j];
                    let dvrow = &mut dvb[j * d + h * dk..j * d + h * dk + dk];
                    for c in 0..dk {
                        dvrow[c] += pij * dorow[c];
                    }
                }
            }
        }
    }
}

/// C[m,n] = canonical-ordered sum of A[i,:] * B[:,j] products.
fn matmul_canonical_kernel(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    scratch: &mut Vec<f64>,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            scratch.clear();
            for (kk, &aik) in arow.iter().enumerate() {
                scratch.push(aik * b[kk * n + j]);
            }
            out[i * n + j] = canonical_sum(scratch);
        }
    }
}

/// dA[m,k] += dC[m,n] * B^T; rows of dC and B are contiguous dots.
fn matmul_backward_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..i * n + n];
        let darow = &mut da[i * k..i * k + k];
        for kk in 0..k {
            let brow = &b[kk * n..kk * n + n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dcrow[j] * brow[j];
            }
            darow[kk] += acc;
        }
    }
}

/// dB[k,n] += A^T * dC; row-contiguous axpy updates.
fn matmul_backward_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let dcrow = &dc[i * n..i * n + n];
        for kk in 0..k {
            let aik = arow[kk];
            let dbrow = &mut db[kk * n..kk * n + n];
            for j in 0..n {
                dbrow[j] += aik * dcrow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of tensors recorded so far.
    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.set_requires_grad(false);
        self.push(t)
    }

    /// Registers a copy of a parameter tensor as a differentiation target.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        let mut c = t.clone();
        c.set_requires_grad(true);
        self.push(c)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.tensors[id]
    }

    /// Gradient of the last `backward` call with respect to tensor `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, t: Tensor) -> TensorId {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn push_output(&mut self, t: Tensor, requires: bool) -> TensorId {
        let mut t = t;
        t.set_requires_grad(requires);
        self.push(t)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.tensors[id].requires_grad())
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.tensors[a].shape() != self.tensors[b].shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.tensors[a].shape(), self.tensors[b].shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.tensors[a]
            .data()
            .iter()
            .zip(self.tensors[b].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("add shape");
        let req = self.requires(&[a, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Add { a, b, out });
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.tensors[a]
            .data()
            .iter()
            .zip(self.tensors[b].data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("sub shape");
        let req = self.requires(&[a, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Sub { a, b, out });
        }
        Ok(out)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.tensors[a]
            .data()
            .iter()
            .zip(self.tensors[b].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("mul shape");
        let req = self.requires(&[a, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Mul { a, b, out });
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.tensors[a].data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("scale shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Scale { a, factor, out });
        }
        Ok(out)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let data: Vec<f64> = self.tensors[a].data().iter().map(|x| x.abs()).collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("abs shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Abs { a, out });
        }
        Ok(out)
    }

    fn resolve_matmul(&self, a: TensorId, b: TensorId) -> Result<(MatmulDims, Vec<usize>), TensorError> {
        let sa = self.tensors[a].shape();
        let sb = self.tensors[b].shape();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("operands must have >= 2 dims, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", sa, sb),
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let batch: usize = lead_a.iter().product();
        let (b_batched, out_lead) = if lead_b.is_empty() {
            (false, lead_a.to_vec())
        } else if lead_a == lead_b {
            (true, lead_a.to_vec())
        } else {
            return Err(TensorError::shape(
                "matmul",
                format!("leading batch dims must match exactly: {:?} x {:?}", sa, sb),
            ));
        };
        let mut out_shape = out_lead;
        out_shape.push(m);
        out_shape.push(n);
        Ok((MatmulDims { batch, m, k: ka, n, b_batched }, out_shape))
    }

    /// Matrix product with leading batch dimensions broadcast by equality.
    /// A 2-d right operand is shared across every batch of the left operand.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// [`Tape::matmul`] with canonical (value-ordered) summation over the
    /// contracted axis, so the output is bit-invariant under a joint
    /// permutation of that axis in both operands.
    pub fn matmul_canonical(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.matmul_impl(a, b, true)
    }

    /// A @ B^T where B is stored row-major as [..., n, k]: every output is a
    /// dot of two contiguous rows. The contraction runs in ascending k order,
    /// so the result is bit-identical to `matmul(a, permute(b, last two))`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.tensors[a].shape().to_vec();
        let sb = self.tensors[b].shape().to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape(
                "matmul_nt",
                format!("operands must have >= 2 dims, got {:?} and {:?}", sa, sb),
            ));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n, kb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(TensorError::shape(
                "matmul_nt",
                format!("inner dims disagree: {:?} x {:?}^T", sa, sb),
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let batch: usize = lead_a.iter().product();
        let b_batched = if lead_b.is_empty() {
            false
        } else if lead_a == lead_b {
            true
        } else {
            return Err(TensorError::shape(
                "matmul_nt",
                format!("leading batch dims must match exactly: {:?} x {:?}", sa, sb),
            ));
        };
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let dims = MatmulDims { batch, m, k: ka, n, b_batched };
        let mut data = vec![0.0; batch * m * n];
        let da = self.tensors[a].data();
        let db = self.tensors[b].data();
        for bi in 0..batch {
            let asl = &da[bi * m * ka..(bi + 1) * m * ka];
            let bsl = if b_batched { &db[bi * n * ka..(bi + 1) * n * ka] } else { db };
            matmul_nt_kernel(asl, bsl, &mut data[bi * m * n..(bi + 1) * m * n], m, ka, n);
        }
        let t = Tensor::new(out_shape, data).expect("matmul_nt shape");
        let req = self.requires(&[a, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::MatmulNT { a, b, out, dims });
        }
        Ok(out)
    }

    fn head_dims(&self, x: TensorId, heads: usize, op: &'static str) -> Result<HeadDims, TensorError> {
        let sx = self.tensors[x].shape();
        if sx.len() != 3 {
            return Err(TensorError::shape(op, format!("expected [n, s, d], got {:?}", sx)));
        }
        let (n, s, d) = (sx[0], sx[1], sx[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::invalid(
                op,
                format!("head count {} must divide width {}", heads, d),
            ));
        }
        Ok(HeadDims { n, s, heads, dk: d / heads })
    }

    /// Per-head attention scores without materializing split heads: q and k
    /// are [n, s, heads*dk] with heads interleaved in the last axis, and the
    /// output is [n*heads, s, s]. Bit-equal to splitting the heads out and
    /// calling [`Tape::matmul_nt`].
    pub fn scores_heads(&mut self, q: TensorId, k: TensorId, heads: usize) -> Result<TensorId, TensorError> {
        let dims = self.head_dims(q, heads, "scores_heads")?;
        if self.tensors[k].shape() != self.tensors[q].shape() {
            return Err(TensorError::shape(
                "scores_heads",
                format!("q {:?} vs k {:?}", self.tensors[q].shape(), self.tensors[k].shape()),
            ));
        }
        let mut data = vec![0.0; dims.n * dims.heads * dims.s * dims.s];
        head_scores_kernel(self.tensors[q].data(), self.tensors[k].data(), &mut data, dims);
        let t = Tensor::new(vec![dims.n * dims.heads, dims.s, dims.s], data).expect("scores shape");
        let req = self.requires(&[q, k]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::HeadScores { q, k, out, dims });
        }
        Ok(out)
    }

    /// Probability-times-value contraction that undoes the head grouping of
    /// [`Tape::scores_heads`]: p is [n*heads, s, s], v is [n, s, heads*dk],
    /// and the output is [n, s, heads*dk]. Bit-equal to the split-head matmul
    /// followed by re-interleaving.
    pub fn ctx_heads(&mut self, p: TensorId, v: TensorId, heads: usize) -> Result<TensorId, TensorError> {
        let dims = self.head_dims(v, heads, "ctx_heads")?;
        let sp = self.tensors[p].shape();
        if sp != [dims.n * heads, dims.s, dims.s] {
            return Err(TensorError::shape(
                "ctx_heads",
                format!("p {:?} does not match v {:?} with {} heads", sp, self.tensors[v].shape(), heads),
            ));
        }
        let mut data = vec![0.0; dims.n * dims.s * dims.heads * dims.dk];
        head_context_kernel(self.tensors[p].data(), self.tensors[v].data(), &mut data, dims);
        let t = Tensor::new(self.tensors[v].shape().to_vec(), data).expect("ctx shape");
        let req = self.requires(&[p, v]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::HeadContext { p, v, out, dims });
        }
        Ok(out)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, canonical: bool) -> Result<TensorId, TensorError> {
        let (dims, out_shape) = self.resolve_matmul(a, b)?;
        let MatmulDims { batch, m, k, n, b_batched } = dims;
        let mut data = vec![0.0; batch * m * n];
        let da = self.tensors[a].data();
        let db = self.tensors[b].data();
        let mut scratch = Vec::with_capacity(k);
        for bi in 0..batch {
            let asl = &da[bi * m * k..(bi + 1) * m * k];
            let bsl = if b_batched { &db[bi * k * n..(bi + 1) * k * n] } else { db };
            let osl = &mut data[bi * m * n..(bi + 1) * m * n];
            if canonical {
                matmul_canonical_kernel(asl, bsl, osl, m, k, n, &mut scratch);
            } else {
                matmul_accum(asl, bsl, osl, m, k, n);
            }
        }
        let t = Tensor::new(out_shape, data).expect("matmul shape");
        let req = self.requires(&[a, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Matmul { a, b, out, dims });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let t = self.tensors[a].reshaped(shape)?;
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Reshape { a, out });
        }
        Ok(out)
    }

    /// Axis permutation; `perm[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let shape = self.tensors[a].shape().to_vec();
        if perm.len() != shape.len() {
            return Err(TensorError::shape(
                "permute",
                format!("perm {:?} does not match shape {:?}", perm, shape),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(TensorError::invalid("permute", format!("{:?} is not a permutation", perm)));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides_of(&shape);
        let maps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = vec![0.0; self.tensors[a].numel()];
        odometer_copy(self.tensors[a].data(), &mut data, &out_shape, &maps, CopyDir::Gather);
        let t = Tensor::new(out_shape, data).expect("permute shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Permute { a, perm: perm.to_vec(), out });
        }
        Ok(out)
    }

    /// Broadcasts axes of size 1 up to `shape`. Ranks must match.
    pub fn expand(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let in_shape = self.tensors[a].shape().to_vec();
        if in_shape.len() != shape.len()
            || in_shape.iter().zip(&shape).any(|(&i, &o)| i != o && i != 1)
        {
            return Err(TensorError::shape(
                "expand",
                format!("cannot broadcast {:?} to {:?}", in_shape, shape),
            ));
        }
        let in_strides = strides_of(&in_shape);
        let maps: Vec<usize> = in_shape
            .iter()
            .zip(&in_strides)
            .map(|(&dim, &st)| if dim == 1 { 0 } else { st })
            .collect();
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        odometer_copy(self.tensors[a].data(), &mut data, &shape, &maps, CopyDir::Gather);
        let t = Tensor::new(shape, data).expect("expand shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Expand { a, out });
        }
        Ok(out)
    }

    /// Concatenates tensors along the last axis. All other axes must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_last", "no parts given"));
        }
        let lead = self.tensors[parts[0]].shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.tensors[p].shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::shape(
                    "concat_last",
                    format!("leading dims disagree: {:?} vs {:?}", self.tensors[parts[0]].shape(), s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.tensors[p].data();
            for r in 0..rows {
                data[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data).expect("concat shape");
        let req = self.requires(parts);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::ConcatLast { parts: parts.to_vec(), widths, out });
        }
        Ok(out)
    }

    /// Takes columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let shape = self.tensors[a].shape().to_vec();
        let width = *shape.last().ok_or_else(|| TensorError::shape("slice_last", "0-d input"))?;
        if start + len > width || len == 0 {
            return Err(TensorError::invalid(
                "slice_last",
                format!("range {}..{} out of width {}", start, start + len, width),
            ));
        }
        let rows = self.tensors[a].numel() / width;
        let src = self.tensors[a].data();
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * width + start..r * width + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let t = Tensor::new(out_shape, data).expect("slice shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::SliceLast { a, start, len, out });
        }
        Ok(out)
    }

    /// Takes rows `[start, start+len)` of the first axis.
    pub fn slice_dim0(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let shape = self.tensors[a].shape().to_vec();
        let dim0 = *shape.first().ok_or_else(|| TensorError::shape("slice_dim0", "0-d input"))?;
        if start + len > dim0 || len == 0 {
            return Err(TensorError::invalid(
                "slice_dim0",
                format!("range {}..{} out of first dim {}", start, start + len, dim0),
            ));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.tensors[a].data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let t = Tensor::new(out_shape, data).expect("slice_dim0 shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::SliceDim0 { a, start, out });
        }
        Ok(out)
    }

    /// Softmax over the last axis with max subtraction. Rows sum to 1; the
    /// row sum uses canonical ordering so permuting a row permutes its output
    /// bit-exactly. NaN input is rejected.
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.softmax_impl(a, true)
    }

    /// [`Tape::softmax_last`] with plain left-to-right row sums. Cheaper, still
    /// deterministic, but not invariant under permutation of the last axis.
    pub fn softmax_last_seq(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.softmax_impl(a, false)
    }

    fn softmax_impl(&mut self, a: TensorId, canonical: bool) -> Result<TensorId, TensorError> {
        let width = self.tensors[a].last_dim();
        if width == 0 || self.tensors[a].ndim() == 0 {
            return Err(TensorError::shape("softmax_last", "empty last axis"));
        }
        if let Some(pos) = self.tensors[a].data().iter().position(|v| v.is_nan()) {
            return Err(TensorError::non_finite(
                "softmax_last",
                format!("NaN at flat index {}", pos),
            ));
        }
        let rows = self.tensors[a].numel() / width;
        let src = self.tensors[a].data();
        let mut data = vec![0.0; rows * width];
        let mut scratch = Vec::with_capacity(width);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let orow = &mut data[r * width..(r + 1) * width];
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
            }
            let denom = if canonical {
                scratch.clear();
                scratch.extend_from_slice(orow);
                canonical_sum(&mut scratch)
            } else {
                orow.iter().sum()
            };
            for o in orow.iter_mut() {
                *o /= denom;
            }
        }
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("softmax shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::SoftmaxLast { a, out });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId, TensorError> {
        let d = self.tensors[x].last_dim();
        if self.tensors[x].ndim() == 0 || d == 0 {
            return Err(TensorError::shape("layer_norm", "empty last axis"));
        }
        for (&p, name) in [(gamma, "gamma"), (beta, "beta")].iter().map(|(p, n)| (p, *n)) {
            if self.tensors[p].shape() != [d] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("{} must have shape [{}], got {:?}", name, d, self.tensors[p].shape()),
                ));
            }
        }
        let rows = self.tensors[x].numel() / d;
        let src = self.tensors[x].data();
        let g = self.tensors[gamma].data();
        let b = self.tensors[beta].data();
        let mut data = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = mu;
            inv_std[r] = is;
            let orow = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = g[j] * (row[j] - mu) * is + b[j];
            }
        }
        let t = Tensor::new(self.tensors[x].shape().to_vec(), data).expect("layer_norm shape");
        let req = self.requires(&[x, gamma, beta]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::LayerNorm { x, gamma, beta, out, mean, inv_std });
        }
        Ok(out)
    }

    /// Inverted dropout on all elements. In eval mode or at p = 0 this is the
    /// identity and consumes no randomness; in train mode each element is
    /// zeroed with probability p and survivors are scaled by 1/(1-p).
    pub fn dropout(
        &mut self,
        a: TensorId,
        p: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p = {} outside [0, 1)", p)));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.tensors[a].numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = self.tensors[a].data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let t = Tensor::new(self.tensors[a].shape().to_vec(), data).expect("dropout shape");
        let req = self.requires(&[a]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Dropout { a, out, keep });
        }
        Ok(out)
    }

    /// Sum of all elements as a `[1]` tensor, accumulated in flat order.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let total: f64 = self.tensors[a].data().iter().sum();
        let req = self.requires(&[a]);
        let out = self.push_output(Tensor::scalar(total), req);
        if req {
            self.nodes.push(Node::SumAll { a, out });
        }
        Ok(out)
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let n = self.tensors[a].numel();
        if n == 0 {
            return Err(TensorError::shape("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// x @ w + b for x [..., din], w [din, dout], bias b [dout]. Leading axes
    /// of x are treated as rows; the output keeps them with din replaced by
    /// dout. One fused node: the product is accumulated in ascending-k order
    /// and the bias added afterwards, exactly as a matmul-then-add pair.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sx = self.tensors[x].shape().to_vec();
        let sw = self.tensors[w].shape().to_vec();
        let sb = self.tensors[b].shape().to_vec();
        if sx.is_empty() || sw.len() != 2 || sb.len() != 1 {
            return Err(TensorError::shape(
                "linear",
                format!("expected x [..., din], w [din, dout], b [dout], got {:?}, {:?}, {:?}", sx, sw, sb),
            ));
        }
        let (k, n) = (sw[0], sw[1]);
        if sx[sx.len() - 1] != k || sb[0] != n {
            return Err(TensorError::shape(
                "linear",
                format!("width mismatch: x {:?}, w {:?}, b {:?}", sx, sw, sb),
            ));
        }
        let m = self.tensors[x].numel() / k;
        let mut data = vec![0.0; m * n];
        matmul_accum(self.tensors[x].data(), self.tensors[w].data(), &mut data, m, k, n);
        let bias = self.tensors[b].data();
        for row in data.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = n;
        let t = Tensor::new(out_shape, data).expect("linear shape");
        let req = self.requires(&[x, w, b]);
        let out = self.push_output(t, req);
        if req {
            self.nodes.push(Node::Linear { x, w, b, out, m, k, n });
        }
        Ok(out)
    }

    /// Reverse-mode gradient pass from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.tensors[loss].numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.tensors[loss].shape()),
            ));
        }
        self.grads = vec![None; self.tensors.len()];
        if !self.tensors[loss].requires_grad() {
            return Ok(());
        }
        self.grads[loss] = Some(vec![1.0]);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node);
        }
        self.nodes = nodes;
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `input` (created on demand) and the
    /// finished gradient of `out`. Skips silently when `out` has no gradient
    /// or `input` does not require one.
    fn with_pair<F>(&mut self, input: TensorId, out: TensorId, f: F)
    where
        F: FnOnce(&mut [f64], &[f64], &[Tensor]),
    {
        debug_assert!(input < out, "tape must be append-ordered");
        if self.grads[out].is_none() || !self.tensors[input].requires_grad() {
            return;
        }
        if self.grads[input].is_none() {
            self.grads[input] = Some(vec![0.0; self.tensors[input].numel()]);
        }
        let (left, right) = self.grads.split_at_mut(out);
        let gout = right[0].as_deref().expect("checked above");
        let gin = left[input].as_deref_mut().expect("created above");
        f(gin, gout, &self.tensors);
    }

    fn backward_node(&mut self, node: &Node) {
        match node {
            Node::Add { a, b, out } => {
                self.with_pair(*a, *out, |gin, gout, _| {
                    for (g, &d) in gin.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
                self.with_pair(*b, *out, |gin, gout, _| {
                    for (g, &d) in gin.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
            }
            Node::Sub { a, b, out } => {
                self.with_pair(*a, *out, |gin, gout, _| {
                    for (g, &d) in gin.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
                self.with_pair(*b, *out, |gin, gout, _| {
                    for (g, &d) in gin.iter_mut().zip(gout) {
                        *g -= d;
                    }
                });
            }
            Node::Mul { a, b, out } => {
                let (a, b, out) = (*a, *b, *out);
                self.with_pair(a, out, |gin, gout, tensors| {
                    for ((g, &d), &bv) in gin.iter_mut().zip(gout).zip(tensors[b].data()) {
                        *g += d * bv;
                    }
                });
                self.with_pair(b, out, |gin, gout, tensors| {
                    for ((g, &d), &av) in gin.iter_mut().zip(gout).zip(tensors[a].data()) {
                        *g += d * av;
                    }
                });
            }
            Node::Scale { a, factor, out } => {
                let factor = *factor;
                self.with_pair(*a, *out, |gin, gout, _| {
                    for (g, &d) in gin.iter_mut().zip(gout) {
                        *g += d * factor;
                    }
                });
            }
            Node::Abs { a, out } => {
                let a = *a;
                self.with_pair(a, *out, |gin, gout, tensors| {
                    for ((g, &d), &av) in gin.iter_mut().zip(gout).zip(tensors[a].data()) {
                        *g += d * sign(av);
                    }
                });
            }
            Node::Matmul { a, b, out, dims } => {
                let (a, b, out) = (*a, *b, *out);
                let MatmulDims { batch, m, k, n, b_batched } = *dims;
                self.with_pair(a, out, |gin, gout, tensors| {
                    let bd = tensors[b].data();
                    for bi in 0..batch {
                        let bsl = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                        matmul_backward_a(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            bsl,
                            &mut gin[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.with_pair(b, out, |gin, gout, tensors| {
                    let ad = tensors[a].data();
                    for bi in 0..batch {
                        let gsl = if b_batched { &mut gin[bi * k * n..(bi + 1) * k * n] } else { &mut gin[..] };
                        matmul_backward_b(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            gsl,
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Node::MatmulNT { a, b, out, dims } => {
                let (a, b, out) = (*a, *b, *out);
                let MatmulDims { batch, m, k, n, b_batched } = *dims;
                self.with_pair(a, out, |gin, gout, tensors| {
                    let bd = tensors[b].data();
                    for bi in 0..batch {
                        let bsl = if b_batched { &bd[bi * n * k..(bi + 1) * n * k] } else { bd };
                        matmul_nt_backward_a(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            bsl,
                            &mut gin[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                self.with_pair(b, out, |gin, gout, tensors| {
                    let ad = tensors[a].data();
                    for bi in 0..batch {
                        let gsl = if b_batched { &mut gin[bi * n * k..(bi + 1) * n * k] } else { &mut gin[..] };
                        matmul_nt_backward_b(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            gsl,
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Node::Linear { x, w, b, out, m, k, n } => {
                let (x, w, b, out) = (*x, *w, *b, *out);
                let (m, k, n) = (*m, *k, *n);
                self.with_pair(x, out, |gin, gout, tensors| {
                    matmul_backward_a(gout, tensors[w].data(), gin, m, k, n);
                });
                self.with_pair(w, out, |gin, gout, tensors| {
                    matmul_backward_b(tensors[x].data(), gout, gin, m, k, n);
                });
                self.with_pair(b, out, |gin, gout, _| {
                    for grow in gout.chunks_exact(n) {
                        for (g, &d) in gin.iter_mut().zip(grow) {
                            *g += d;
                        }
                    }
                });
            }
            Node::HeadScores { q, k, out, dims } => {
                let (q, k, out, dims) = (*q, *k, *out, *dims);
                self.with_pair(q, out, |gin, gout, tensors| {
                    head_scores_backward_q(gout, tensors[k].data(), gin, dims);
                });
                self.with_pair(k, out, |gin, gout, tensors| {
                    head_scores_backward_k(gout, tensors[q].data(), gin, dims);
                });
            }
            Node::HeadContext { p, v, out, dims } => {
                let (p, v, out, dims) = (*p, *v, *out, *dims);
                self.with_pair(p, out, |gin, gout, tensors| {
                    head_context_backward_p(gout, tensors[v].data(), gin, dims);
                });
                self.with_pair(v, out, |gin, gout, tensors| {
                    head_context_backward_v(gout, tensors[p].data(), gin, dims);
                });
            }
            Node::Reshape { a, out } => {
                // same flat layout on both sides: move the buffer when the
                // input has no gradient yet, otherwise accumulate into it
                let (a, out) = (*a, *out);
                if self.grads[out].is_some() && self.tensors[a].requires_grad() {
                    if self.grads[a].is_none() {
                        self.grads[a] = self.grads[out].take();
                    } else {
                        self.with_pair(a, out, |gin, gout, _| {
                            for (g, &d) in gin.iter_mut().zip(gout) {
                                *g += d;
                            }
                        });
                    }
                }
            }
            Node::Permute { a, perm, out } => {
                let a_id = *a;
                let perm = perm.clone();
                self.with_pair(a_id, *out, |gin, gout, tensors| {
                    let in_shape = tensors[a_id].shape();
                    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                    let in_strides = strides_of(in_shape);
                    let maps: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                    odometer_copy(gout, gin, &out_shape, &maps, CopyDir::ScatterAdd);
                });
            }
            Node::Expand { a, out } => {
                let (a_id, out_id) = (*a, *out);
                self.with_pair(a_id, out_id, |gin, gout, tensors| {
                    let in_shape = tensors[a_id].shape();
                    let out_shape = tensors[out_id].shape().to_vec();
                    let in_strides = strides_of(in_shape);
                    let maps: Vec<usize> = in_shape
                        .iter()
                        .zip(&in_strides)
                        .map(|(&dim, &st)| if dim == 1 { 0 } else { st })
                        .collect();
                    odometer_copy(gout, gin, &out_shape, &maps, CopyDir::ScatterAdd);
                });
            }
            Node::ConcatLast { parts, widths, out } => {
                let total: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let start = col;
                    self.with_pair(p, *out, |gin, gout, _| {
                        let rows = gin.len() / w;
                        for r in 0..rows {
                            let gsl = &gout[r * total + start..r * total + start + w];
                            for (g, &d) in gin[r * w..(r + 1) * w].iter_mut().zip(gsl) {
                                *g += d;
                            }
                        }
                    });
                    col += w;
                }
            }
            Node::SliceLast { a, start, len, out } => {
                let (a_id, start, len) = (*a, *start, *len);
                self.with_pair(a_id, *out, |gin, gout, tensors| {
                    let width = tensors[a_id].last_dim();
                    let rows = tensors[a_id].numel() / width;
                    for r in 0..rows {
                        let gsl = &gout[r * len..(r + 1) * len];
                        for (g, &d) in gin[r * width + start..r * width + start + len].iter_mut().zip(gsl) {
                            *g += d;
                        }
                    }
                });
            }
            Node::SliceDim0 { a, start, out } => {
                let (a_id, start, out_id) = (*a, *start, *out);
                self.with_pair(a_id, out_id, |gin, gout, tensors| {
                    let stride: usize = tensors[a_id].shape()[1..].iter().product();
                    for (g, &d) in gin[start * stride..start * stride + gout.len()].iter_mut().zip(gout) {
                        *g += d;
                    }
                });
            }
            Node::SoftmaxLast { a, out } => {
                let (a_id, out_id) = (*a, *out);
                self.with_pair(a_id, out_id, |gin, gout, tensors| {
                    let p = tensors[out_id].data();
                    let width = tensors[out_id].last_dim();
                    let rows = p.len() / width;
                    for r in 0..rows {
                        let prow = &p[r * width..(r + 1) * width];
                        let grow = &gout[r * width..(r + 1) * width];
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for (g, (&pv, &dv)) in
                            gin[r * width..(r + 1) * width].iter_mut().zip(prow.iter().zip(grow))
                        {
                            *g += pv * (dv - dot);
                        }
                    }
                });
            }
            Node::LayerNorm { x, gamma, beta, out, mean, inv_std } => {
                let (x_id, g_id, b_id) = (*x, *gamma, *beta);
                let d = self.tensors[g_id].numel();
                let rows = self.tensors[x_id].numel() / d;
                self.with_pair(x_id, *out, |gin, gout, tensors| {
                    let src = tensors[x_id].data();
                    let g = tensors[g_id].data();
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        let row = &src[r * d..(r + 1) * d];
                        let grow = &gout[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gdy = g[j] * grow[j];
                            let xh = (row[j] - mu) * is;
                            m1 += gdy;
                            m2 += gdy * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for (j, slot) in gin[r * d..(r + 1) * d].iter_mut().enumerate() {
                            let gdy = g[j] * grow[j];
                            let xh = (row[j] - mu) * is;
                            *slot += is * (gdy - m1 - xh * m2);
                        }
                    }
                });
                self.with_pair(g_id, *out, |gin, gout, tensors| {
                    let src = tensors[x_id].data();
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        for j in 0..d {
                            gin[j] += gout[r * d + j] * (src[r * d + j] - mu) * is;
                        }
                    }
                });
                self.with_pair(b_id, *out, |gin, gout, _| {
                    for r in 0..rows {
                        for j in 0..d {
                            gin[j] += gout[r * d + j];
                        }
                    }
                });
            }
            Node::Dropout { a, out, keep } => {
                self.with_pair(*a, *out, |gin, gout, _| {
                    for ((g, &d), &kv) in gin.iter_mut().zip(gout).zip(keep) {
                        *g += d * kv;
                    }
                });
            }
            Node::SumAll { a, out } => {
                self.with_pair(*a, *out, |gin, gout, _| {
                    let d = gout[0];
                    for g in gin.iter_mut() {
                        *g += d;
                    }
                });
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, PartialEq)]
enum CopyDir {
    /// out[flat] = in[mapped]
    Gather,
    /// in[mapped] += out[flat]
    ScatterAdd,
}

/// Walks the output index space in row-major order while tracking the mapped
/// input offset through per-axis strides (0 for broadcast axes).
fn odometer_copy(src_or_gout: &[f64], dst: &mut [f64], out_shape: &[usize], maps: &[usize], dir: CopyDir) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let nd = out_shape.len();
    let inner = out_shape[nd - 1];
    if maps[nd - 1] == 1 && inner > 1 {
        // the innermost output run is contiguous in the mapped buffer
        let mut idx = vec![0usize; nd - 1];
        let mut off = 0usize;
        for run in 0..numel / inner {
            let flat = run * inner;
            match dir {
                CopyDir::Gather => {
                    dst[flat..flat + inner].copy_from_slice(&src_or_gout[off..off + inner])
                }
                CopyDir::ScatterAdd => {
                    let d = &mut dst[off..off + inner];
                    let s = &src_or_gout[flat..flat + inner];
                    for j in 0..inner {
                        d[j] += s[j];
                    }
                }
            }
            for ax in (0..nd - 1).rev() {
                idx[ax] += 1;
                off += maps[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= maps[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for flat in 0..numel {
        match dir {
            CopyDir::Gather => dst[flat] = src_or_gout[off],
            CopyDir::ScatterAdd => dst[off] += src_or_gout[flat],
        }
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += maps[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= maps[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
