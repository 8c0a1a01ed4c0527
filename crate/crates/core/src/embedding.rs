//! Per-observation token embeddings.
//!
//! Every entry (t, i) of a window becomes a vector
//! `[value | positional encoding of t | identity of feature i | mask bit]`.
//! The identity rows are learnable, so features acquire stable signatures
//! that attention can use even when a step is fully missing. The mask bit and
//! the zero-filled value slot tell the model which entries were observed.

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError};
use std::ops::Range;

/// How positions are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    /// Fixed interleaved sine/cosine features of the 0-based step index.
    Sinusoidal,
    /// A learnable `[t_max, d_pe]` table initialized from the sinusoidal values.
    Learnable,
}

/// Positional-encoding source for one forward pass.
#[derive(Clone, Copy)]
pub enum PeSource {
    Sinusoidal,
    /// Tape id of the bound `[t_max, d_pe]` table.
    Learnable(TensorId),
}

/// Slot layout of one token embedding: value, positional encoding, feature
/// identity, mask, in that storage order. `d_f = 0` removes the identity
/// block entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub d_pe: usize,
    pub d_f: usize,
}

impl SlotLayout {
    pub fn new(d_pe: usize, d_f: usize) -> Self {
        SlotLayout { d_pe, d_f }
    }

    /// Width of the full embedding.
    pub fn d_e(&self) -> usize {
        2 + self.d_pe + self.d_f
    }

    pub fn value_slot(&self) -> usize {
        0
    }

    pub fn pe_slots(&self) -> Range<usize> {
        1..1 + self.d_pe
    }

    pub fn identity_slots(&self) -> Range<usize> {
        1 + self.d_pe..1 + self.d_pe + self.d_f
    }

    pub fn mask_slot(&self) -> usize {
        1 + self.d_pe + self.d_f
    }

    /// Context partition: value, positional, and mask slots. Together with
    /// [`SlotLayout::identity_slots`] this covers every slot exactly once;
    /// the two views are logical index sets, not contiguous ranges.
    pub fn context_slots(&self) -> Vec<usize> {
        let mut idx = vec![self.value_slot()];
        idx.extend(self.pe_slots());
        idx.push(self.mask_slot());
        idx
    }
}

/// Sinusoidal encoding of a single 0-based step index.
///
/// Slot 2k holds sin(t / 10000^(2k/d_pe)) and slot 2k+1 holds the cosine of
/// the same argument, so each pair shares one frequency.
pub fn sinusoidal_pe(t: usize, d_pe: usize) -> Result<Vec<f64>, TensorError> {
    if d_pe == 0 || d_pe % 2 != 0 {
        return Err(TensorError::invalid(
            "sinusoidal_pe",
            format!("d_pe must be positive and even, got {}", d_pe),
        ));
    }
    let mut out = vec![0.0; d_pe];
    for k in 0..d_pe / 2 {
        let arg = t as f64 / 10000f64.powf(2.0 * k as f64 / d_pe as f64);
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    Ok(out)
}

/// Stacked sinusoidal encodings for steps `0..t_len` as a `[t_len, d_pe]` tensor.
pub fn pe_matrix(t_len: usize, d_pe: usize) -> Result<Tensor, TensorError> {
    let mut data = Vec::with_capacity(t_len * d_pe);
    for t in 0..t_len {
        data.extend(sinusoidal_pe(t, d_pe)?);
    }
    Tensor::new(vec![t_len, d_pe], data)
}

fn check_btf(op: &'static str, values: &Tensor, mask: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    if values.ndim() != 3 {
        return Err(TensorError::shape(op, format!("values must be [B,T,F], got {:?}", values.shape())));
    }
    if mask.shape() != values.shape() {
        return Err(TensorError::shape(
            op,
            format!("mask shape {:?} does not match values {:?}", mask.shape(), values.shape()),
        ));
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(TensorError::invalid(op, format!("mask entries must be 0 or 1, found {}", bad)));
    }
    Ok((values.shape()[0], values.shape()[1], values.shape()[2]))
}

/// Embeds a `[B,T,F]` batch into `[B,T,F,d_e]` tokens on the tape.
///
/// Hidden entries carry value 0 and mask 0 regardless of what `values` holds
/// there. The identity block broadcasts table row i to every token of feature
/// i; gradients flow back into the table (and the learnable PE table) only.
pub fn embed_batch(
    tape: &mut Tape,
    values: &Tensor,
    mask: &Tensor,
    table: Option<TensorId>,
    pe: PeSource,
    layout: &SlotLayout,
) -> Result<TensorId, TensorError> {
    let (b, t_len, f) = check_btf("embed_batch", values, mask)?;
    let masked: Vec<f64> = values.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
    let value_slot = tape.constant(Tensor::new(vec![b, t_len, f, 1], masked)?);
    let mask_slot = tape.constant(Tensor::new(vec![b, t_len, f, 1], mask.data().to_vec())?);

    let pe_rows = match pe {
        PeSource::Sinusoidal => tape.constant(pe_matrix(t_len, layout.d_pe)?),
        PeSource::Learnable(full) => {
            let t_max = tape.value(full).shape()[0];
            if t_len > t_max {
                return Err(TensorError::invalid(
                    "embed_batch",
                    format!("window length {} exceeds learnable PE capacity {}", t_len, t_max),
                ));
            }
            tape.slice_dim0(full, 0, t_len)?
        }
    };
    let pe_block = tape.reshape(pe_rows, vec![1, t_len, 1, layout.d_pe])?;
    let pe_block = tape.expand(pe_block, vec![b, t_len, f, layout.d_pe])?;

    let mut parts = vec![value_slot, pe_block];
    if layout.d_f > 0 {
        let table = table.ok_or_else(|| {
            TensorError::contract("embed_batch", "identity table required when d_f > 0")
        })?;
        let shape = tape.value(table).shape().to_vec();
        if shape != [f, layout.d_f] {
            return Err(TensorError::shape(
                "embed_batch",
                format!("identity table {:?} does not match [F={}, d_f={}]", shape, f, layout.d_f),
            ));
        }
        let id_block = tape.reshape(table, vec![1, 1, f, layout.d_f])?;
        let id_block = tape.expand(id_block, vec![b, t_len, f, layout.d_f])?;
        parts.push(id_block);
    }
    parts.push(mask_slot);
    tape.concat_last(&parts)
}

/// Affine projection of `[B,T,F,d_e]` embeddings to the model width d.
pub fn project_input(
    tape: &mut Tape,
    embedded: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId, TensorError> {
    let shape = tape.value(embedded).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::shape(
            "project_input",
            format!("expected [B,T,F,d_e], got {:?}", shape),
        ));
    }
    let d_e = shape[3];
    let rows = shape[0] * shape[1] * shape[2];
    let w_shape = tape.value(w).shape().to_vec();
    if w_shape.len() != 2 || w_shape[0] != d_e {
        return Err(TensorError::shape(
            "project_input",
            format!("weight {:?} does not accept d_e = {}", w_shape, d_e),
        ));
    }
    let d = w_shape[1];
    let flat = tape.reshape(embedded, vec![rows, d_e])?;
    let projected = tape.linear(flat, w, b)?;
    tape.reshape(projected, vec![shape[0], shape[1], shape[2], d])
}

/// Additive decomposition of one raw-embedding attention score.
///
/// With A = Wq * Wk^T, the bilinear score e_i^T A e_j splits over the
/// identity/context slot partition into four terms: an input-independent
/// identity prior, two identity-context cross terms, and a dynamic context
/// term. The terms sum to the full score.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScoreDecomposition {
    /// identity_i x identity_j
    pub identity_prior: f64,
    /// identity_i x context_j
    pub identity_context: f64,
    /// context_i x identity_j
    pub context_identity: f64,
    /// context_i x context_j
    pub dynamic_context: f64,
}

impl ScoreDecomposition {
    pub fn total(&self) -> f64 {
        self.identity_prior + self.identity_context + self.context_identity + self.dynamic_context
    }
}

pub fn score_decomposition(
    e_i: &[f64],
    e_j: &[f64],
    wq: &Tensor,
    wk: &Tensor,
    layout: &SlotLayout,
) -> Result<ScoreDecomposition, TensorError> {
    let d_e = layout.d_e();
    if e_i.len() != d_e || e_j.len() != d_e {
        return Err(TensorError::shape(
            "score_decomposition",
            format!("embeddings must have {} slots, got {} and {}", d_e, e_i.len(), e_j.len()),
        ));
    }
    if wq.ndim() != 2 || wq.shape()[0] != d_e || wk.shape() != wq.shape() {
        return Err(TensorError::shape(
            "score_decomposition",
            format!("projections must be [{}, d_k], got {:?} and {:?}", d_e, wq.shape(), wk.shape()),
        ));
    }
    let d_k = wq.shape()[1];
    // A[a][b] = sum_c Wq[a,c] * Wk[b,c]
    let mut a = vec![0.0; d_e * d_e];
    for ai in 0..d_e {
        for bi in 0..d_e {
            let mut acc = 0.0;
            for c in 0..d_k {
                acc += wq.data()[ai * d_k + c] * wk.data()[bi * d_k + c];
            }
            a[ai * d_e + bi] = acc;
        }
    }
    let partial = |rows: &[usize], cols: &[usize]| -> f64 {
        let mut acc = 0.0;
        for &r in rows {
            for &c in cols {
                acc += e_i[r] * a[r * d_e + c] * e_j[c];
            }
        }
        acc
    };
    let f_idx: Vec<usize> = layout.identity_slots().collect();
    let r_idx = layout.context_slots();
    Ok(ScoreDecomposition {
        identity_prior: partial(&f_idx, &f_idx),
        identity_context: partial(&f_idx, &r_idx),
        context_identity: partial(&r_idx, &f_idx),
        dynamic_context: partial(&r_idx, &r_idx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform, StreamKind};

    #[test]
    fn pe_at_zero_alternates_zero_one() {
        let pe = sinusoidal_pe(0, 8).unwrap();
        for k in 0..4 {
            assert_eq!(pe[2 * k], 0.0);
            assert_eq!(pe[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn pe_matches_closed_form() {
        let pe = sinusoidal_pe(3, 4).unwrap();
        assert!((pe[0] - 3f64.sin()).abs() < 1e-15);
        assert!((pe[1] - 3f64.cos()).abs() < 1e-15);
        let arg = 3.0 / 10000f64.powf(0.5);
        assert!((pe[2] - arg.sin()).abs() < 1e-15);
        assert!((pe[3] - arg.cos()).abs() < 1e-15);
    }

    #[test]
    fn pe_pairs_share_one_frequency() {
        // sin^2 + cos^2 of the same argument is 1 for every pair.
        for t in [1usize, 7, 23] {
            let pe = sinusoidal_pe(t, 16).unwrap();
            for k in 0..8 {
                let norm = pe[2 * k] * pe[2 * k] + pe[2 * k + 1] * pe[2 * k + 1];
                assert!((norm - 1.0).abs() < 1e-12, "pair {} at t {}", k, t);
            }
        }
    }

    #[test]
    fn pe_values_bounded_and_distinct() {
        let rows: Vec<Vec<f64>> = (0..32).map(|t| sinusoidal_pe(t, 8).unwrap()).collect();
        for row in &rows {
            assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j], "PE rows {} and {} collide", i, j);
            }
        }
    }

    #[test]
    fn pe_rejects_odd_width() {
        assert!(sinusoidal_pe(0, 5).is_err());
        assert!(sinusoidal_pe(0, 0).is_err());
    }

    #[test]
    fn layout_slot_arithmetic() {
        let layout = SlotLayout::new(16, 8);
        assert_eq!(layout.d_e(), 26);
        assert_eq!(layout.value_slot(), 0);
        assert_eq!(layout.pe_slots(), 1..17);
        assert_eq!(layout.identity_slots(), 17..25);
        assert_eq!(layout.mask_slot(), 25);
        let mut all: Vec<usize> = layout.context_slots();
        all.extend(layout.identity_slots());
        all.sort_unstable();
        assert_eq!(all, (0..26).collect::<Vec<_>>());
        // without identity slots
        let no_id = SlotLayout::new(4, 0);
        assert_eq!(no_id.d_e(), 6);
        assert_eq!(no_id.mask_slot(), 5);
        assert!(no_id.identity_slots().is_empty());
    }

    fn demo_batch(b: usize, t: usize, f: usize) -> (Tensor, Tensor) {
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for i in 0..b * t * f {
            values.push(i as f64 * 0.1 - 1.0);
            mask.push(if i % 3 == 0 { 0.0 } else { 1.0 });
        }
        (
            Tensor::new(vec![b, t, f], values).unwrap(),
            Tensor::new(vec![b, t, f], mask).unwrap(),
        )
    }

    #[test]
    fn embed_layout_and_masking() {
        let layout = SlotLayout::new(4, 3);
        let (values, mask) = demo_batch(2, 5, 3);
        let mut rng = stream(1, StreamKind::Init, 0);
        let table_data: Vec<f64> = (0..9).map(|_| uniform(&mut rng, -0.5, 0.5)).collect();
        let table = Tensor::new(vec![3, 3], table_data.clone()).unwrap();

        let mut tape = Tape::new();
        let tid = tape.param(&table);
        let e = embed_batch(&mut tape, &values, &mask, Some(tid), PeSource::Sinusoidal, &layout).unwrap();
        assert_eq!(tape.value(e).shape(), &[2, 5, 3, layout.d_e()]);

        let et = tape.value(e);
        for b in 0..2 {
            for t in 0..5 {
                for f in 0..3 {
                    let m = mask.at(&[b, t, f]);
                    assert_eq!(et.at(&[b, t, f, layout.mask_slot()]), m);
                    let v = et.at(&[b, t, f, layout.value_slot()]);
                    if m == 0.0 {
                        assert_eq!(v, 0.0, "hidden value slot must be zero");
                    } else {
                        assert_eq!(v, values.at(&[b, t, f]));
                    }
                    // identity slots replicate the table row of feature f
                    for (s, slot) in layout.identity_slots().enumerate() {
                        assert_eq!(et.at(&[b, t, f, slot]), table_data[f * 3 + s]);
                    }
                    // PE slots depend only on t
                    let pe = sinusoidal_pe(t, 4).unwrap();
                    for (s, slot) in layout.pe_slots().enumerate() {
                        assert_eq!(et.at(&[b, t, f, slot]), pe[s]);
                    }
                }
            }
        }
    }

    #[test]
    fn embed_without_identity_block() {
        let layout = SlotLayout::new(4, 0);
        let (values, mask) = demo_batch(1, 3, 2);
        let mut tape = Tape::new();
        let e = embed_batch(&mut tape, &values, &mask, None, PeSource::Sinusoidal, &layout).unwrap();
        assert_eq!(tape.value(e).shape(), &[1, 3, 2, 6]);
    }

    #[test]
    fn embed_is_deterministic() {
        let layout = SlotLayout::new(6, 2);
        let (values, mask) = demo_batch(2, 4, 3);
        let table = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let tid = tape.param(&table);
            let e = embed_batch(&mut tape, &values, &mask, Some(tid), PeSource::Sinusoidal, &layout)
                .unwrap();
            tape.value(e).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embed_learnable_pe_respects_capacity() {
        let layout = SlotLayout::new(4, 0);
        let (values, mask) = demo_batch(1, 5, 2);
        let mut tape = Tape::new();
        let short = tape.param(&pe_matrix(3, 4).unwrap());
        let err = embed_batch(&mut tape, &values, &mask, None, PeSource::Learnable(short), &layout);
        assert!(err.is_err());
        let long = tape.param(&pe_matrix(8, 4).unwrap());
        let e = embed_batch(&mut tape, &values, &mask, None, PeSource::Learnable(long), &layout).unwrap();
        // rows 0..5 of the table are used unchanged
        let et = tape.value(e);
        for t in 0..5 {
            let pe = sinusoidal_pe(t, 4).unwrap();
            for (s, slot) in layout.pe_slots().enumerate() {
                assert_eq!(et.at(&[0, t, 0, slot]), pe[s]);
            }
        }
    }

    #[test]
    fn identity_gradient_isolated_per_feature() {
        let layout = SlotLayout::new(4, 3);
        let (values, mask) = demo_batch(1, 4, 3);
        let table = Tensor::new(vec![3, 3], vec![0.3; 9]).unwrap();
        let mut tape = Tape::new();
        let tid = tape.param(&table);
        let e = embed_batch(&mut tape, &values, &mask, Some(tid), PeSource::Sinusoidal, &layout).unwrap();
        // loss reads only tokens of feature 1
        let mut sel = Tensor::zeros(vec![1, 4, 3, layout.d_e()]);
        for t in 0..4 {
            for s in 0..layout.d_e() {
                sel.set(&[0, t, 1, s], 1.0);
            }
        }
        let selc = tape.constant(sel);
        let picked = tape.mul(e, selc).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(tid).unwrap();
        assert!(g[0..3].iter().all(|&v| v == 0.0), "row 0 untouched");
        assert!(g[3..6].iter().all(|&v| v == 4.0), "row 1 hit once per step");
        assert!(g[6..9].iter().all(|&v| v == 0.0), "row 2 untouched");
    }

    #[test]
    fn projection_matches_affine_oracle() {
        let layout = SlotLayout::new(4, 2);
        let (values, mask) = demo_batch(1, 2, 2);
        let table = Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.25, 0.75]).unwrap();
        let d = 3;
        let d_e = layout.d_e();
        let mut rng = stream(2, StreamKind::Init, 0);
        let w = Tensor::new(vec![d_e, d], (0..d_e * d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
        let bias = Tensor::new(vec![d], vec![0.1, -0.2, 0.3]).unwrap();

        let mut tape = Tape::new();
        let tid = tape.param(&table);
        let wid = tape.param(&w);
        let bid = tape.param(&bias);
        let e = embed_batch(&mut tape, &values, &mask, Some(tid), PeSource::Sinusoidal, &layout).unwrap();
        let h = project_input(&mut tape, e, wid, bid).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 2, 2, d]);

        let emb = tape.value(e).data().to_vec();
        for row in 0..4 {
            for c in 0..d {
                let mut want = bias.data()[c];
                for s in 0..d_e {
                    want += emb[row * d_e + s] * w.data()[s * d + c];
                }
                let got = tape.value(h).data()[row * d + c];
                assert!((got - want).abs() < 1e-12);
            }
        }

        // zero weights leave only the bias
        let mut tape = Tape::new();
        let tid = tape.param(&table);
        let zw = tape.constant(Tensor::zeros(vec![d_e, d]));
        let bid = tape.param(&bias);
        let e = embed_batch(&mut tape, &values, &mask, Some(tid), PeSource::Sinusoidal, &layout).unwrap();
        let h = project_input(&mut tape, e, zw, bid).unwrap();
        for row in 0..4 {
            for c in 0..d {
                assert_eq!(tape.value(h).data()[row * d + c], bias.data()[c]);
            }
        }
    }

    #[test]
    fn decomposition_sums_to_full_score() {
        let layout = SlotLayout::new(6, 4);
        let d_e = layout.d_e();
        let d_k = 5;
        let mut rng = stream(7, StreamKind::Data, 0);
        for trial in 0..100 {
            let wq = Tensor::new(vec![d_e, d_k], (0..d_e * d_k).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
            let wk = Tensor::new(vec![d_e, d_k], (0..d_e * d_k).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
            let e_i: Vec<f64> = (0..d_e).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
            let e_j: Vec<f64> = (0..d_e).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
            let dec = score_decomposition(&e_i, &e_j, &wq, &wk, &layout).unwrap();
            // independent full score: (e_i Wq) . (e_j Wk)
            let mut full = 0.0;
            for c in 0..d_k {
                let qi: f64 = (0..d_e).map(|s| e_i[s] * wq.data()[s * d_k + c]).sum();
                let kj: f64 = (0..d_e).map(|s| e_j[s] * wk.data()[s * d_k + c]).sum();
                full += qi * kj;
            }
            assert!(
                (dec.total() - full).abs() < 1e-10,
                "trial {}: decomposition {} vs full {}",
                trial,
                dec.total(),
                full
            );
        }
    }

    #[test]
    fn decomposition_zero_query_zeroes_all_terms() {
        let layout = SlotLayout::new(4, 2);
        let d_e = layout.d_e();
        let wq = Tensor::zeros(vec![d_e, 3]);
        let wk = Tensor::filled(vec![d_e, 3], 0.7);
        let e: Vec<f64> = (0..d_e).map(|v| v as f64).collect();
        let dec = score_decomposition(&e, &e, &wq, &wk, &layout).unwrap();
        assert_eq!(dec.identity_prior, 0.0);
        assert_eq!(dec.identity_context, 0.0);
        assert_eq!(dec.context_identity, 0.0);
        assert_eq!(dec.dynamic_context, 0.0);
    }

    #[test]
    fn decomposition_identity_prior_dominates_for_missing_same_step_tokens() {
        // Two fully-missing tokens at the same step differ only in identity
        // slots; their value and mask slots are 0 and PE slots are equal, so
        // the only term that distinguishes features is the identity prior.
        let layout = SlotLayout::new(4, 3);
        let pe = sinusoidal_pe(2, 4).unwrap();
        let build = |id: &[f64]| {
            let mut e = vec![0.0; layout.d_e()];
            for (s, slot) in layout.pe_slots().enumerate() {
                e[slot] = pe[s];
            }
            for (s, slot) in layout.identity_slots().enumerate() {
                e[slot] = id[s];
            }
            e[layout.mask_slot()] = 0.0;
            e
        };
        let e_i = build(&[0.5, -0.3, 0.8]);
        let e_j = build(&[-0.1, 0.9, 0.2]);
        let mut rng = stream(8, StreamKind::Data, 0);
        let d_e = layout.d_e();
        let wq = Tensor::new(vec![d_e, 4], (0..d_e * 4).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
        let wk = Tensor::new(vec![d_e, 4], (0..d_e * 4).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
        let dec_ij = score_decomposition(&e_i, &e_j, &wq, &wk, &layout).unwrap();
        let dec_ji = score_decomposition(&e_j, &e_i, &wq, &wk, &layout).unwrap();
        // swapping features changes identity-dependent terms but not the
        // dynamic context term, which sees identical context slots
        assert_eq!(dec_ij.dynamic_context, dec_ji.dynamic_context);
        assert_ne!(dec_ij.identity_prior, 0.0);
    }

    #[test]
    fn decomposition_rejects_bad_layout() {
        let layout = SlotLayout::new(4, 2);
        let wq = Tensor::zeros(vec![layout.d_e(), 3]);
        let wk = Tensor::zeros(vec![layout.d_e(), 3]);
        let short = vec![0.0; 3];
        assert!(score_decomposition(&short, &short, &wq, &wk, &layout).is_err());
        let e = vec![0.0; layout.d_e()];
        let bad_w = Tensor::zeros(vec![3, 3]);
        assert!(score_decomposition(&e, &e, &bad_w, &wk, &layout).is_err());
    }
}
