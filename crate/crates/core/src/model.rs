//! The full imputation model: embedding, input projection, stacked
//! double-attention layers, fusion, and the scalar output head.
//!
//! A model owns plain tensors. Each forward pass binds them onto a fresh
//! tape in a fixed manifest order, so optimizer state, checkpoints, and
//! gradient lookups all agree on parameter identity by position.

use crate::attention::{AttentionParams, BoundAttention};
use crate::embedding::{embed_batch, pe_matrix, project_input, PeSource, SlotLayout};
use crate::encoder::{
    gated_fusion, helix_layer, multi_level_fusion, serial_layer, AttentionRecord, BoundLayer,
    LayerTrace,
};
use crate::rng::{stream, uniform, StreamKind};
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Architectural variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Parallel-plus-cross layers, identity embeddings, uniform fusion.
    Full,
    /// Identity slots removed from the embedding.
    NoFeatid,
    /// Only the last layer output feeds the head; no multi-level fusion.
    NoFusion,
    /// Serial temporal-feature-temporal layers instead of the crossed pair.
    NoHybrid,
    /// Positional encodings come from a learnable table.
    LearnablePe,
    /// Uniform fusion replaced by learned per-token softmax weights.
    GatedFusion,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoFeatid,
        Variant::NoFusion,
        Variant::NoHybrid,
        Variant::LearnablePe,
        Variant::GatedFusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFeatid => "no_featid",
            Variant::NoFusion => "no_fusion",
            Variant::NoHybrid => "no_hybrid",
            Variant::LearnablePe => "learnable_pe",
            Variant::GatedFusion => "gated_fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!("unknown variant '{}', expected one of {}", s, names.join(", "))
            })
    }
}

/// Model hyperparameters. Width `d` must be divisible by `n_heads`; the
/// embedding width follows from `d_pe`/`d_f` and the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_features: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_pe: usize,
    pub d_f: usize,
    pub dropout: f64,
    pub variant: Variant,
    /// Longest window a learnable positional table can serve.
    pub t_max: usize,
    /// Give the cross stage its own attention weights instead of reusing
    /// the stage-1 pair.
    pub stage2_distinct: bool,
    /// Capture per-layer attention matrices during forward passes.
    pub store_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let fail = |detail: String| Err(TensorError::invalid("model_config", detail));
        if self.n_features == 0 {
            return fail("n_features must be positive".into());
        }
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return fail(format!("width {} must be a positive multiple of n_heads {}", self.d, self.n_heads));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_pe == 0 || self.d_pe % 2 != 0 {
            return fail(format!("d_pe must be positive and even, got {}", self.d_pe));
        }
        if self.variant != Variant::NoFeatid && self.d_f == 0 {
            return fail("d_f must be positive when identity slots are present".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.t_max == 0 {
            return fail("t_max must be positive".into());
        }
        Ok(())
    }

    /// Slot layout of the token embedding under this variant.
    pub fn layout(&self) -> SlotLayout {
        let d_f = if self.variant == Variant::NoFeatid { 0 } else { self.d_f };
        SlotLayout::new(self.d_pe, d_f)
    }

    pub fn d_e(&self) -> usize {
        self.layout().d_e()
    }

    pub fn d_k(&self) -> usize {
        self.d / self.n_heads
    }

    /// Branch tensors produced per layer.
    pub fn branches_per_layer(&self) -> usize {
        if self.variant == Variant::NoHybrid {
            3
        } else {
            4
        }
    }

    /// Candidate count entering fusion: the projected input plus every branch.
    pub fn fusion_candidates(&self) -> usize {
        1 + self.branches_per_layer() * self.n_layers
    }

    fn has_identity(&self) -> bool {
        self.variant != Variant::NoFeatid
    }

    pub fn has_learnable_pe(&self) -> bool {
        self.variant == Variant::LearnablePe
    }

    fn has_gate(&self) -> bool {
        self.variant == Variant::GatedFusion
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_features: 1,
            d: 16,
            n_heads: 4,
            n_layers: 2,
            d_pe: 8,
            d_f: 8,
            dropout: 0.1,
            variant: Variant::Full,
            t_max: 512,
            stage2_distinct: false,
            store_attention: false,
        }
    }
}

/// Weights of one layer. The stage-2 pair is populated only when the config
/// asks for distinct cross-stage parameters.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub temporal: AttentionParams,
    pub feature: AttentionParams,
    pub temporal2: Option<AttentionParams>,
    pub feature2: Option<AttentionParams>,
}

/// A complete set of model weights plus the config that shapes them.
#[derive(Clone, Debug)]
pub struct HelixModel {
    pub config: ModelConfig,
    pub feat_id: Option<Tensor>,
    pub pe_learn: Option<Tensor>,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub gate_w: Option<Tensor>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl HelixModel {
    /// Fresh weights drawn from the init stream of `seed`, in manifest order:
    /// identity table uniform in +-1/sqrt(d_f), learnable positions copied
    /// from the sinusoidal table, projections Xavier-uniform, biases zero,
    /// LayerNorm affine at identity, fusion gate zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = stream(seed, StreamKind::Init, 0);
        let layout = config.layout();
        let d_e = layout.d_e();
        let d = config.d;

        let feat_id = if config.has_identity() {
            let limit = 1.0 / (config.d_f as f64).sqrt();
            let data = (0..config.n_features * config.d_f)
                .map(|_| uniform(&mut rng, -limit, limit))
                .collect();
            Some(Tensor::new(vec![config.n_features, config.d_f], data)?)
        } else {
            None
        };
        let pe_learn = if config.has_learnable_pe() {
            Some(pe_matrix(config.t_max, config.d_pe)?)
        } else {
            None
        };
        let in_w = crate::attention::xavier_uniform(&mut rng, d_e, d);
        let in_b = Tensor::zeros(vec![d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let temporal = AttentionParams::init(d, &mut rng);
            let feature = AttentionParams::init(d, &mut rng);
            let (temporal2, feature2) = if config.stage2_distinct {
                (Some(AttentionParams::init(d, &mut rng)), Some(AttentionParams::init(d, &mut rng)))
            } else {
                (None, None)
            };
            layers.push(LayerParams { temporal, feature, temporal2, feature2 });
        }
        let gate_w = if config.has_gate() {
            let k = config.fusion_candidates();
            Some(Tensor::zeros(vec![k * d, k]))
        } else {
            None
        };
        let final_ln_g = Tensor::filled(vec![d], 1.0);
        let final_ln_b = Tensor::zeros(vec![d]);
        let out_w = crate::attention::xavier_uniform(&mut rng, d, 1);
        let out_b = Tensor::zeros(vec![1]);
        Ok(HelixModel {
            config,
            feat_id,
            pe_learn,
            in_w,
            in_b,
            layers,
            gate_w,
            final_ln_g,
            final_ln_b,
            out_w,
            out_b,
        })
    }

    /// Visits every parameter with its manifest name, in manifest order.
    pub fn for_each_param(&self, f: &mut impl FnMut(String, &Tensor)) {
        if let Some(t) = &self.feat_id {
            f("embed.feat_id".into(), t);
        }
        if let Some(t) = &self.pe_learn {
            f("embed.pe_learn".into(), t);
        }
        f("in.w".into(), &self.in_w);
        f("in.b".into(), &self.in_b);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.temporal.for_each(&format!("layer{}.t1", l), f);
            layer.feature.for_each(&format!("layer{}.f1", l), f);
            if let Some(t2) = &layer.temporal2 {
                t2.for_each(&format!("layer{}.t2", l), f);
            }
            if let Some(f2) = &layer.feature2 {
                f2.for_each(&format!("layer{}.f2", l), f);
            }
        }
        if let Some(g) = &self.gate_w {
            f("fusion.gate".into(), g);
        }
        f("final_ln.g".into(), &self.final_ln_g);
        f("final_ln.b".into(), &self.final_ln_b);
        f("head.w".into(), &self.out_w);
        f("head.b".into(), &self.out_b);
    }

    /// Mutable traversal, same names and order as [`HelixModel::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        if let Some(t) = &mut self.feat_id {
            f("embed.feat_id".into(), t);
        }
        if let Some(t) = &mut self.pe_learn {
            f("embed.pe_learn".into(), t);
        }
        f("in.w".into(), &mut self.in_w);
        f("in.b".into(), &mut self.in_b);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.temporal.for_each_mut(&format!("layer{}.t1", l), f);
            layer.feature.for_each_mut(&format!("layer{}.f1", l), f);
            if let Some(t2) = &mut layer.temporal2 {
                t2.for_each_mut(&format!("layer{}.t2", l), f);
            }
            if let Some(f2) = &mut layer.feature2 {
                f2.for_each_mut(&format!("layer{}.f2", l), f);
            }
        }
        if let Some(g) = &mut self.gate_w {
            f("fusion.gate".into(), g);
        }
        f("final_ln.g".into(), &mut self.final_ln_g);
        f("final_ln.b".into(), &mut self.final_ln_b);
        f("head.w".into(), &mut self.out_w);
        f("head.b".into(), &mut self.out_b);
    }

    /// Parameter (name, tensor) pairs in manifest order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every parameter on the tape and returns the structured ids.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut ids = Vec::new();
        self.for_each_param(&mut |_, t| ids.push(tape.param(t)));
        BoundModel::from_ids(&self.config, &ids).expect("manifest and binder agree on arity")
    }

    /// Runs the forward pass with freshly bound parameters. Training loops
    /// that need gradient ids should bind first and call [`forward_bound`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        values: &Tensor,
        mask: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        record: bool,
    ) -> Result<ForwardOutput, TensorError> {
        let bound = self.bind(tape);
        forward_bound(tape, &self.config, &bound, values, mask, mode, rng, record)
    }
}

/// Tape ids of a bound model, arranged like the model itself.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub feat_id: Option<TensorId>,
    pub pe_learn: Option<TensorId>,
    pub in_w: TensorId,
    pub in_b: TensorId,
    pub layers: Vec<BoundLayer>,
    pub gate_w: Option<TensorId>,
    pub final_ln_g: TensorId,
    pub final_ln_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
    /// Every id above, flattened in manifest order.
    pub param_ids: Vec<TensorId>,
}

impl BoundModel {
    /// Reassembles the structure from ids listed in manifest order.
    pub fn from_ids(config: &ModelConfig, ids: &[TensorId]) -> Result<Self, TensorError> {
        let mut it = ids.iter().copied();
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| TensorError::contract("bind", format!("missing id for {}", what)))
        };
        let feat_id = if config.has_identity() { Some(next("embed.feat_id")?) } else { None };
        let pe_learn = if config.has_learnable_pe() { Some(next("embed.pe_learn")?) } else { None };
        let in_w = next("in.w")?;
        let in_b = next("in.b")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut take_block = |what: &str| -> Result<BoundAttention, TensorError> {
            let mut ten = Vec::with_capacity(10);
            for _ in 0..10 {
                ten.push(next(what)?);
            }
            Ok(BoundAttention::from_ids(&mut ten.into_iter()).expect("ten ids"))
        };
        for _ in 0..config.n_layers {
            let temporal = take_block("layer temporal")?;
            let feature = take_block("layer feature")?;
            let (temporal2, feature2) = if config.stage2_distinct {
                (Some(take_block("layer temporal2")?), Some(take_block("layer feature2")?))
            } else {
                (None, None)
            };
            layers.push(BoundLayer { temporal, feature, temporal2, feature2 });
        }
        let gate_w = if config.has_gate() { Some(next("fusion.gate")?) } else { None };
        let final_ln_g = next("final_ln.g")?;
        let final_ln_b = next("final_ln.b")?;
        let out_w = next("head.w")?;
        let out_b = next("head.b")?;
        if it.next().is_some() {
            return Err(TensorError::contract("bind", "more ids than the config accounts for"));
        }
        Ok(BoundModel {
            feat_id,
            pe_learn,
            in_w,
            in_b,
            layers,
            gate_w,
            final_ln_g,
            final_ln_b,
            out_w,
            out_b,
            param_ids: ids.to_vec(),
        })
    }
}

/// Everything a forward pass produces.
pub struct ForwardOutput {
    /// Reconstruction, `[B,T,F]`, for every entry whether observed or not.
    pub x_hat: TensorId,
    /// Projected input state `[B,T,F,d]` that fusion treats as level zero.
    pub h0: TensorId,
    /// Per-layer branch outputs and their fusion.
    pub traces: Vec<LayerTrace>,
    /// Attention matrices, present when recording was requested.
    pub attention: Option<AttentionRecord>,
}

/// The full pipeline on pre-bound parameters: embed, project, L layers,
/// fusion, LayerNorm, and the scalar head.
#[allow(clippy::too_many_arguments)]
pub fn forward_bound(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundModel,
    values: &Tensor,
    mask: &Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<ForwardOutput, TensorError> {
    if values.ndim() != 3 || values.shape()[2] != config.n_features {
        return Err(TensorError::shape(
            "forward",
            format!(
                "batch {:?} does not match the configured feature count {}",
                values.shape(),
                config.n_features
            ),
        ));
    }
    let (b, t_len, f) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let layout = config.layout();
    let pe = match bound.pe_learn {
        Some(id) => PeSource::Learnable(id),
        None => PeSource::Sinusoidal,
    };
    let embedded = embed_batch(tape, values, mask, bound.feat_id, pe, &layout)?;
    let h0 = project_input(tape, embedded, bound.in_w, bound.in_b)?;

    let mut h = h0;
    let mut traces = Vec::with_capacity(config.n_layers);
    let mut attention = if record { Some(AttentionRecord::default()) } else { None };
    for layer in &bound.layers {
        let (trace, recs) = if config.variant == Variant::NoHybrid {
            serial_layer(tape, h, layer, config.n_heads, config.dropout, mode, rng, record)?
        } else {
            helix_layer(tape, h, layer, config.n_heads, config.dropout, mode, rng, record)?
        };
        if let Some(rec) = attention.as_mut() {
            rec.layers.push(recs);
        }
        h = trace.fused;
        traces.push(trace);
    }

    let h_tilde = match config.variant {
        Variant::NoFusion => h,
        Variant::GatedFusion => {
            let gate = bound.gate_w.ok_or_else(|| {
                TensorError::contract("forward", "gated fusion requires a bound gate")
            })?;
            gated_fusion(tape, h0, &traces, gate)?
        }
        _ => multi_level_fusion(tape, h0, &traces)?,
    };

    let rows = b * t_len * f;
    let flat = tape.reshape(h_tilde, vec![rows, config.d])?;
    let normed = tape.layer_norm(flat, bound.final_ln_g, bound.final_ln_b)?;
    let y = tape.linear(normed, bound.out_w, bound.out_b)?;
    let x_hat = tape.reshape(y, vec![b, t_len, f])?;
    Ok(ForwardOutput { x_hat, h0, traces, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_multi;

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_features: 3,
            d: 8,
            n_heads: 2,
            n_layers: 1,
            d_pe: 4,
            d_f: 4,
            dropout: 0.0,
            variant,
            t_max: 16,
            stage2_distinct: false,
            store_attention: false,
        }
    }

    fn demo_batch(b: usize, t: usize, f: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = stream(seed, StreamKind::Data, 0);
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for _ in 0..b * t * f {
            values.push(uniform(&mut rng, -2.0, 2.0));
            mask.push(if uniform(&mut rng, 0.0, 1.0) < 0.3 { 0.0 } else { 1.0 });
        }
        (
            Tensor::new(vec![b, t, f], values).unwrap(),
            Tensor::new(vec![b, t, f], mask).unwrap(),
        )
    }

    fn eval_x_hat(model: &HelixModel, values: &Tensor, mask: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = stream(0, StreamKind::Dropout, 0);
        let out = model
            .forward(&mut tape, values, mask, Mode::Eval, &mut rng, false)
            .unwrap();
        tape.value(out.x_hat).data().to_vec()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("fancy".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::NoFeatid).unwrap(), "\"no_featid\"");
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let ok = tiny_config(Variant::Full);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.n_heads = 3;
        assert!(bad.validate().is_err(), "heads must divide width");
        let mut bad = ok.clone();
        bad.d_pe = 5;
        assert!(bad.validate().is_err(), "odd positional width");
        let mut bad = ok.clone();
        bad.dropout = 1.0;
        assert!(bad.validate().is_err(), "dropout 1 would zero everything");
        let mut bad = ok.clone();
        bad.d_f = 0;
        assert!(bad.validate().is_err(), "identity slots need width");
        bad.variant = Variant::NoFeatid;
        assert!(bad.validate().is_ok(), "no-identity variant ignores d_f");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = HelixModel::init(tiny_config(Variant::Full), 9).unwrap();
        let b = HelixModel::init(tiny_config(Variant::Full), 9).unwrap();
        let c = HelixModel::init(tiny_config(Variant::Full), 10).unwrap();
        let flat = |m: &HelixModel| {
            let mut v = Vec::new();
            m.for_each_param(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn manifest_names_are_unique_and_counts_match() {
        for variant in Variant::ALL {
            let mut cfg = tiny_config(variant);
            cfg.stage2_distinct = variant == Variant::Full;
            let model = HelixModel::init(cfg.clone(), 1).unwrap();
            let mut names = Vec::new();
            model.for_each_param(&mut |n, _| names.push(n));
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len(), "duplicate manifest name in {:?}", variant);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            assert_eq!(bound.param_ids.len(), names.len());
            let mut mut_names = Vec::new();
            let mut model = model;
            model.for_each_param_mut(&mut |n, _| mut_names.push(n));
            assert_eq!(mut_names, names, "mutable traversal must match in {:?}", variant);
        }
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        let (values, mask) = demo_batch(2, 5, 3, 41);
        for variant in Variant::ALL {
            let model = HelixModel::init(tiny_config(variant), 7).unwrap();
            let mut tape = Tape::new();
            let mut rng = stream(1, StreamKind::Dropout, 0);
            let out = model
                .forward(&mut tape, &values, &mask, Mode::Eval, &mut rng, true)
                .unwrap();
            assert_eq!(tape.value(out.x_hat).shape(), &[2, 5, 3], "{:?}", variant);
            assert!(tape.value(out.x_hat).all_finite(), "{:?}", variant);
            let branches = if variant == Variant::NoHybrid { 3 } else { 4 };
            assert_eq!(out.traces[0].branches.len(), branches, "{:?}", variant);
            let rec = out.attention.unwrap();
            assert_eq!(rec.layers.len(), 1);
            assert_eq!(rec.layers[0].len(), branches);
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let (values, mask) = demo_batch(2, 4, 3, 42);
        let model = HelixModel::init(tiny_config(Variant::Full), 3).unwrap();
        assert_eq!(eval_x_hat(&model, &values, &mask), eval_x_hat(&model, &values, &mask));
    }

    #[test]
    fn layer_traces_satisfy_fusion_identity() {
        let (values, mask) = demo_batch(1, 6, 3, 43);
        let mut cfg = tiny_config(Variant::Full);
        cfg.n_layers = 2;
        let model = HelixModel::init(cfg, 5).unwrap();
        let mut tape = Tape::new();
        let mut rng = stream(2, StreamKind::Dropout, 0);
        let out = model
            .forward(&mut tape, &values, &mask, Mode::Eval, &mut rng, false)
            .unwrap();
        for (l, trace) in out.traces.iter().enumerate() {
            let fused = tape.value(trace.fused).data();
            let parts: Vec<&[f64]> = trace.branches.iter().map(|&b| tape.value(b).data()).collect();
            for i in 0..fused.len() {
                let mean: f64 = parts.iter().map(|p| p[i]).sum::<f64>() / parts.len() as f64;
                assert!((fused[i] - mean).abs() < 1e-12, "layer {} index {}", l, i);
            }
        }
    }

    #[test]
    fn zero_gate_model_matches_uniform_fusion_model() {
        // same seed: the gate draws nothing, so all other weights coincide
        let (values, mask) = demo_batch(2, 4, 3, 44);
        let full = HelixModel::init(tiny_config(Variant::Full), 11).unwrap();
        let gated = HelixModel::init(tiny_config(Variant::GatedFusion), 11).unwrap();
        let a = eval_x_hat(&full, &values, &mask);
        let b = eval_x_hat(&gated, &values, &mask);
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-12, "index {}: {} vs {}", i, a[i], b[i]);
        }
    }

    #[test]
    fn learnable_pe_starts_at_sinusoidal_values() {
        let (values, mask) = demo_batch(1, 5, 3, 45);
        let sin = HelixModel::init(tiny_config(Variant::Full), 13).unwrap();
        let learn = HelixModel::init(tiny_config(Variant::LearnablePe), 13).unwrap();
        assert_eq!(
            eval_x_hat(&sin, &values, &mask),
            eval_x_hat(&learn, &values, &mask),
            "learnable table starts as an exact sinusoidal copy"
        );
    }

    #[test]
    fn no_featid_forward_is_feature_permutation_equivariant_bitwise() {
        let (b, t, f) = (2usize, 4usize, 3usize);
        let (values, mask) = demo_batch(b, t, f, 46);
        let model = HelixModel::init(tiny_config(Variant::NoFeatid), 17).unwrap();
        let perm = [2usize, 0, 1];
        let permute = |src: &Tensor| {
            let mut out = Tensor::zeros(vec![b, t, f]);
            for bi in 0..b {
                for ti in 0..t {
                    for fi in 0..f {
                        out.set(&[bi, ti, fi], src.at(&[bi, ti, perm[fi]]));
                    }
                }
            }
            out
        };
        let base = eval_x_hat(&model, &values, &mask);
        let permuted = eval_x_hat(&model, &permute(&values), &permute(&mask));
        for bi in 0..b {
            for ti in 0..t {
                for fi in 0..f {
                    let got = permuted[(bi * t + ti) * f + fi];
                    let want = base[(bi * t + ti) * f + perm[fi]];
                    assert!(got == want, "bit mismatch at {} {} {}", bi, ti, fi);
                }
            }
        }
    }

    #[test]
    fn featid_equivariance_needs_permuted_table() {
        let (b, t, f) = (1usize, 4usize, 3usize);
        let (values, mask) = demo_batch(b, t, f, 47);
        let model = HelixModel::init(tiny_config(Variant::Full), 19).unwrap();
        let perm = [1usize, 2, 0];
        let permute = |src: &Tensor| {
            let mut out = Tensor::zeros(vec![b, t, f]);
            for ti in 0..t {
                for fi in 0..f {
                    out.set(&[0, ti, fi], src.at(&[0, ti, perm[fi]]));
                }
            }
            out
        };
        let base = eval_x_hat(&model, &values, &mask);
        // permuting the inputs alone breaks the correspondence
        let plain = eval_x_hat(&model, &permute(&values), &permute(&mask));
        let mut any_off = false;
        for ti in 0..t {
            for fi in 0..f {
                if plain[ti * f + fi] != base[ti * f + perm[fi]] {
                    any_off = true;
                }
            }
        }
        assert!(any_off, "identity slots must break bare input permutation");
        // permuting the identity rows alongside restores it exactly
        let mut permuted_model = model.clone();
        let table = model.feat_id.as_ref().unwrap();
        let d_f = model.config.d_f;
        let mut rows = Tensor::zeros(vec![f, d_f]);
        for fi in 0..f {
            for c in 0..d_f {
                rows.set(&[fi, c], table.at(&[perm[fi], c]));
            }
        }
        permuted_model.feat_id = Some(rows);
        let fixed = eval_x_hat(&permuted_model, &permute(&values), &permute(&mask));
        for ti in 0..t {
            for fi in 0..f {
                assert!(
                    fixed[ti * f + fi] == base[ti * f + perm[fi]],
                    "bit mismatch at t{} f{}",
                    ti,
                    fi
                );
            }
        }
    }

    #[test]
    fn no_featid_all_missing_step_gets_uniform_feature_attention() {
        let (b, t, f) = (2usize, 4usize, 5usize);
        let mut cfg = tiny_config(Variant::NoFeatid);
        cfg.n_features = f;
        let model = HelixModel::init(cfg, 23).unwrap();
        // hide everything: every step is an all-missing step
        let values = Tensor::zeros(vec![b, t, f]);
        let mask = Tensor::zeros(vec![b, t, f]);
        let mut tape = Tape::new();
        let mut rng = stream(3, StreamKind::Dropout, 0);
        let out = model
            .forward(&mut tape, &values, &mask, Mode::Eval, &mut rng, true)
            .unwrap();
        let rec = out.attention.unwrap();
        let stage1 = rec.stage1_feature(0).unwrap();
        assert_eq!(stage1.size, f);
        let want = 1.0 / f as f64;
        for (i, &p) in stage1.probs.iter().enumerate() {
            assert!((p - want).abs() < 1e-12, "cell {}: {} vs uniform {}", i, p, want);
        }
    }

    #[test]
    fn full_model_attention_is_generically_nonuniform() {
        let (b, t, f) = (1usize, 3usize, 4usize);
        let mut cfg = tiny_config(Variant::Full);
        cfg.n_features = f;
        let model = HelixModel::init(cfg, 29).unwrap();
        let values = Tensor::zeros(vec![b, t, f]);
        let mask = Tensor::zeros(vec![b, t, f]);
        let mut tape = Tape::new();
        let mut rng = stream(4, StreamKind::Dropout, 0);
        let fwd = model
            .forward(&mut tape, &values, &mask, Mode::Eval, &mut rng, true)
            .unwrap();
        let rec = fwd.attention.unwrap();
        let stage1 = rec.stage1_feature(0).unwrap();
        let want = 1.0 / f as f64;
        let off = stage1.probs.iter().any(|&p| (p - want).abs() > 1e-6);
        assert!(off, "identity slots should break uniformity even when all inputs are missing");
    }

    #[test]
    fn forward_rejects_feature_mismatch() {
        let model = HelixModel::init(tiny_config(Variant::Full), 1).unwrap();
        let values = Tensor::zeros(vec![1, 4, 5]);
        let mask = Tensor::zeros(vec![1, 4, 5]);
        let mut tape = Tape::new();
        let mut rng = stream(5, StreamKind::Dropout, 0);
        assert!(model
            .forward(&mut tape, &values, &mask, Mode::Eval, &mut rng, false)
            .is_err());
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        let (values, mask) = demo_batch(1, 4, 3, 48);
        for variant in Variant::ALL {
            let model = HelixModel::init(tiny_config(variant), 31).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut rng = stream(6, StreamKind::Dropout, 0);
            let out = forward_bound(
                &mut tape, &model.config, &bound, &values, &mask, Mode::Train, &mut rng, false,
            )
            .unwrap();
            let absed = tape.abs(out.x_hat).unwrap();
            let loss = tape.sum_all(absed).unwrap();
            tape.backward(loss).unwrap();
            for (i, &id) in bound.param_ids.iter().enumerate() {
                let grad = tape.grad(id);
                assert!(grad.is_some(), "{:?} param {} received no gradient", variant, i);
            }
            // the gate is zero-initialized yet must still receive signal
            if let Some(gate) = bound.gate_w {
                let g = tape.grad(gate).unwrap();
                assert!(g.iter().any(|&v| v != 0.0), "gate gradient identically zero");
            }
        }
    }

    #[test]
    fn tiny_forward_gradient_matches_finite_differences() {
        // one-layer model small enough for a dense finite-difference sweep
        let mut cfg = tiny_config(Variant::Full);
        cfg.n_features = 2;
        cfg.d = 4;
        cfg.n_heads = 2;
        cfg.d_pe = 2;
        cfg.d_f = 2;
        let model = HelixModel::init(cfg.clone(), 37).unwrap();
        let (values, mask) = demo_batch(1, 3, 2, 49);
        let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let errs = grad_check_multi(
            |tape, ids| {
                let bound = BoundModel::from_ids(&cfg, ids)?;
                let mut rng = stream(7, StreamKind::Dropout, 0);
                let out =
                    forward_bound(tape, &cfg, &bound, &values, &mask, Mode::Eval, &mut rng, false)?;
                let absed = tape.abs(out.x_hat)?;
                tape.mean_all(absed)
            },
            &params,
            1e-5,
        )
        .unwrap();
        let worst = errs.iter().copied().fold(0.0f64, f64::max);
        assert!(worst < 1e-4, "max relative gradient error {}", worst);
    }
}
