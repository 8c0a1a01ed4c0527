//! Self-supervised training: artificial masking, the two reconstruction
//! losses, the fit loop with early stopping, and test-time imputation.
//!
//! Training sees only corrupted data. Each batch hides a random subset of
//! the entries that are still observed, reconstructs everything, and scores
//! the visible entries (reconstruction) and the hidden ones (imputation)
//! separately; the two masked mean absolute errors are added with equal
//! weight. Validation uses one fixed hiding pattern for a stable early
//! stopping signal.

use crate::adam::{AdamConfig, AdamState};
use crate::model::{forward_bound, HelixModel};
use crate::rng::{stream, uniform, StreamKind};
use crate::tape::{Mode, Tape, TensorId};
use crate::tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("window has no observations ({0})")]
    NoObservations(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A stack of `[N,T,F]` windows with their observation mask. Values are
/// zero-filled wherever the mask is 0, so a window set can be fed to the
/// model directly.
#[derive(Clone, Debug)]
pub struct WindowSet {
    values: Tensor,
    mask: Tensor,
}

impl WindowSet {
    pub fn new(values: Tensor, mask: Tensor) -> Result<Self, TensorError> {
        if values.ndim() != 3 {
            return Err(TensorError::shape(
                "window_set",
                format!("expected [N,T,F], got {:?}", values.shape()),
            ));
        }
        if mask.shape() != values.shape() {
            return Err(TensorError::shape(
                "window_set",
                format!("mask {:?} does not match values {:?}", mask.shape(), values.shape()),
            ));
        }
        if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(TensorError::invalid("window_set", format!("mask entry {} is not 0/1", bad)));
        }
        let filled: Vec<f64> = values.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
        let values = Tensor::new(values.shape().to_vec(), filled)?;
        Ok(WindowSet { values, mask })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn n_windows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn t_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn n_observed(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    /// Copies windows `start..start+len` into a new set.
    pub fn slice(&self, start: usize, len: usize) -> Result<WindowSet, TensorError> {
        let n = self.n_windows();
        if start + len > n {
            return Err(TensorError::invalid(
                "window_set",
                format!("slice {}..{} out of {} windows", start, start + len, n),
            ));
        }
        let stride = self.t_len() * self.n_features();
        let shape = vec![len, self.t_len(), self.n_features()];
        let values = Tensor::new(shape.clone(), self.values.data()[start * stride..(start + len) * stride].to_vec())?;
        let mask = Tensor::new(shape, self.mask.data()[start * stride..(start + len) * stride].to_vec())?;
        Ok(WindowSet { values, mask })
    }

    /// `(start, len)` pairs covering all windows in order, each at most
    /// `batch_size` long.
    pub fn batch_ranges(&self, batch_size: usize) -> Vec<(usize, usize)> {
        let n = self.n_windows();
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch_size.min(n - start);
            out.push((start, len));
            start += len;
        }
        out
    }
}

/// The three index sets of one training step, as 0/1 tensors over `[N,T,F]`:
/// originally observed entries, the artificially hidden subset, and the
/// model-input mask (observed minus hidden), which is also the residual set.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub observed: Tensor,
    pub art: Tensor,
    pub input_mask: Tensor,
}

impl MaskPlan {
    pub fn n_observed(&self) -> usize {
        self.observed.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn n_art(&self) -> usize {
        self.art.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn n_residual(&self) -> usize {
        self.input_mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Hides each observed entry independently with probability `ratio`.
/// Entries that are already missing never enter the hidden set.
pub fn make_artificial_mask(
    mask: &Tensor,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan, TrainError> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(TensorError::invalid(
            "artificial_mask",
            format!("mask ratio must lie in (0, 1), got {}", ratio),
        )
        .into());
    }
    if !mask.data().iter().any(|&m| m == 1.0) {
        return Err(TrainError::NoObservations(format!("mask shape {:?}", mask.shape())));
    }
    let mut art = vec![0.0; mask.numel()];
    let mut input = vec![0.0; mask.numel()];
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1.0 {
            if uniform(rng, 0.0, 1.0) < ratio {
                art[i] = 1.0;
            } else {
                input[i] = 1.0;
            }
        }
    }
    Ok(MaskPlan {
        observed: mask.clone(),
        art: Tensor::new(mask.shape().to_vec(), art)?,
        input_mask: Tensor::new(mask.shape().to_vec(), input)?,
    })
}

/// Differentiable losses of one batch, living on the tape.
pub struct TapeLosses {
    pub ort: TensorId,
    pub mit: TensorId,
    pub total: TensorId,
    pub n_residual: usize,
    pub n_art: usize,
}

fn masked_mean_abs(
    tape: &mut Tape,
    x_hat: TensorId,
    truth: &Tensor,
    set: &Tensor,
    count: usize,
) -> Result<TensorId, TensorError> {
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let truth_id = tape.constant(truth.clone());
    let set_id = tape.constant(set.clone());
    let diff = tape.sub(x_hat, truth_id)?;
    let picked = tape.mul(diff, set_id)?;
    let absed = tape.abs(picked)?;
    let sum = tape.sum_all(absed)?;
    tape.scale(sum, 1.0 / count as f64)
}

/// Mean absolute error over the residual set (ORT) and the hidden set (MIT),
/// plus their equal-weight sum. A set with no entries scores 0.
pub fn tape_losses(
    tape: &mut Tape,
    x_hat: TensorId,
    truth: &Tensor,
    plan: &MaskPlan,
) -> Result<TapeLosses, TensorError> {
    let n_residual = plan.n_residual();
    let n_art = plan.n_art();
    let ort = masked_mean_abs(tape, x_hat, truth, &plan.input_mask, n_residual)?;
    let mit = masked_mean_abs(tape, x_hat, truth, &plan.art, n_art)?;
    let total = tape.add(ort, mit)?;
    Ok(TapeLosses { ort, mit, total, n_residual, n_art })
}

/// Scalar view of one batch's losses.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub ort: f64,
    pub mit: f64,
    pub total: f64,
    pub n_residual: usize,
    pub n_art: usize,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability that an observed entry is hidden during a training step.
    pub mask_ratio: f64,
    /// Root of all randomness in a fit. Not a config-file field: runs carry
    /// one top-level seed that is copied here before training.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            patience: 10,
            batch_size: 16,
            lr: 1e-3,
            mask_ratio: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(0.0..1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return Err(TensorError::invalid(
                "train_config",
                format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio),
            ));
        }
        if self.patience == 0 {
            return Err(TensorError::invalid("train_config", "patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TensorError::invalid("train_config", "batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(TensorError::invalid("train_config", format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One history row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

/// A trained model with its training record.
pub struct FitResult {
    pub model: HelixModel,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights the returned model carries; None when no epoch ran.
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

fn snapshot(model: &HelixModel) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.for_each_param(&mut |_, t| out.push(t.data().to_vec()));
    out
}

fn restore(model: &mut HelixModel, snap: &[Vec<f64>]) {
    let mut i = 0;
    model.for_each_param_mut(&mut |_, t| {
        t.data_mut().copy_from_slice(&snap[i]);
        i += 1;
    });
}

/// Mean absolute error of the model on `set`, hiding `plan.art` from the
/// input and scoring only those entries. Falls back to all observed entries
/// when the plan hid nothing.
fn validation_mae(
    model: &HelixModel,
    set: &WindowSet,
    plan: &MaskPlan,
    batch_size: usize,
) -> Result<(f64, bool), TrainError> {
    let stride = set.t_len() * set.n_features();
    let mut err_sum = 0.0;
    let mut n = 0usize;
    let degenerate = plan.n_art() == 0;
    for (start, len) in set.batch_ranges(batch_size) {
        let lo = start * stride;
        let hi = (start + len) * stride;
        let shape = vec![len, set.t_len(), set.n_features()];
        let values = Tensor::new(shape.clone(), set.values().data()[lo..hi].to_vec())?;
        let input_mask = Tensor::new(shape, plan.input_mask.data()[lo..hi].to_vec())?;
        let mut tape = Tape::new();
        let mut rng = stream(0, StreamKind::Dropout, 0);
        let out = model.forward(&mut tape, &values, &input_mask, Mode::Eval, &mut rng, false)?;
        let x_hat = tape.value(out.x_hat).data();
        let score_set = if degenerate { plan.observed.data() } else { plan.art.data() };
        for i in 0..hi - lo {
            if score_set[lo + i] == 1.0 {
                err_sum += (x_hat[i] - set.values().data()[lo + i]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(TrainError::NoObservations("validation split".into()));
    }
    Ok((err_sum / n as f64, degenerate))
}

/// Trains `model` on corrupted windows, early-stopping on validation error.
///
/// Per epoch, batches run in fixed chronological order; each batch draws a
/// fresh artificial mask and dropout stream addressed by (epoch, batch), so
/// a given seed reproduces the run bit for bit. The best-validation weights
/// are restored before returning.
pub fn fit(
    mut model: HelixModel,
    train: &WindowSet,
    val: &WindowSet,
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    model.config.validate()?;
    let mut warnings = Vec::new();
    let mut history = Vec::new();
    if cfg.epochs == 0 {
        return Ok(FitResult { model, history, best_epoch: None, warnings });
    }

    let mut val_rng = stream(cfg.seed, StreamKind::ValMask, 0);
    let val_plan = make_artificial_mask(val.mask(), cfg.mask_ratio, &mut val_rng)?;

    let mut sizes = Vec::new();
    model.for_each_param(&mut |_, t| sizes.push(t.numel()));
    let mut opt = AdamState::with_sizes(&sizes);
    let adam_cfg = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };

    let ranges = train.batch_ranges(cfg.batch_size);
    let n_batches = ranges.len();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut stall = 0usize;
    let mut warned_empty_residual = false;
    let mut warned_degenerate_val = false;

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (b_idx, &(start, len)) in ranges.iter().enumerate() {
            let batch = train.slice(start, len)?;
            let instance = (epoch * n_batches + b_idx) as u64;
            let mut mask_rng = stream(cfg.seed, StreamKind::Masking, instance);
            let plan = make_artificial_mask(batch.mask(), cfg.mask_ratio, &mut mask_rng)?;
            if plan.n_residual() == 0 && !warned_empty_residual {
                warnings.push(format!(
                    "epoch {} batch {}: every observed entry was hidden; reconstruction loss is 0",
                    epoch, b_idx
                ));
                warned_empty_residual = true;
            }

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut drop_rng = stream(cfg.seed, StreamKind::Dropout, instance);
            let out = forward_bound(
                &mut tape,
                &model.config,
                &bound,
                batch.values(),
                &plan.input_mask,
                Mode::Train,
                &mut drop_rng,
                false,
            )?;
            let losses = tape_losses(&mut tape, out.x_hat, batch.values(), &plan)?;
            let total = tape.value(losses.total).item()?;
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b_idx });
            }
            epoch_loss += total;
            tape.backward(losses.total)?;

            let grads: Vec<Vec<f64>> = bound
                .param_ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; sizes[i]])
                })
                .collect();
            opt.begin_step();
            let mut i = 0;
            let mut step_err: Option<TensorError> = None;
            model.for_each_param_mut(&mut |_, t| {
                if step_err.is_none() {
                    if let Err(e) = opt.update(i, t, &grads[i], &adam_cfg) {
                        step_err = Some(e);
                    }
                }
                i += 1;
            });
            if let Some(e) = step_err {
                return Err(e.into());
            }
        }
        let train_loss = epoch_loss / n_batches as f64;
        let (val_mae, degenerate) = validation_mae(&model, val, &val_plan, cfg.batch_size)?;
        if degenerate && !warned_degenerate_val {
            warnings.push("validation plan hid no entries; scoring all observed entries instead".into());
            warned_degenerate_val = true;
        }
        history.push(EpochStats { epoch, train_loss, val_mae });

        let improved = best.as_ref().map(|(_, b, _)| val_mae < *b).unwrap_or(true);
        if improved {
            best = Some((epoch, val_mae, snapshot(&model)));
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }

    let best_epoch = best.map(|(epoch, _, snap)| {
        restore(&mut model, &snap);
        epoch
    });
    Ok(FitResult { model, history, best_epoch, warnings })
}

/// Reconstructs a window set in eval mode: observed entries pass through
/// unchanged, missing entries take the model's output.
pub fn impute(
    model: &HelixModel,
    set: &WindowSet,
    batch_size: usize,
) -> Result<Tensor, TrainError> {
    let stride = set.t_len() * set.n_features();
    let mut out = vec![0.0; set.values().numel()];
    for (start, len) in set.batch_ranges(batch_size) {
        let batch = set.slice(start, len)?;
        let mut tape = Tape::new();
        let mut rng = stream(0, StreamKind::Dropout, 0);
        let fwd = model.forward(&mut tape, batch.values(), batch.mask(), Mode::Eval, &mut rng, false)?;
        let x_hat = tape.value(fwd.x_hat).data();
        let lo = start * stride;
        for i in 0..len * stride {
            out[lo + i] = if batch.mask().data()[i] == 1.0 {
                batch.values().data()[i]
            } else {
                x_hat[i]
            };
        }
    }
    Ok(Tensor::new(set.values().shape().to_vec(), out)?)
}
