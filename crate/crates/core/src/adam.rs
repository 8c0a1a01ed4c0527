//! Adam optimizer over flat parameter lists.

use crate::tensor::{Tensor, TensorError};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    /// Zero-initialized state matching the given parameter list.
    pub fn new(params: &[&Tensor]) -> Self {
        Self::with_sizes(&params.iter().map(|p| p.numel()).collect::<Vec<_>>())
    }

    /// Zero-initialized state for parameters given by element count alone.
    pub fn with_sizes(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    /// Advances the shared step counter; call once before a round of
    /// [`AdamState::update`] calls covering every parameter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies the current step's update to parameter `i`. Every parameter
    /// must be updated exactly once between [`AdamState::begin_step`] calls.
    pub fn update(
        &mut self,
        i: usize,
        param: &mut Tensor,
        grad: &[f64],
        cfg: &AdamConfig,
    ) -> Result<(), TensorError> {
        if i >= self.m.len() {
            return Err(TensorError::contract(
                "adam_update",
                format!("parameter index {} beyond state for {}", i, self.m.len()),
            ));
        }
        if param.numel() != grad.len() || param.numel() != self.m[i].len() {
            return Err(TensorError::shape(
                "adam_update",
                format!(
                    "param {} has {} elements, grad {}, state {}",
                    i,
                    param.numel(),
                    grad.len(),
                    self.m[i].len()
                ),
            ));
        }
        if self.step == 0 {
            return Err(TensorError::contract("adam_update", "begin_step must run first"));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        let data = param.data_mut();
        for j in 0..data.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// One Adam update with bias correction. `grads` aligns with `params`
/// element-for-element; moment buffers update in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::contract(
            "adam_step",
            format!(
                "got {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!("param {} has {} elements, grad has {}", i, p.numel(), g.len()),
            ));
        }
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.data().to_vec();
        let mut state = AdamState::new(&[&p]);
        let g = vec![0.0; 3];
        adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // One scalar parameter, g = 0.4, default hyperparameters.
        let cfg = AdamConfig::default();
        let g = 0.4;
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let mhat = m / (1.0 - cfg.beta1);
        let vhat = v / (1.0 - cfg.beta2);
        let want = 2.0 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);

        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&[g][..]], &mut state, &cfg).unwrap();
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn three_steps_match_sequential_oracle() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let grads = [0.4, -0.2, 0.7];
        // Sequential scalar oracle.
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            x -= cfg.lr * (m / (1.0 - cfg.beta1.powi(t))) / ((v / (1.0 - cfg.beta2.powi(t))).sqrt() + cfg.eps);
        }
        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(&[&p]);
        for &g in &grads {
            adam_step(&mut [&mut p], &[&[g][..]], &mut state, &cfg).unwrap();
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(&[&p]);
        let g = vec![0.0; 2];
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.9]).unwrap();
            let mut state = AdamState::new(&[&p]);
            for step in 0..50 {
                let g = vec![(step as f64 * 0.01).sin(), (step as f64 * 0.02).cos()];
                adam_step(&mut [&mut p], &[&g], &mut state, &AdamConfig::default()).unwrap();
            }
            p.data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
