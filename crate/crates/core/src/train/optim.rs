//! Adam and the plateau learning-rate schedule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelState, Real};

/// First/second-moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: ModelState<T>,
    pub v: ModelState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(like: &ModelState<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, state: &mut ModelState<T>, grads: &ModelState<T>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(lr);
        let params = state.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, m)), (_, v)), (_, g)) in
            params.into_iter().zip(ms).zip(vs).zip(grads.tensors())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Halves the learning rate when the running average of validation losses
/// has not improved for `window_steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub window_steps: usize,
    /// Validation checks averaged into the running value.
    pub running_len: usize,
    pub recent: VecDeque<f64>,
    pub best: Option<f64>,
    /// Step of the last improvement or halving.
    pub clock_start: usize,
    pub halvings: usize,
}

impl PlateauSchedule {
    pub fn new(window_steps: usize, running_len: usize) -> Self {
        Self {
            window_steps,
            running_len: running_len.max(1),
            recent: VecDeque::new(),
            best: None,
            clock_start: 0,
            halvings: 0,
        }
    }

    pub fn running_average(&self) -> Option<f64> {
        (!self.recent.is_empty())
            .then(|| self.recent.iter().sum::<f64>() / self.recent.len() as f64)
    }

    /// Records the validation loss measured after `step` completed steps and
    /// returns the learning rate to use from now on.
    pub fn update(&mut self, step: usize, val_loss: f64, lr: f64) -> f64 {
        self.recent.push_back(val_loss);
        while self.recent.len() > self.running_len {
            self.recent.pop_front();
        }
        let avg = self.running_average().unwrap_or(val_loss);
        if self.best.is_none_or(|b| avg < b) {
            self.best = Some(avg);
            self.clock_start = step;
            return lr;
        }
        if step - self.clock_start >= self.window_steps {
            self.clock_start = step;
            self.halvings += 1;
            log::info!(
                "step {step}: validation plateau, learning rate {lr} -> {}",
                lr / 2.0
            );
            return lr / 2.0;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            stage_channels: vec![1],
            embed_dim: 1,
            proj_dim: 1,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = ModelState::<f64>::zeros(&tiny()).unwrap();
        st.bilinear[[0, 0]] = 0.7;
        let before = st.clone();
        let mut adam = Adam::new(&st, 0.9, 0.999, 1e-8);
        adam.step(&mut st, &before.zeros_like(), 1e-3);
        assert_eq!(st, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut st = ModelState::<f64>::zeros(&tiny()).unwrap();
        let mut g = st.zeros_like();
        g.bilinear[[0, 0]] = 1.0;
        let mut adam = Adam::new(&st, 0.9, 0.999, 1e-8);
        adam.step(&mut st, &g, 1e-3);
        assert!((st.bilinear[[0, 0]] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn decreasing_losses_never_halve() {
        let mut s = PlateauSchedule::new(30, 10);
        let mut lr = 1.0;
        for k in 1..=100 {
            lr = s.update(10 * k, 10.0 - k as f64 * 0.01, lr);
        }
        assert_eq!(lr, 1.0);
    }

    #[test]
    fn constant_losses_halve_once_per_window() {
        let mut s = PlateauSchedule::new(100, 10);
        let mut lr = 1.0;
        let mut halved_at = vec![];
        for k in 1..=35 {
            let new = s.update(10 * k, 2.0, lr);
            if new < lr {
                halved_at.push(10 * k);
            }
            lr = new;
        }
        assert_eq!(halved_at, vec![110, 210, 310]);
        assert_eq!(lr, 0.125);
    }

    #[test]
    fn improvement_just_inside_window_prevents_halving() {
        let mut s = PlateauSchedule::new(100, 1);
        let mut lr = 1.0;
        lr = s.update(10, 2.0, lr);
        lr = s.update(100, 1.0, lr);
        lr = s.update(190, 1.0, lr);
        assert_eq!(lr, 1.0);
        lr = s.update(200, 1.0, lr);
        assert_eq!(lr, 0.5);
    }
}
