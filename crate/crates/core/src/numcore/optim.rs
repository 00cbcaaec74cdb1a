//! First-order optimizers over flat parameter slices.

use crate::{Error, Result};

/// Anything that turns gradients into parameter updates.
pub trait Optimizer {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

fn check_shapes(state: &[Vec<f64>], params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors, {} gradient tensors, {} state tensors",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(state).enumerate() {
        if p.len() != g.len() || p.len() != s.len() {
            return Err(Error::Shape(format!(
                "tensor {i}: parameter {} / gradient {} / state {}",
                p.len(),
                g.len(),
                s.len()
            )));
        }
    }
    Ok(())
}

fn lazy_state(state: &mut Vec<Vec<f64>>, params: &[&mut [f64]]) {
    if state.is_empty() {
        *state = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← momentum·v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        lazy_state(&mut self.velocity, params);
        check_shapes(&self.velocity, params, grads)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        lazy_state(&mut self.m, params);
        lazy_state(&mut self.v, params);
        check_shapes(&self.m, params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Cosine decay from `lr_init` at epoch 0 to zero at the last epoch.
pub fn cosine_lr(lr_init: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr_init;
    }
    let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    0.5 * lr_init * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_sgd(opt: &mut SgdMomentum, p: &mut [f64], g: &[f64], steps: usize) {
        for _ in 0..steps {
            opt.step(&mut [&mut *p], &[g]).unwrap();
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = SgdMomentum::new(1.0, 0.0, 0.0);
        let mut p = [3.0, -1.0];
        run_sgd(&mut opt, &mut p, &[0.5, 2.0], 1);
        assert_eq!(p, [2.5, -3.0]);
    }

    #[test]
    fn momentum_two_steps() {
        let mut opt = SgdMomentum::new(1.0, 0.9, 0.0);
        let mut p = [0.0];
        run_sgd(&mut opt, &mut p, &[1.0], 2);
        // decrease 1 then 1.9
        assert!((p[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
        let mut p = [1.5, 2.5];
        run_sgd(&mut opt, &mut p, &[0.0, 0.0], 5);
        assert_eq!(p, [1.5, 2.5]);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.5);
        let mut p = [2.0];
        run_sgd(&mut opt, &mut p, &[0.0], 1);
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0);
        let mut p = [1.0, 2.0];
        assert!(opt.step(&mut [&mut p], &[&[1.0]]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = [4.0, -3.0];
        for _ in 0..2000 {
            let g = [2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 50), 1e-4);
        assert!(cosine_lr(1e-4, 49, 50) <= 1e-7);
        assert!((cosine_lr(1.0, 1, 3) - 0.5).abs() < 1e-15);
        let lrs: Vec<f64> = (0..50).map(|e| cosine_lr(1.0, e, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
