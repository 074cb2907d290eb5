use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Step size with linear warmup followed by exponential decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Steps for the step size to halve; `None` keeps it constant.
    #[serde(default)]
    pub half_life_steps: Option<usize>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            warmup_steps: 0,
            half_life_steps: None,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.half_life_steps {
            Some(h) if h > 0 => 0.5f64.powf(step as f64 / h as f64),
            _ => 1.0,
        };
        self.base * warm * decay
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Stochastic gradient descent, optionally with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub schedule: LrSchedule,
    pub momentum: f64,
    velocity: Vec<Tensor>,
    step: usize,
}

impl Sgd {
    pub fn new(schedule: LrSchedule, momentum: f64) -> Self {
        Self {
            schedule,
            momentum,
            velocity: vec![],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        let lr = self.schedule.at(self.step);
        if self.momentum > 0.0 && self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if self.momentum > 0.0 {
                let v = &mut self.velocity[i];
                for (vv, &gg) in v.data_mut().iter_mut().zip(g.data()) {
                    *vv = self.momentum * *vv + gg;
                }
                p.add_scaled(v, -lr);
            } else {
                p.add_scaled(g, -lr);
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_half_life() {
        let s = LrSchedule {
            base: 1.0,
            warmup_steps: 4,
            half_life_steps: Some(10),
        };
        assert!((s.at(0) - 0.25 * 1.0).abs() < 1e-12);
        assert!((s.at(10) - 0.5).abs() < 1e-12);
        assert_eq!(LrSchedule::constant(0.3).at(1000), 0.3);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![
            Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(),
            Tensor::new(vec![1], vec![4.0]).unwrap(),
        ];
        let before = clip_global_norm(&mut g, 0.5);
        assert_eq!(before, 5.0);
        let after: f64 = g.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((after - 0.5).abs() < 1e-12);
    }

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut p = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut opt = Sgd::new(LrSchedule::constant(0.5), 0.0);
        opt.step(vec![&mut p], &[g]);
        assert_eq!(p.data(), &[0.5, 2.0]);
    }
}
