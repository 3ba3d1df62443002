use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Cosine decay from the base learning rate to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub min_lr: f64,
    pub total_steps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    lr: f64,
    schedule: Option<CosineSchedule>,
}

impl AdamState {
    pub fn new(params: &[Tensor], lr: f64, schedule: Option<CosineSchedule>) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.rows(), p.cols());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
            lr,
            schedule,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used for the update taken after `completed` steps.
    pub fn learning_rate_at(&self, completed: u64) -> f64 {
        match self.schedule {
            None => self.lr,
            Some(s) if s.total_steps == 0 => s.min_lr,
            Some(s) => {
                let frac = (completed.min(s.total_steps)) as f64 / s.total_steps as f64;
                s.min_lr + 0.5 * (self.lr - s.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", format!("tensor {i} size mismatch")));
            }
        }
        let lr = self.learning_rate_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::row_vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p, 0.1, None);
        s.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::row_vector(vec![0.0, 0.0, 0.0])];
        let g = Tensor::row_vector(vec![3.0, -0.01, 250.0]);
        let mut s = AdamState::new(&p, 1e-3, None);
        s.step(&mut p, &[g.clone()]).unwrap();
        for (pi, gi) in p[0].data().iter().zip(g.data()) {
            // Closed form: -lr * g / (|g| + eps).
            let want = -1e-3 * gi / (gi.abs() + EPSILON);
            assert!((pi - want).abs() < 1e-15);
            assert!((pi + 1e-3 * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_endpoints() {
        let p = vec![Tensor::zeros(1, 1)];
        let s = AdamState::new(
            &p,
            5e-4,
            Some(CosineSchedule {
                min_lr: 5e-6,
                total_steps: 100,
            }),
        );
        assert_eq!(s.learning_rate_at(0), 5e-4);
        assert!((s.learning_rate_at(100) - 5e-6).abs() < 1e-18);
        assert!((s.learning_rate_at(500) - 5e-6).abs() < 1e-18);
        let mid = s.learning_rate_at(50);
        assert!((mid - 0.5 * (5e-4 + 5e-6)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros(1, 2)];
        let mut s = AdamState::new(&p, 0.1, None);
        assert!(s.step(&mut p, &[Tensor::zeros(1, 3)]).is_err());
    }
}
