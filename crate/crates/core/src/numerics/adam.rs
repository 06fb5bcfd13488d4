use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }

    /// One bias-corrected step over a list of parameter tensors.
    pub fn step(
        &self,
        params: &mut [Tensor],
        grads: &[Tensor],
        moments: &mut AdamMoments,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != moments.m.len() {
            return Err(invalid(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                moments.m.len()
            )));
        }
        moments.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            adam_update(
                p.data_mut(),
                grads[i].data(),
                moments.m[i].data_mut(),
                moments.v[i].data_mut(),
                moments.step,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )?;
        }
        Ok(())
    }
}

/// First and second moment estimates paired with a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamMoments {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step_index: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(invalid("adam_update: arrays are not shape-aligned"));
    }
    if step_index == 0 {
        return Err(invalid("adam_update: step index starts at 1"));
    }
    let bc1 = 1.0 - beta1.powi(step_index as i32);
    let bc2 = 1.0 - beta2.powi(step_index as i32);
    for i in 0..n {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, mut m, mut v) = (vec![0.0], vec![0.0], vec![0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.95, 1e-8).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5, -2.0, 3.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &[0.0; 3], &mut m, &mut v, 1, 0.1, 0.9, 0.95, 1e-8).unwrap();
        assert_eq!(p, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn reproducible_bit_for_bit() {
        let run = || {
            let mut p = vec![0.3, -0.7];
            let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
            for t in 1..=2 {
                adam_update(&mut p, &[0.25, -1.5], &mut m, &mut v, t, 0.01, 0.9, 0.95, 1e-8)
                    .unwrap();
            }
            (p, m, v)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert_eq!(a.0[1].to_bits(), b.0[1].to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_misaligned() {
        let mut p = vec![0.0; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.95, 1e-8).is_err());
        assert!(adam_update(&mut p, &[1.0, 1.0], &mut m, &mut v, 0, 0.1, 0.9, 0.95, 1e-8).is_err());
    }
}
