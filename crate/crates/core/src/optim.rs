//! Bias-corrected Adam.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero-initialized moments shaped like `params`, `beta1 = 0.9`, `beta2 = 0.999`.
    pub fn new(params: &[Tensor<T>], learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Result<Self> {
        for b in [beta1, beta2] {
            if !(b > 0.0 && b < 1.0) {
                return invalid(format!("Adam beta {b} must lie in (0, 1)"));
            }
        }
        self.beta1 = beta1;
        self.beta2 = beta2;
        Ok(self)
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return shape_err(format!(
                "Adam tracks {} parameters but got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            p.check_same_shape(g)?;
            p.check_same_shape(m)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::<f32>::new(&[3], vec![1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.1);
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 so the step is lr / (1 + eps).
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(&p, 0.1);
        st.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_shapes_and_betas() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&p, 0.1);
        assert!(st.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(AdamState::<f32>::new(&[], 0.1).with_betas(1.0, 0.5).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = vec![Tensor::<f32>::new(&[2], vec![0.3, -0.7]).unwrap()];
            let mut st = AdamState::new(&p, 0.01);
            for i in 0..50 {
                let g = p[0].map(|x| 2.0 * x + i as f32 * 1e-3);
                st.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
