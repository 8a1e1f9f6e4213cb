//! Adam with bias correction.

use sapnet_autograd::Tensor;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl Adam {
    /// Fresh state for parameters of the given shapes, with the usual
    /// `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Input(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Input(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in iter {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / correction1;
                let v_hat = *vv / correction2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec([3], vec![1.0, -2.0, 0.5]);
        let mut adam = Adam::new([&p]);
        let g = Tensor::from_vec([3], vec![0.3, -4.0, 1e-3]);
        adam.update(vec![&mut p], &[g], 0.1).unwrap();
        // with bias correction the first step is lr * g / (|g| + eps)
        for (got, want) in p.data().iter().zip([0.9, -1.9, 0.4]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::from_vec([2], vec![3.0, -1.5]);
        let mut adam = Adam::new([&p]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            adam.update(vec![&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.max_abs() < 1e-3);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = Tensor::zeros([2]);
        let mut adam = Adam::new([&p]);
        assert!(adam.update(vec![&mut p], &[Tensor::zeros([3])], 0.1).is_err());
    }
}
