//! Dense adaptive-moment optimizer for head / from-scratch training.

use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewMutD};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
        }
    }

    pub fn for_params(lr: F, params: &[ArrayD<F>]) -> Self {
        let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        Adam::new(lr, &shapes)
    }

    pub fn set_lr(&mut self, lr: F) {
        self.lr = lr;
    }

    pub fn lr(&self) -> F {
        self.lr
    }

    pub fn step(&mut self, mut params: Vec<ArrayViewMutD<'_, F>>, grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1c = F::one() - self.beta1.powi(self.t as i32);
        let b2c = F::one() - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                    let mh = *m / b1c;
                    let vh = *v / b2c;
                    *p = *p - self.lr * mh / (vh.sqrt() + self.epsilon);
                });
        }
    }
}
