//! Parameter updates. Tapes are rebuilt every iteration, so optimizers key
//! their state by parameter position in a fixed ordering.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive moment estimation.
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// SGD with classical momentum.
pub struct SgdMomentum<T> {
    pub momentum: f64,
    vel: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            vel: Vec::new(),
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        if self.vel.is_empty() {
            self.vel = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let mu = T::of(self.momentum);
        let lr = T::of(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.vel.iter_mut()) {
            for ((pv, &gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let g = Tensor::from_vec(&[1], vec![2.0 * (x.data()[0] - 3.0)]).unwrap();
            opt.step(&mut [&mut x], &[&g]);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "x = {}", x.data()[0]);
    }

    #[test]
    fn sgd_momentum_descends() {
        let mut x = Tensor::<f64>::from_vec(&[1], vec![4.0]).unwrap();
        let mut opt = SgdMomentum::new(0.9);
        for _ in 0..200 {
            let g = Tensor::from_vec(&[1], vec![2.0 * x.data()[0]]).unwrap();
            opt.step(0.05, &mut [&mut x], &[&g]);
        }
        assert!(x.data()[0].abs() < 1e-3);
    }
}
