//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("optim.lr must be nonnegative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optim.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps < 0.0 {
            return Err(Error::Config("optim.eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One Adam update of a parameter buffer at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    debug_assert!(t >= 1);
    let c1 = T::c(1.0 - beta1.powf(t as f64));
    let c2 = T::c(1.0 - beta2.powf(t as f64));
    let (b1, b2) = (T::c(beta1), T::c(beta2));
    let (lr, eps) = (T::c(lr), T::c(eps));
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a fixed group of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor<T>> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Adam {
            config,
            v: m.clone(),
            m,
            ids,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    pub fn moments(&self, k: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m[k], &self.v[k])
    }

    pub fn moments_mut(&mut self, k: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.m[k], &mut self.v[k])
    }

    /// Applies one update; parameters of the group missing from `grads`
    /// are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &Tensor<T>)]) -> Result<()> {
        self.t += 1;
        let c = self.config;
        for (k, &id) in self.ids.iter().enumerate() {
            let zeros;
            let g = match grads.iter().find(|(gid, _)| *gid == id) {
                Some((_, g)) => *g,
                None => {
                    zeros = Tensor::zeros(store.get(id).shape());
                    &zeros
                }
            };
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            adam_update(
                p.data_mut(),
                g.data(),
                self.m[k].data_mut(),
                self.v[k].data_mut(),
                self.t,
                c.lr,
                c.beta1,
                c.beta2,
                c.eps,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = [1.5f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.5, 0.999, 1e-8);
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn sign_sgd_limit() {
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[3.0], &mut m, &mut v, 1, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(p, [-1.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // Iterating the recurrence: with a constant gradient both bias
        // corrected moments equal g and g^2 exactly, so every step is
        // lr * g / (|g| + eps).
        let (lr, eps) = (0.01, 1e-8);
        let g = 0.3;
        let mut p = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adam_update(&mut p, &[g], &mut m, &mut v, t, lr, 0.5, 0.999, eps);
            last = before - p[0];
        }
        assert!((last - lr * g / (g + eps)).abs() < 1e-12);
        assert!((last - lr).abs() < 1e-9);
    }

    #[test]
    fn group_step_with_missing_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store, vec![a, b]);
        let g = Tensor::full(&[2], 0.5);
        opt.step(&mut store, &[(a, &g)]).unwrap();
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::from_fn(&[3], |i| i as f32 * 0.1)).unwrap();
        let before = store.get(a).clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &store, vec![a]);
        let g = Tensor::full(&[3], 2.0);
        for _ in 0..5 {
            opt.step(&mut store, &[(a, &g)]).unwrap();
        }
        assert_eq!(store.get(a), &before);
    }
}
