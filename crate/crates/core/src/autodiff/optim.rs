use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Real;

/// Step-decay learning rate: `base_lr * gamma^floor(epoch / step_size)`.
pub fn steplr(base_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    let drops = epoch.checked_div(step_size).unwrap_or(0);
    base_lr * gamma.powi(drops as i32)
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Adam with per-parameter step counters; parameters absent from a gradient
/// map are left untouched and their counters do not advance.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: IndexMap<String, Moments<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: IndexMap::new(),
        }
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.step)
    }

    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor<T>>,
        grads: &IndexMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let eps = T::lit(self.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| shape_err!("gradient for unknown parameter {name}"))?;
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
                step: 0,
            });
            st.step += 1;
            let bc1 = T::one() - b1.powi(st.step as i32);
            let bc2 = T::one() - b2.powi(st.step as i32);
            let lr = T::lit(lr);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * gi;
                *v = b2 * *v + (T::one() - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> IndexMap<String, Tensor<f64>> {
        let mut m = IndexMap::new();
        m.insert(name.to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut p = one("w", 1.0);
        let g = one("w", 1.0);
        Adam::new().step(&mut p, &g, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] - expected).abs() < 1e-12);
        assert!((p["w"].data()[0] - 0.9).abs() <= 1.0000001e-9);
    }

    #[test]
    fn zero_grad_keeps_param() {
        let mut p = one("w", 0.37);
        let g = one("w", 0.0);
        let mut opt = Adam::new();
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.1).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.37);
    }

    #[test]
    fn identical_grads_identical_updates() {
        let mut p = IndexMap::new();
        p.insert("a".to_string(), Tensor::scalar(0.5));
        p.insert("b".to_string(), Tensor::scalar(0.5));
        let mut g = IndexMap::new();
        g.insert("a".to_string(), Tensor::scalar(-0.3));
        g.insert("b".to_string(), Tensor::scalar(-0.3));
        let mut opt = Adam::<f64>::new();
        for _ in 0..3 {
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        assert_eq!(p["a"], p["b"]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = one("w", 1.0);
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::<f64>::zeros([2]));
        assert!(Adam::new().step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn steplr_values() {
        assert_eq!(steplr(1e-4, 0, 10, 0.5), 1e-4);
        assert_eq!(steplr(1e-4, 10, 10, 0.5), 5e-5);
        assert_eq!(steplr(1e-4, 25, 10, 0.5), 2.5e-5);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = steplr(1e-4, e, 10, 0.5);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
