use ndarray::ArrayD;

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Float;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64, store: &ParamStore<F>) -> Self {
        let zeros: Vec<_> = store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<ArrayD<F>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape("gradient list does not match the parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = F::of(self.lr * c2.sqrt() / c1);
        let eps = F::of(self.eps * c2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {}",
                    store.get(i).name
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(store.value_mut(i))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
        Ok(())
    }
}
