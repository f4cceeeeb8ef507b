use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Float;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Owns the trainable tensors of one network.
///
/// Layers refer to their tensors by index. Cloning yields an independent copy
/// (used for target networks).
#[derive(Debug)]
pub struct ParamStore<F> {
    id: u64,
    params: Vec<Param<F>>,
}

impl<F: Float> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    /// Adds a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> usize {
        let value = if bound > 0.0 {
            let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(d.sample(rng)))
        } else {
            ArrayD::zeros(IxDyn(shape))
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut ArrayD<F> {
        &mut self.params[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Inserts every tensor into `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// `self ← (1 − rate)·self + rate·online`.
    pub fn polyak_from(&mut self, online: &ParamStore<F>, rate: f64) -> Result<()> {
        if self.params.len() != online.params.len() {
            return Err(Error::Shape("parameter lists differ in length".into()));
        }
        for (t, o) in self.params.iter().zip(&online.params) {
            if t.value.shape() != o.value.shape() {
                return Err(Error::Shape(format!("parameter {} differs in shape", t.name)));
            }
        }
        let (keep, take) = (F::of(1.0 - rate), F::of(rate));
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            ndarray::Zip::from(&mut t.value)
                .and(&o.value)
                .for_each(|a, &b| *a = keep * *a + take * b);
        }
        Ok(())
    }

    /// Copies values from another store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        self.polyak_from(other, 1.0)?;
        for (t, o) in self.params.iter_mut().zip(&other.params) {
            t.value.assign(&o.value);
        }
        Ok(())
    }

    /// The same tensors in another precision.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| G::of(x.as_f64())),
                })
                .collect(),
        }
    }
}

/// Element-wise `target ← (1 − rate)·target + rate·online`.
pub fn polyak_update<F: Float>(
    target: &mut ParamStore<F>,
    online: &ParamStore<F>,
    rate: f64,
) -> Result<()> {
    target.polyak_from(online, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ArrayD::from_elem(IxDyn(&[1]), v));
        s
    }

    #[test]
    fn polyak_examples() {
        let online = scalar_store(1.0);
        let mut t = scalar_store(0.0);
        polyak_update(&mut t, &online, 0.005).unwrap();
        assert!((t.get(0).value[0] - 0.005).abs() < 1e-15);
        let mut t = scalar_store(0.3);
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.get(0).value[0], 0.3);
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.get(0).value[0], 1.0);
        let mut bad = ParamStore::<f64>::new();
        assert!(polyak_update(&mut bad, &online, 0.5).is_err());
    }

    #[test]
    fn clones_get_fresh_ids() {
        let s = scalar_store(1.0);
        assert_ne!(s.clone().id(), s.id());
    }
}
