use ndarray::{ArrayD, IxDyn};

use crate::scalar::Float;

/// A sparse linear map from a free parameter vector `θ` to a full weight tensor.
///
/// Tied and steerable weights are stored as `θ` and expanded on every forward
/// pass with `W = Eθ`; gradients flow back through `Eᵀ`. Each output entry is a
/// short list of `(θ index, coefficient)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandMap {
    out_shape: Vec<usize>,
    n_in: usize,
    offsets: Vec<u32>,
    index: Vec<u32>,
    coef: Vec<f64>,
}

impl ExpandMap {
    /// Builds the map from one term list per output entry (row-major order).
    pub fn new(out_shape: Vec<usize>, n_in: usize, terms: Vec<Vec<(usize, f64)>>) -> Self {
        let len: usize = out_shape.iter().product();
        assert_eq!(terms.len(), len, "one term list per output entry");
        let mut offsets = Vec::with_capacity(len + 1);
        let mut index = Vec::new();
        let mut coef = Vec::new();
        offsets.push(0);
        for row in terms {
            for (j, w) in row {
                assert!(j < n_in, "parameter index out of range");
                if w != 0.0 {
                    index.push(j as u32);
                    coef.push(w);
                }
            }
            offsets.push(index.len() as u32);
        }
        Self {
            out_shape,
            n_in,
            offsets,
            index,
            coef,
        }
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn n_params(&self) -> usize {
        self.n_in
    }

    pub fn apply<F: Float>(&self, theta: &[F]) -> ArrayD<F> {
        assert_eq!(theta.len(), self.n_in);
        let len = self.offsets.len() - 1;
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let (a, b) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            let mut acc = F::zero();
            for t in a..b {
                acc += F::of(self.coef[t]) * theta[self.index[t] as usize];
            }
            out.push(acc);
        }
        ArrayD::from_shape_vec(IxDyn(&self.out_shape), out).expect("shape checked")
    }

    /// Accumulates `Eᵀ g` into `grad_theta`.
    pub fn transpose_apply<F: Float>(&self, g: &[F], grad_theta: &mut [F]) {
        for i in 0..self.offsets.len() - 1 {
            let (a, b) = (self.offsets[i] as usize, self.offsets[i + 1] as usize);
            let gi = g[i];
            for t in a..b {
                grad_theta[self.index[t] as usize] += F::of(self.coef[t]) * gi;
            }
        }
    }
}
