//! Tanh-squashed diagonal Gaussian policies over the normalized action box `[-1, 1]^5`.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::equivariant::{PolicyHead, ACTION_DIM};
use crate::nn::{Graph, Var};
use crate::scalar::Float;

/// Log-density of the uniform distribution on `[-1, 1]^5`.
pub const UNIFORM_LOG_DENSITY: f64 = -(ACTION_DIM as f64) * LN_2;

/// Largest magnitude of a dataset action before inverting the squashing.
pub const ACTION_CLIP: f64 = 0.999;

/// `log(1 − tanh²(z))`, written as `2 (log 2 − z − softplus(−2z))` for stability.
pub fn log_tanh_jacobian<F: Float>(g: &mut Graph<F>, z: Var) -> Var {
    let m2 = g.scale(z, -2.0);
    let sp = g.softplus(m2);
    let t = g.add(z, sp);
    let t = g.neg(t);
    let t = g.add_scalar(t, LN_2);
    g.scale(t, 2.0)
}

/// Sum over columns of the Gaussian log-density of `z` given standardized
/// residuals `eps = (z − μ)/σ`, as a `(B, 1)` column.
fn gaussian_log_prob<F: Float>(g: &mut Graph<F>, eps: Var, log_std: Var) -> Var {
    let sq = g.square(eps);
    let half = g.scale(sq, -0.5);
    let t = g.sub(half, log_std);
    let t = g.add_scalar(t, -0.5 * (2.0 * PI).ln());
    g.sum_cols(t)
}

/// Reparameterized samples `a = tanh(μ + σ ε)` and their log-densities.
///
/// `noise` is `(B, 5)` standard normal; returns `(actions (B, 5), log π (B, 1))`.
pub fn sample<F: Float>(g: &mut Graph<F>, head: &PolicyHead, noise: &Array2<F>) -> (Var, Var) {
    let eps = g.constant(noise.clone().into_dyn());
    let std = g.exp(head.log_std);
    let dz = g.mul(std, eps);
    let z = g.add(head.mean, dz);
    let a = g.tanh(z);
    let lp = gaussian_log_prob(g, eps, head.log_std);
    let jac = log_tanh_jacobian(g, z);
    let jac = g.sum_cols(jac);
    let lp = g.sub(lp, jac);
    (a, lp)
}

/// `log π(a | s)` for given actions in `(−1, 1)^5`, `(B, 1)`.
///
/// Actions are clipped to `±ACTION_CLIP` first so the inverse squashing stays finite.
pub fn log_prob<F: Float>(g: &mut Graph<F>, head: &PolicyHead, actions: &Array2<F>) -> Var {
    let clip = F::of(ACTION_CLIP);
    let z = actions.mapv(|a| {
        let a = a.max(-clip).min(clip);
        F::of(0.5) * ((F::one() + a) / (F::one() - a)).ln()
    });
    let zv = g.constant(z.into_dyn());
    let diff = g.sub(zv, head.mean);
    let neg = g.neg(head.log_std);
    let inv = g.exp(neg);
    let eps = g.mul(diff, inv);
    let lp = gaussian_log_prob(g, eps, head.log_std);
    let jac = log_tanh_jacobian(g, zv);
    let jac = g.sum_cols(jac);
    g.sub(lp, jac)
}

/// The deterministic action `tanh(μ)`.
pub fn deterministic<F: Float>(mean: &Array2<F>) -> Array2<F> {
    mean.mapv(F::tanh)
}

/// Standard normal noise `(rows, 5)`.
pub fn normal_noise<F: Float, R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, ACTION_DIM), || {
        F::of(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Uniform actions on `[-1, 1]^5`, `(rows, 5)`.
pub fn uniform_actions<F: Float, R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, ACTION_DIM), || F::of(rng.random_range(-1.0..1.0)))
}

/// Density of a one-dimensional squashed Gaussian at `a ∈ (−1, 1)`.
pub fn squashed_density_1d(a: f64, mean: f64, log_std: f64) -> f64 {
    let z = a.atanh();
    let s = log_std.exp();
    let n = (-0.5 * ((z - mean) / s).powi(2)).exp() / (s * (2.0 * PI).sqrt());
    n / (1.0 - a * a)
}

/// Repeats each row of a `(B, 5)` head `k` times, giving `(B·k, 5)` rows.
pub fn repeat_head<F: Float>(g: &mut Graph<F>, head: &PolicyHead, k: usize) -> PolicyHead {
    let b = g.value(head.mean).shape()[0];
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let mean = g.gather_rows(head.mean, &idx);
    let log_std = if g.value(head.log_std).shape()[0] == 1 {
        head.log_std
    } else {
        g.gather_rows(head.log_std, &idx)
    };
    PolicyHead { mean, log_std }
}

/// A constant `(rows, cols)` tensor filled with `v`.
pub fn filled<F: Float>(g: &mut Graph<F>, rows: usize, cols: usize, v: f64) -> Var {
    g.constant(ArrayD::from_elem(IxDyn(&[rows, cols]), F::of(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(g: &mut Graph<f64>, mean: [f64; 5], log_std: [f64; 5]) -> PolicyHead {
        let m = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), mean.to_vec()).unwrap());
        let l = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 5]), log_std.to_vec()).unwrap());
        PolicyHead { mean: m, log_std: l }
    }

    #[test]
    fn zero_mean_tiny_sigma_gives_center() {
        let mut g = Graph::<f64>::new();
        let h = head(&mut g, [0.0; 5], [-20.0; 5]);
        let noise = Array2::from_elem((1, 5), 1.0);
        let (a, _) = sample(&mut g, &h, &noise);
        assert!(g.value(a).iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn log_prob_matches_sample_log_prob() {
        let mut g = Graph::<f64>::new();
        let h = head(&mut g, [0.3, -0.2, 0.1, 0.0, 0.5], [-0.5, -1.0, 0.0, -0.3, -2.0]);
        let noise = Array2::from_shape_vec((1, 5), vec![0.4, -1.2, 0.3, 0.9, -0.1]).unwrap();
        let (a, lp) = sample(&mut g, &h, &noise);
        let a = g.value(a).clone().into_dimensionality().unwrap();
        let lp2 = log_prob(&mut g, &h, &a);
        assert!((g.scalar(lp) - g.scalar(lp2)).abs() < 1e-9);
    }

    /// Quadrature oracle: the per-dimension density integrates the product
    /// form, so the 5-D log-density equals the sum of 1-D log-densities.
    #[test]
    fn log_prob_matches_one_dimensional_density() {
        let mean = [0.3, -0.7, 0.0, 1.1, -0.2];
        let ls = [-0.4, 0.1, -1.0, -0.2, 0.3];
        let a = Array2::from_shape_vec((1, 5), vec![0.2, -0.5, 0.05, 0.7, -0.3]).unwrap();
        let mut g = Graph::<f64>::new();
        let h = head(&mut g, mean, ls);
        let lp = log_prob(&mut g, &h, &a);
        let oracle: f64 = (0..5)
            .map(|i| squashed_density_1d(a[[0, i]], mean[i], ls[i]).ln())
            .sum();
        assert!((g.scalar(lp) - oracle).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let n = 200_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| squashed_density_1d(-1.0 + (i as f64 + 0.5) * h, 0.4, -0.3) * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-4);
    }
}
