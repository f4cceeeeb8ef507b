//! Measured equivariance residuals of whole networks.

use ndarray::{s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{Actor, Critic, NetRole, NetSpec, ValueNet, ACTION_DIM};
use crate::error::Result;
use crate::group::{act_on_tensor, CyclicGroup, Representation};
use crate::scalar::Float;

/// Which group elements a certificate ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    /// Elements realized as exact pixel permutations (multiples of 90°).
    QuarterTurns,
    /// Every element of C_n.
    Full,
    /// Elements of C_n that are not quarter turns.
    NonQuarter,
}

impl Subgroup {
    pub fn elements(&self, group: &CyclicGroup) -> Vec<usize> {
        let q = group.quarter_turn_elements();
        match self {
            Subgroup::QuarterTurns => q,
            Subgroup::Full => group.elements().collect(),
            Subgroup::NonQuarter => group.elements().filter(|g| !q.contains(g)).collect(),
        }
    }
}

/// Maximum residual of the network's equivariance relation over probe inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub role: NetRole,
    pub equivariant: bool,
    pub group_order: usize,
    pub subgroup: Subgroup,
    pub samples: usize,
    /// `(element, max residual)` per element.
    pub per_element: Vec<(usize, f64)>,
    pub max_deviation: f64,
}

impl Certificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

/// Smooth random observations: a few Gaussian blobs inside the inscribed disk
/// in channel 0 and a constant flag in channel 1.
pub fn probe_states<F: Float>(n: usize, resolution: usize, seed: u64) -> Array4<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (resolution as f64 - 1.0) / 2.0;
    let mut out = Array4::<F>::zeros((n, 2, resolution, resolution));
    for b in 0..n {
        let blobs = rng.random_range(1..=3);
        let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
            .map(|_| {
                let r = rng.random_range(0.0..0.45 * c);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let width = rng.random_range(0.12..0.25) * c;
                (r * phi.cos(), r * phi.sin(), width, rng.random_range(0.2..1.0))
            })
            .collect();
        for i in 0..resolution {
            for j in 0..resolution {
                let (x, y) = (j as f64 - c, c - i as f64);
                let v: f64 = params
                    .iter()
                    .map(|&(bx, by, w, a)| a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * w * w)).exp())
                    .sum();
                out[[b, 0, i, j]] = F::of(v);
            }
        }
        let flag = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        out.slice_mut(s![b, 1, .., ..]).fill(F::of(flag));
    }
    out
}

/// Uniform random normalized actions `(B, 5)`.
pub fn probe_actions<F: Float>(n: usize, seed: u64) -> Array2<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, ACTION_DIM), || F::of(rng.random_range(-1.0..1.0)))
}

/// Rotates every observation of a batch by element `g`.
pub fn rotate_states<F: Float>(group: &CyclicGroup, g: usize, states: &Array4<F>) -> Result<Array4<F>> {
    let out = act_on_tensor(group, g, &Representation::trivial(2), &states.view().into_dyn())?;
    Ok(out.into_dimensionality().expect("4-D"))
}

/// Rotates the `(a_x, a_y)` columns of normalized actions `(B, 5)` by `g`.
pub fn rotate_actions<F: Float>(group: &CyclicGroup, g: usize, actions: &Array2<F>) -> Result<Array2<F>> {
    group.check(g)?;
    let rot = group.rotation(g);
    let mut out = actions.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let (x, y) = rot.apply(row[1], row[2]);
        row[1] = x;
        row[2] = y;
    }
    Ok(out)
}

fn max_abs_diff<F: Float>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// A network whose equivariance relation can be measured.
#[derive(Clone, Copy)]
pub enum NetRef<'a, F: Float> {
    Actor(&'a Actor<F>),
    Critic(&'a Critic<F>),
    Value(&'a ValueNet<F>),
}

impl<F: Float> NetRef<'_, F> {
    fn spec(&self) -> &NetSpec {
        match self {
            NetRef::Actor(a) => &a.spec,
            NetRef::Critic(c) => &c.spec,
            NetRef::Value(v) => &v.spec,
        }
    }

    /// Residual of the relation for element `g` on the given probes.
    fn residual(
        &self,
        group: &CyclicGroup,
        g: usize,
        states: &Array4<F>,
        actions: &Array2<F>,
    ) -> Result<f64> {
        let rs = rotate_states(group, g, states)?;
        Ok(match self {
            NetRef::Actor(a) => {
                let (m0, l0) = a.evaluate(states)?;
                let (m1, l1) = a.evaluate(&rs)?;
                let expect = rotate_actions(group, g, &m0)?;
                max_abs_diff(&m1, &expect).max(max_abs_diff(&l1, &l0))
            }
            NetRef::Critic(c) => {
                let ra = rotate_actions(group, g, actions)?;
                max_abs_diff(&c.evaluate(&rs, &ra)?, &c.evaluate(states, actions)?)
            }
            NetRef::Value(v) => max_abs_diff(&v.evaluate(&rs)?, &v.evaluate(states)?),
        })
    }
}

/// Maximum over `n_samples` smooth probes and the chosen elements of the
/// relevant residual: `actor(g·s) − g·actor(s)` (σ invariant),
/// `Q(g·s, g·a) − Q(s, a)` for both heads, or `V(g·s) − V(s)`.
pub fn certify_equivariance<F: Float>(
    net: NetRef<'_, F>,
    n_samples: usize,
    subgroup: Subgroup,
    seed: u64,
) -> Result<Certificate> {
    let spec = net.spec().clone();
    let group = CyclicGroup::new(spec.arch.group_order)?;
    let states = probe_states::<F>(n_samples, spec.arch.resolution, seed);
    let actions = probe_actions::<F>(n_samples, seed ^ 0x5eed);
    let mut per_element = Vec::new();
    for g in subgroup.elements(&group) {
        per_element.push((g, net.residual(&group, g, &states, &actions)?));
    }
    let max_deviation = per_element.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(Certificate {
        role: spec.role,
        equivariant: spec.equivariant,
        group_order: spec.arch.group_order,
        subgroup,
        samples: n_samples,
        per_element,
        max_deviation,
    })
}
