//! Weight-sharing patterns that make convolutions and 1×1 layers commute with C_n.
//!
//! 3×3 kernels are parameterized by 7 ring harmonics: the center tap, and on
//! each of the two rings (edge neighbours at radius 1, corners at radius √2) a
//! constant plus a `cos φ`, `sin φ` pair. Rotating such a kernel by any angle
//! only mixes each `(cos, sin)` pair, so the rotated copies needed for every
//! group element are exact linear functions of the 7 coefficients.

use crate::group::{PlaneRotation, RepKind, Representation};
use crate::nn::ExpandMap;

/// Number of free coefficients of one 3×3 kernel.
pub const KERNEL_COEFFS: usize = 7;

/// Tap `(row, col)` of a 3×3 kernel as world offset `(dx, dy)` (y up).
fn tap_offset(row: usize, col: usize) -> (f64, f64) {
    (col as f64 - 1.0, 1.0 - row as f64)
}

/// Coefficients expressing tap `(row, col)` of the kernel rotated by `rot`
/// as a combination of the 7 unrotated coefficients.
///
/// Coefficient layout: `[center, a1, b1, c1, a2, b2, c2]` where ring `r` holds
/// `a_r + b_r cos φ + c_r sin φ`. Rotating by `α` replaces `(b, c)` by
/// `(b cos α − c sin α, b sin α + c cos α)`.
pub fn rotated_tap(rot: PlaneRotation, row: usize, col: usize) -> Vec<(usize, f64)> {
    let (dx, dy) = tap_offset(row, col);
    if dx == 0.0 && dy == 0.0 {
        return vec![(0, 1.0)];
    }
    let base = if dx != 0.0 && dy != 0.0 { 4 } else { 1 };
    let r = (dx * dx + dy * dy).sqrt();
    let (cp, sp) = (dx / r, dy / r);
    let (ca, sa) = rot.cos_sin();
    // value = a + cp (b ca − c sa) + sp (b sa + c ca)
    vec![
        (base, 1.0),
        (base + 1, cp * ca + sp * sa),
        (base + 2, -cp * sa + sp * ca),
    ]
}

/// Expansion for a lifting convolution from `c_in` trivial channels to
/// `fields_out` regular fields: `W[(i,k), c] = rot_k ψ_{i,c}`.
///
/// Parameters are laid out as `(fields_out, c_in, 7)`.
pub fn lifting_map(order: usize, c_in: usize, fields_out: usize) -> ExpandMap {
    let n = order;
    let mut terms = Vec::with_capacity(fields_out * n * c_in * 9);
    for i in 0..fields_out {
        for k in 0..n {
            let rot = PlaneRotation::from_fraction(k, n);
            for c in 0..c_in {
                let psi = (i * c_in + c) * KERNEL_COEFFS;
                for row in 0..3 {
                    for col in 0..3 {
                        terms.push(
                            rotated_tap(rot, row, col)
                                .into_iter()
                                .map(|(j, w)| (psi + j, w))
                                .collect(),
                        );
                    }
                }
            }
        }
    }
    ExpandMap::new(
        vec![fields_out * n, c_in, 3, 3],
        fields_out * c_in * KERNEL_COEFFS,
        terms,
    )
}

/// Expansion for a regular-to-regular convolution:
/// `W[(i,k), (j,h)] = rot_k ψ_{ij,(h−k) mod n}`.
///
/// Parameters are laid out as `(fields_out, fields_in, n, 7)`.
pub fn regular_conv_map(order: usize, fields_in: usize, fields_out: usize) -> ExpandMap {
    let n = order;
    let mut terms = Vec::with_capacity(fields_out * n * fields_in * n * 9);
    for i in 0..fields_out {
        for k in 0..n {
            let rot = PlaneRotation::from_fraction(k, n);
            let taps: Vec<Vec<(usize, f64)>> = (0..9).map(|t| rotated_tap(rot, t / 3, t % 3)).collect();
            for j in 0..fields_in {
                for h in 0..n {
                    let d = (h + n - k) % n;
                    let psi = ((i * fields_in + j) * n + d) * KERNEL_COEFFS;
                    for tap in &taps {
                        terms.push(tap.iter().map(|&(c, w)| (psi + c, w)).collect());
                    }
                }
            }
        }
    }
    ExpandMap::new(
        vec![fields_out * n, fields_in * n, 3, 3],
        fields_out * fields_in * n * KERNEL_COEFFS,
        terms,
    )
}

/// Number of free parameters of the equivariant linear maps from `from` to `to`.
pub fn intertwiner_dim(from: RepKind, to: RepKind, order: usize) -> usize {
    use RepKind::*;
    match (to, from) {
        (Regular, Regular) => order,
        (Trivial, Trivial) | (Regular, Trivial) | (Trivial, Regular) => 1,
        (Standard, Regular) | (Regular, Standard) | (Standard, Standard) => 2,
        (Trivial, Standard) | (Standard, Trivial) => 0,
    }
}

/// Entries of one equivariant block as `(row, col, [(param, coef)])`, with
/// parameters numbered from `first`.
fn block_terms(
    to: RepKind,
    from: RepKind,
    order: usize,
    first: usize,
) -> Vec<(usize, usize, Vec<(usize, f64)>)> {
    use RepKind::*;
    let n = order;
    let cs = |k: usize| PlaneRotation::from_fraction(k, n).cos_sin();
    let mut out = Vec::new();
    match (to, from) {
        (Regular, Regular) => {
            for k in 0..n {
                for h in 0..n {
                    out.push((k, h, vec![(first + (h + n - k) % n, 1.0)]));
                }
            }
        }
        (Trivial, Trivial) => out.push((0, 0, vec![(first, 1.0)])),
        (Trivial, Regular) => {
            for h in 0..n {
                out.push((0, h, vec![(first, 1.0)]));
            }
        }
        (Regular, Trivial) => {
            for k in 0..n {
                out.push((k, 0, vec![(first, 1.0)]));
            }
        }
        (Standard, Regular) => {
            // Column h is R(θ_h) v.
            for h in 0..n {
                let (c, s) = cs(h);
                out.push((0, h, vec![(first, c), (first + 1, -s)]));
                out.push((1, h, vec![(first, s), (first + 1, c)]));
            }
        }
        (Regular, Standard) => {
            // Row k is (R(θ_k) v)ᵀ.
            for k in 0..n {
                let (c, s) = cs(k);
                out.push((k, 0, vec![(first, c), (first + 1, -s)]));
                out.push((k, 1, vec![(first, s), (first + 1, c)]));
            }
        }
        (Standard, Standard) => {
            out.push((0, 0, vec![(first, 1.0)]));
            out.push((0, 1, vec![(first + 1, -1.0)]));
            out.push((1, 0, vec![(first + 1, 1.0)]));
            out.push((1, 1, vec![(first, 1.0)]));
        }
        (Trivial, Standard) | (Standard, Trivial) => {}
    }
    out
}

/// Expansion for an equivariant 1×1 layer `(out_dim, in_dim)` between two
/// mixed representations. Requires `order ≥ 3` when ρ1 fields are present.
pub fn dense_map(order: usize, from: &Representation, to: &Representation) -> ExpandMap {
    let (rows, cols) = (to.dim(order), from.dim(order));
    let mut terms: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows * cols];
    let mut next = 0;
    for (tk, r0) in to.fields(order) {
        for (fk, c0) in from.fields(order) {
            for (r, c, t) in block_terms(tk, fk, order, next) {
                terms[(r0 + r) * cols + c0 + c] = t;
            }
            next += intertwiner_dim(fk, tk, order);
        }
    }
    ExpandMap::new(vec![rows, cols], next, terms)
}

/// Bias sharing for a mixed representation: one scalar per regular field
/// (repeated over its `n` channels), one per trivial field, none for ρ1.
pub fn bias_map(order: usize, repr: &Representation) -> ExpandMap {
    let d = repr.dim(order);
    let mut terms = vec![Vec::new(); d];
    let mut next = 0;
    for (kind, off) in repr.fields(order) {
        match kind {
            RepKind::Regular => {
                for t in &mut terms[off..off + order] {
                    *t = vec![(next, 1.0)];
                }
                next += 1;
            }
            RepKind::Trivial => {
                terms[off] = vec![(next, 1.0)];
                next += 1;
            }
            RepKind::Standard => {}
        }
    }
    ExpandMap::new(vec![d], next, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::CyclicGroup;
    use ndarray::Array2;

    #[test]
    fn quarter_turn_of_kernel_is_a_tap_permutation() {
        let theta: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).sin()).collect();
        let rot0 = PlaneRotation::Quarter(0);
        let rot1 = PlaneRotation::Quarter(1);
        let eval = |rot: PlaneRotation, r: usize, c: usize| -> f64 {
            rotated_tap(rot, r, c).iter().map(|&(j, w)| w * theta[j]).sum()
        };
        // Rotating the kernel 90° CCW moves the tap at world (1, 0) to (0, 1).
        for r in 0..3 {
            for c in 0..3 {
                // out[r][c] = in[c][2 - r]
                assert!((eval(rot1, r, c) - eval(rot0, c, 2 - r)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dense_blocks_commute_with_the_group() {
        let n = 8;
        let group = CyclicGroup::new(n).unwrap();
        let from = Representation::regular(2)
            .with(RepKind::Standard, 1)
            .with(RepKind::Trivial, 1);
        let to = Representation::regular(1)
            .with(RepKind::Standard, 2)
            .with(RepKind::Trivial, 1);
        let map = dense_map(n, &from, &to);
        let theta: Vec<f64> = (0..map.n_params()).map(|i| ((i * 7 + 3) as f64).cos()).collect();
        let w = map.apply(&theta).into_dimensionality::<ndarray::Ix2>().unwrap();
        for g in 0..n {
            let lhs = w.dot(&from.matrix(&group, g).unwrap());
            let rhs = to.matrix(&group, g).unwrap().dot(&w);
            let err = (&lhs - &rhs).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
            assert!(err < 1e-12, "g={g} err={err}");
        }
    }

    /// Independent oracle: the dimension of the commutant of a pair of
    /// representations is the nullspace dimension of the stacked constraints
    /// `W ρ_in(g) − ρ_out(g) W = 0` over the generator.
    fn nullspace_dim(from: RepKind, to: RepKind, group: &CyclicGroup) -> usize {
        let n = group.order();
        let (di, do_) = (from.dim(n), to.dim(n));
        let a = Representation::new(vec![(from, 1)]).matrix(group, 1).unwrap();
        let b = Representation::new(vec![(to, 1)]).matrix(group, 1).unwrap();
        // vec(W) has index r*di + c.
        let m = do_ * di;
        let mut rows = Array2::<f64>::zeros((m, m));
        for r in 0..do_ {
            for c in 0..di {
                let eq = r * di + c;
                for k in 0..di {
                    rows[[eq, r * di + k]] += a[[k, c]];
                }
                for k in 0..do_ {
                    rows[[eq, k * di + c]] -= b[[r, k]];
                }
            }
        }
        let mat = nalgebra::DMatrix::from_fn(m, m, |i, j| rows[[i, j]]);
        let sv = mat.svd(false, false).singular_values;
        sv.iter().filter(|&&s| s < 1e-9).count()
    }

    #[test]
    fn intertwiner_dims_match_numerical_nullspace() {
        use RepKind::*;
        for n in [4, 8] {
            let group = CyclicGroup::new(n).unwrap();
            for from in [Trivial, Standard, Regular] {
                for to in [Trivial, Standard, Regular] {
                    assert_eq!(
                        intertwiner_dim(from, to, n),
                        nullspace_dim(from, to, &group),
                        "{from:?} -> {to:?}, n={n}"
                    );
                }
            }
        }
    }
}
