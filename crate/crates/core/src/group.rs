//! The cyclic rotation group C_n, its representations, and its actions on
//! images, factored actions and representation-typed feature fields.
//!
//! Group elements are integer indices: element `i` of C_n is the planar rotation
//! by `2πi/n`. Keeping elements as integers makes composition exact, and lets
//! every rotation that is a multiple of a quarter turn be realized as an exact
//! pixel permutation.
//!
//! Orientation convention: world `x` points right and world `y` points up, so
//! positive angles rotate counter-clockwise. Images are stored row-major with
//! row 0 at the top, i.e. a pixel at `(row, col)` sits at world offset
//! `(col - cx, cy - row)` from the image center `((H-1)/2, (W-1)/2)`.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// The cyclic group C_n of rotations by multiples of `2π/n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CyclicGroup {
    order: usize,
}

impl Default for CyclicGroup {
    fn default() -> Self {
        Self { order: 8 }
    }
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("group order must be positive".into()));
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn elements(&self) -> std::ops::Range<usize> {
        0..self.order
    }

    pub fn check(&self, g: usize) -> Result<()> {
        if g < self.order {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "element index {g} out of range for C_{}",
                self.order
            )))
        }
    }

    pub fn compose(&self, g: usize, h: usize) -> Result<usize> {
        self.check(g)?;
        self.check(h)?;
        Ok((g + h) % self.order)
    }

    pub fn inverse(&self, g: usize) -> Result<usize> {
        self.check(g)?;
        Ok((self.order - g) % self.order)
    }

    /// Rotation angle of element `g`, in `[0, 2π)`.
    pub fn angle(&self, g: usize) -> f64 {
        2.0 * PI * g as f64 / self.order as f64
    }

    /// The planar rotation realized by `g`, with quarter turns classified exactly.
    pub fn rotation(&self, g: usize) -> PlaneRotation {
        PlaneRotation::from_fraction(g, self.order)
    }

    /// Elements of the largest subgroup whose rotations are whole quarter turns.
    pub fn quarter_turn_elements(&self) -> Vec<usize> {
        self.elements().filter(|&g| (4 * g) % self.order == 0).collect()
    }
}

/// `(g + h) mod n` with range checking.
pub fn compose(g: usize, h: usize, n: usize) -> Result<usize> {
    CyclicGroup::new(n)?.compose(g, h)
}

/// A rotation of the plane. Quarter turns are kept symbolic so they can be
/// applied without rounding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlaneRotation {
    /// Counter-clockwise rotation by `k · π/2`, `k ∈ 0..4`.
    Quarter(u8),
    /// Counter-clockwise rotation by an arbitrary angle in radians.
    Angle(f64),
}

impl PlaneRotation {
    /// Rotation by `2π·k/m`.
    pub fn from_fraction(k: usize, m: usize) -> Self {
        let k = k % m;
        if (4 * k) % m == 0 {
            PlaneRotation::Quarter(((4 * k) / m) as u8)
        } else {
            PlaneRotation::Angle(2.0 * PI * k as f64 / m as f64)
        }
    }

    pub fn from_angle(angle: f64) -> Self {
        if angle == 0.0 {
            PlaneRotation::Quarter(0)
        } else {
            PlaneRotation::Angle(angle)
        }
    }

    pub fn angle(&self) -> f64 {
        match *self {
            PlaneRotation::Quarter(q) => q as f64 * PI / 2.0,
            PlaneRotation::Angle(a) => a,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, PlaneRotation::Quarter(0))
    }

    /// `(cos θ, sin θ)`, exact for quarter turns.
    pub fn cos_sin(&self) -> (f64, f64) {
        match *self {
            PlaneRotation::Quarter(q) => match q % 4 {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, -1.0),
            },
            PlaneRotation::Angle(a) => (a.cos(), a.sin()),
        }
    }

    /// Rotates the vector `(x, y)`. Quarter turns only permute and negate.
    #[inline]
    pub fn apply<F: Float>(&self, x: F, y: F) -> (F, F) {
        match *self {
            PlaneRotation::Quarter(q) => match q % 4 {
                0 => (x, y),
                1 => (-y, x),
                2 => (-x, -y),
                _ => (y, -x),
            },
            PlaneRotation::Angle(a) => {
                let (c, s) = (F::of(a.cos()), F::of(a.sin()));
                (c * x - s * y, s * x + c * y)
            }
        }
    }
}

/// The irreducible (or regular) building blocks a feature channel group can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepKind {
    /// ρ0: one channel, left untouched by every rotation.
    Trivial,
    /// ρ1: two channels rotated as a planar vector.
    Standard,
    /// ρ_reg: `n` channels cyclically permuted.
    Regular,
}

impl RepKind {
    pub fn dim(self, order: usize) -> usize {
        match self {
            RepKind::Trivial => 1,
            RepKind::Standard => 2,
            RepKind::Regular => order,
        }
    }
}

/// A direct sum of representations, listed as `(kind, multiplicity)` blocks in
/// channel order. Regular fields occupy `n` consecutive channels each.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Representation {
    blocks: Vec<(RepKind, usize)>,
}

impl Representation {
    pub fn new(blocks: Vec<(RepKind, usize)>) -> Self {
        Self {
            blocks: blocks.into_iter().filter(|&(_, m)| m > 0).collect(),
        }
    }

    pub fn trivial(m: usize) -> Self {
        Self::new(vec![(RepKind::Trivial, m)])
    }

    pub fn standard(m: usize) -> Self {
        Self::new(vec![(RepKind::Standard, m)])
    }

    pub fn regular(m: usize) -> Self {
        Self::new(vec![(RepKind::Regular, m)])
    }

    /// Appends another block (builder style).
    pub fn with(mut self, kind: RepKind, m: usize) -> Self {
        if m > 0 {
            self.blocks.push((kind, m));
        }
        self
    }

    pub fn concat(&self, other: &Representation) -> Self {
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(&other.blocks);
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[(RepKind, usize)] {
        &self.blocks
    }

    pub fn dim(&self, order: usize) -> usize {
        self.blocks.iter().map(|&(k, m)| k.dim(order) * m).sum()
    }

    pub fn multiplicity(&self, kind: RepKind) -> usize {
        self.blocks
            .iter()
            .filter(|(k, _)| *k == kind)
            .map(|(_, m)| m)
            .sum()
    }

    pub fn is_only(&self, kind: RepKind) -> bool {
        !self.blocks.is_empty() && self.blocks.iter().all(|(k, _)| *k == kind)
    }

    /// Every individual field as `(kind, first channel)`, in channel order.
    pub fn fields(&self, order: usize) -> Vec<(RepKind, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for &(kind, m) in &self.blocks {
            for _ in 0..m {
                out.push((kind, offset));
                offset += kind.dim(order);
            }
        }
        out
    }

    /// Block-diagonal matrix of `g` acting on this representation.
    pub fn matrix(&self, group: &CyclicGroup, g: usize) -> Result<Array2<f64>> {
        group.check(g)?;
        let n = group.order();
        let d = self.dim(n);
        let mut out = Array2::zeros((d, d));
        for (kind, off) in self.fields(n) {
            let k = kind.dim(n);
            out.slice_mut(s![off..off + k, off..off + k])
                .assign(&rep_matrix(kind, g, group)?);
        }
        Ok(out)
    }

    /// Applies `ρ(g)` to a single channel vector in place.
    pub fn transform_vector<F: Float>(&self, group: &CyclicGroup, g: usize, v: &mut [F]) {
        let n = group.order();
        let rot = group.rotation(g);
        let mut scratch = [F::zero(); 64];
        for (kind, off) in self.fields(n) {
            match kind {
                RepKind::Trivial => {}
                RepKind::Standard => {
                    let (x, y) = rot.apply(v[off], v[off + 1]);
                    v[off] = x;
                    v[off + 1] = y;
                }
                RepKind::Regular => {
                    if g == 0 {
                        continue;
                    }
                    let field = &mut v[off..off + n];
                    if n <= scratch.len() {
                        scratch[..n].copy_from_slice(field);
                        for k in 0..n {
                            field[k] = scratch[(k + n - g) % n];
                        }
                    } else {
                        field.rotate_right(g);
                    }
                }
            }
        }
    }
}

/// Matrix of `g` under a single representation kind.
///
/// ρ0 is `[1]`, ρ1 the 2×2 rotation by `2πg/n`, and ρ_reg the cyclic shift that
/// sends basis vector `e_k` to `e_{k+g}`.
pub fn rep_matrix(kind: RepKind, g: usize, group: &CyclicGroup) -> Result<Array2<f64>> {
    group.check(g)?;
    let n = group.order();
    Ok(match kind {
        RepKind::Trivial => Array2::ones((1, 1)),
        RepKind::Standard => {
            let (c, s) = group.rotation(g).cos_sin();
            Array2::from_shape_vec((2, 2), vec![c, -s, s, c]).expect("2x2")
        }
        RepKind::Regular => {
            let mut m = Array2::zeros((n, n));
            for k in 0..n {
                m[[(k + g) % n, k]] = 1.0;
            }
            m
        }
    })
}

/// Rotates a single image plane about its center, `out(p) = src(R⁻¹ p)`.
///
/// Quarter turns of square images are exact pixel permutations; any other
/// rotation samples bilinearly and fills with zero outside the source.
pub fn rotate_plane<F: Float>(src: ArrayView2<F>, rot: PlaneRotation) -> Array2<F> {
    let (h, w) = src.dim();
    if let PlaneRotation::Quarter(q) = rot {
        let q = q % 4;
        if q == 0 {
            return src.to_owned();
        }
        if h == w {
            let last = h - 1;
            return Array2::from_shape_fn((h, w), |(r, k)| match q {
                1 => src[[k, last - r]],
                2 => src[[last - r, last - k]],
                _ => src[[last - k, r]],
            });
        }
    }
    let (c, s) = rot.cos_sin();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |row: isize, col: isize| -> f64 {
        if row < 0 || col < 0 || row >= h as isize || col >= w as isize {
            0.0
        } else {
            src[[row as usize, col as usize]].as_f64()
        }
    };
    Array2::from_shape_fn((h, w), |(r, k)| {
        let x = k as f64 - cx;
        let y = cy - r as f64;
        // Inverse rotation of the output location.
        let xs = c * x + s * y;
        let ys = -s * x + c * y;
        let col = cx + xs;
        let row = cy - ys;
        let c0 = col.floor();
        let r0 = row.floor();
        let fc = col - c0;
        let fr = row - r0;
        let (r0, c0) = (r0 as isize, c0 as isize);
        let v = (1.0 - fr) * ((1.0 - fc) * sample(r0, c0) + fc * sample(r0, c0 + 1))
            + fr * ((1.0 - fc) * sample(r0 + 1, c0) + fc * sample(r0 + 1, c0 + 1));
        F::of(v)
    })
}

/// A representation-typed feature map: shape `(C, H, W)` for spatial fields,
/// `(C,)` for 1×1 fields.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField<F = f32> {
    data: ArrayD<F>,
    repr: Representation,
    group: CyclicGroup,
}

impl<F: Float> FeatureField<F> {
    pub fn new(data: ArrayD<F>, repr: Representation, group: CyclicGroup) -> Result<Self> {
        let nd = data.ndim();
        if nd != 1 && nd != 3 {
            return Err(Error::Shape(format!(
                "feature field must be (C,) or (C,H,W), got {:?}",
                data.shape()
            )));
        }
        let expected = repr.dim(group.order());
        if data.shape()[0] != expected {
            return Err(Error::Shape(format!(
                "field has {} channels but its representation needs {expected}",
                data.shape()[0]
            )));
        }
        Ok(Self { data, repr, group })
    }

    /// The observation type: two independent ρ0 channels.
    pub fn state_image(data: ndarray::Array3<F>, group: CyclicGroup) -> Result<Self> {
        if data.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "state image needs 2 channels, got {}",
                data.shape()[0]
            )));
        }
        Self::new(data.into_dyn(), Representation::trivial(2), group)
    }

    pub fn data(&self) -> &ArrayD<F> {
        &self.data
    }

    pub fn into_data(self) -> ArrayD<F> {
        self.data
    }

    pub fn repr(&self) -> &Representation {
        &self.repr
    }

    pub fn group(&self) -> CyclicGroup {
        self.group
    }

    pub fn is_spatial(&self) -> bool {
        self.data.ndim() == 3
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.is_spatial()
            .then(|| (self.data.shape()[1], self.data.shape()[2]))
    }
}

/// `(g f)(x) = ρ0(g) f(ρ1(g)⁻¹ x)` for a spatial field of trivial channels.
pub fn act_on_image<F: Float>(g: usize, f: &FeatureField<F>) -> Result<FeatureField<F>> {
    if !f.is_spatial() {
        return Err(Error::Domain("act_on_image needs a spatial field".into()));
    }
    if !f.repr.is_only(RepKind::Trivial) {
        return Err(Error::Domain(
            "act_on_image needs trivial (ρ0) channels; use act_on_field".into(),
        ));
    }
    act_on_field(g, f)
}

/// General action on a typed field: rotate pixel locations, then transform every
/// pixel's channel vector by the block-diagonal representation.
pub fn act_on_field<F: Float>(g: usize, f: &FeatureField<F>) -> Result<FeatureField<F>> {
    f.group.check(g)?;
    let data = act_on_tensor(&f.group, g, &f.repr, &f.data.view().insert_axis(Axis(0)))?
        .index_axis_move(Axis(0), 0);
    FeatureField::new(data, f.repr.clone(), f.group)
}

/// Applies `g` to a batch `(B, C)` or `(B, C, H, W)` whose channels carry `repr`.
pub fn act_on_tensor<F: Float>(
    group: &CyclicGroup,
    g: usize,
    repr: &Representation,
    x: &ndarray::ArrayViewD<F>,
) -> Result<ArrayD<F>> {
    group.check(g)?;
    act_on_tensor_by(group, group.rotation(g), g, repr, x)
}

/// Like [`act_on_tensor`] but with the spatial rotation given explicitly.
/// `g` still selects the channel transform.
pub(crate) fn act_on_tensor_by<F: Float>(
    group: &CyclicGroup,
    rot: PlaneRotation,
    g: usize,
    repr: &Representation,
    x: &ndarray::ArrayViewD<F>,
) -> Result<ArrayD<F>> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::Shape(format!(
            "expected (B,C) or (B,C,H,W), got {shape:?}"
        )));
    }
    let c = repr.dim(group.order());
    if shape[1] != c {
        return Err(Error::Shape(format!(
            "tensor has {} channels, representation needs {c}",
            shape[1]
        )));
    }
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    if shape.len() == 4 {
        for b in 0..shape[0] {
            for ch in 0..c {
                let plane = x.slice(s![b, ch, .., ..]);
                let plane = plane.into_dimensionality::<ndarray::Ix2>().expect("2d");
                out.slice_mut(s![b, ch, .., ..]).assign(&rotate_plane(plane, rot));
            }
        }
    } else {
        out.assign(x);
    }
    // Channel transform at every pixel.
    if !repr.is_only(RepKind::Trivial) {
        let hw: usize = shape[2..].iter().product();
        let mut v = vec![F::zero(); c];
        let flat = out
            .as_slice_mut()
            .expect("freshly allocated arrays are contiguous");
        for b in 0..shape[0] {
            let base = b * c * hw;
            for p in 0..hw {
                for ch in 0..c {
                    v[ch] = flat[base + ch * hw + p];
                }
                repr.transform_vector(group, g, &mut v);
                for ch in 0..c {
                    flat[base + ch * hw + p] = v[ch];
                }
            }
        }
    }
    Ok(out)
}

/// The factored manipulation action `(a_λ, a_xy, a_z, a_θ)`.
///
/// Only the planar displacement `xy` transforms under rotations (as ρ1); the
/// gripper command, height change and yaw change are invariant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactoredAction {
    pub gripper: f64,
    pub xy: [f64; 2],
    pub z: f64,
    pub theta: f64,
}

impl FactoredAction {
    pub const DIM: usize = 5;

    pub fn new(gripper: f64, xy: [f64; 2], z: f64, theta: f64) -> Self {
        Self {
            gripper,
            xy,
            z,
            theta,
        }
    }

    /// Flat layout `(a_λ, a_x, a_y, a_z, a_θ)` used by datasets and networks.
    pub fn to_array(&self) -> [f64; 5] {
        [self.gripper, self.xy[0], self.xy[1], self.z, self.theta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], [a[1], a[2]], a[3], a[4])
    }

    pub fn rotated(&self, rot: PlaneRotation) -> Self {
        let (x, y) = rot.apply(self.xy[0], self.xy[1]);
        Self {
            xy: [x, y],
            ..*self
        }
    }
}

/// Policy output: an action mean plus one invariant standard deviation per action dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionWithSigma {
    pub action: FactoredAction,
    pub sigma: [f64; 5],
}

/// `g a = (a_λ, ρ1(g) a_xy, a_z, a_θ)`.
pub fn act_on_action(group: &CyclicGroup, g: usize, a: &FactoredAction) -> Result<FactoredAction> {
    group.check(g)?;
    Ok(a.rotated(group.rotation(g)))
}

/// `g ā = (ρ1(g) a_equi, a_inv, a_σ)`; the standard deviations pass through untouched.
pub fn act_on_action_with_sigma(
    group: &CyclicGroup,
    g: usize,
    a: &ActionWithSigma,
) -> Result<ActionWithSigma> {
    Ok(ActionWithSigma {
        action: act_on_action(group, g, &a.action)?,
        sigma: a.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn compose_examples() {
        assert_eq!(compose(0, 5, 8).unwrap(), 5);
        assert_eq!(compose(1, 1, 8).unwrap(), 2);
        assert_eq!(compose(3, 5, 8).unwrap(), 0);
        assert!(matches!(compose(8, 0, 8), Err(Error::Domain(_))));
        assert!(CyclicGroup::new(0).is_err());
    }

    #[test]
    fn angle_and_inverse() {
        let g = CyclicGroup::new(8).unwrap();
        assert_eq!(g.angle(0), 0.0);
        assert!((g.angle(2) - PI / 2.0).abs() < 1e-15);
        assert_eq!(g.inverse(3).unwrap(), 5);
        assert_eq!(g.inverse(0).unwrap(), 0);
        assert_eq!(g.quarter_turn_elements(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn rep_matrix_examples() {
        let c8 = CyclicGroup::new(8).unwrap();
        let m = rep_matrix(RepKind::Standard, 2, &c8).unwrap();
        assert_eq!(m, arr2(&[[0.0, -1.0], [1.0, 0.0]]));
        let c4 = CyclicGroup::new(4).unwrap();
        let p = rep_matrix(RepKind::Regular, 1, &c4).unwrap();
        let x = ndarray::arr1(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.dot(&x), ndarray::arr1(&[4.0, 1.0, 2.0, 3.0]));
        for g in 0..8 {
            assert_eq!(rep_matrix(RepKind::Trivial, g, &c8).unwrap(), arr2(&[[1.0]]));
        }
    }

    #[test]
    fn mixed_matrix_is_block_diagonal() {
        let c4 = CyclicGroup::new(4).unwrap();
        let r = Representation::trivial(1)
            .with(RepKind::Standard, 1)
            .with(RepKind::Regular, 1);
        assert_eq!(r.dim(4), 7);
        let m = r.matrix(&c4, 1).unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m.slice(s![1..3, 1..3]), arr2(&[[0.0, -1.0], [1.0, 0.0]]));
        assert_eq!(m[[4, 3]], 1.0);
        assert_eq!(m[[0, 1]], 0.0);
    }

    #[test]
    fn transform_vector_matches_matrix() {
        let c8 = CyclicGroup::new(8).unwrap();
        let r = Representation::regular(2)
            .with(RepKind::Standard, 1)
            .with(RepKind::Trivial, 2);
        let v: Vec<f64> = (0..r.dim(8)).map(|i| (i as f64 * 0.37).sin()).collect();
        for g in 0..8 {
            let mut w = v.clone();
            r.transform_vector(&c8, g, &mut w);
            let expect = r.matrix(&c8, g).unwrap().dot(&ndarray::Array1::from(v.clone()));
            for (a, b) in w.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_identity_and_hot_pixel_quarter_turn() {
        let c8 = CyclicGroup::new(8).unwrap();
        let mut img = Array3::<f32>::zeros((2, 9, 9));
        let (c, r) = (4usize, 3usize);
        // Offset (r, 0): to the right of the center.
        img[[0, c, c + r]] = 1.0;
        img[[1, 2, 7]] = 0.5;
        let f = FeatureField::state_image(img.clone(), c8).unwrap();
        assert_eq!(act_on_image(0, &f).unwrap(), f);
        let rotated = act_on_image(2, &f).unwrap();
        // Offset (0, r): above the center, i.e. row c - r.
        assert_eq!(rotated.data()[[0, c - r, c]], 1.0);
        assert_eq!(rotated.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn act_on_image_rejects_non_spatial_or_typed_fields() {
        let c4 = CyclicGroup::new(4).unwrap();
        let flat = FeatureField::new(
            ArrayD::<f64>::zeros(IxDyn(&[2])),
            Representation::trivial(2),
            c4,
        )
        .unwrap();
        assert!(act_on_image(1, &flat).is_err());
        let reg = FeatureField::new(
            ArrayD::<f64>::zeros(IxDyn(&[4, 3, 3])),
            Representation::regular(1),
            c4,
        )
        .unwrap();
        assert!(act_on_image(1, &reg).is_err());
        assert!(FeatureField::new(
            ArrayD::<f64>::zeros(IxDyn(&[3, 3, 3])),
            Representation::regular(1),
            c4
        )
        .is_err());
    }

    /// Oracle: average an affine image over a 16× supersampled grid of each
    /// output pixel after exact rotation. Bilinear interpolation reproduces
    /// affine functions, so interior pixels must agree.
    #[test]
    fn diagonal_rotation_matches_supersampled_oracle() {
        let n = 21;
        let c = (n as f64 - 1.0) / 2.0;
        let f = |x: f64, y: f64| 0.3 + 0.05 * x - 0.02 * y;
        let img = Array2::from_shape_fn((n, n), |(r, k)| f(k as f64 - c, c - r as f64));
        let rot = PlaneRotation::from_fraction(1, 8);
        let out = rotate_plane(img.view(), rot);
        let (cs, sn) = rot.cos_sin();
        let ss = 16;
        let mut checked = 0;
        for r in 0..n {
            for k in 0..n {
                let x = k as f64 - c;
                let y = c - r as f64;
                // Keep pixels whose bilinear footprint lies inside the source.
                let (xs, ys) = (cs * x + sn * y, -sn * x + cs * y);
                if xs.abs() > c - 1.0 || ys.abs() > c - 1.0 {
                    continue;
                }
                let mut acc = 0.0;
                for i in 0..ss {
                    for j in 0..ss {
                        let px = x + (j as f64 + 0.5) / ss as f64 - 0.5;
                        let py = y + (i as f64 + 0.5) / ss as f64 - 0.5;
                        acc += f(cs * px + sn * py, -sn * px + cs * py);
                    }
                }
                let oracle = acc / (ss * ss) as f64;
                assert!((out[[r, k]] - oracle).abs() < 1e-6, "pixel {r},{k}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn regular_field_one_by_one_shifts_channels() {
        let c4 = CyclicGroup::new(4).unwrap();
        let f = FeatureField::new(
            ndarray::arr1(&[1.0, 2.0, 3.0, 4.0]).into_dyn(),
            Representation::regular(1),
            c4,
        )
        .unwrap();
        let out = act_on_field(1, &f).unwrap();
        assert_eq!(out.data().as_slice().unwrap(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn action_examples() {
        let c8 = CyclicGroup::new(8).unwrap();
        let a = FactoredAction::new(0.7, [0.05, 0.0], -0.01, 0.2);
        assert_eq!(act_on_action(&c8, 0, &a).unwrap(), a);
        let q = act_on_action(&c8, 2, &a).unwrap();
        assert_eq!(q.xy, [0.0, 0.05]);
        assert_eq!((q.gripper, q.z, q.theta), (a.gripper, a.z, a.theta));

        let bar = ActionWithSigma {
            action: FactoredAction::new(0.1, [0.02, -0.03], 0.0, 0.1),
            sigma: [0.1, 0.2, 0.3, 0.4, 0.5],
        };
        assert_eq!(act_on_action_with_sigma(&c8, 0, &bar).unwrap(), bar);
        let half = act_on_action_with_sigma(&c8, 4, &bar).unwrap();
        assert_eq!(half.action.xy, [-0.02, 0.03]);
        for g in 0..8 {
            let t = act_on_action_with_sigma(&c8, g, &bar).unwrap();
            assert_eq!(t.sigma.map(f64::to_bits), bar.sigma.map(f64::to_bits));
        }
    }
}
