use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::basis;
use crate::error::{Error, Result};
use crate::group::{RepKind, Representation};
use crate::nn::{ExpandMap, Graph, ParamStore, Var};
use crate::scalar::Float;

/// Whether a layer is constrained to commute with the group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    Dense,
}

/// Description of one layer. For unconstrained layers the representations only
/// fix channel counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: Representation,
    pub output: Representation,
    pub equivariant: bool,
    pub relu: bool,
    /// Multiplier on the default initialization range.
    pub init_scale: f64,
    /// Smooth the input with [`BLUR_KERNEL`] before a convolution.
    #[serde(default)]
    pub blur: bool,
}

/// Center, edge and corner weights of the binomial 3×3 smoothing kernel.
pub const BLUR_KERNEL: [f64; 3] = [0.25, 0.125, 0.0625];

impl LayerSpec {
    pub fn conv(
        name: impl Into<String>,
        input: Representation,
        output: Representation,
        stride: usize,
        pad: usize,
        equivariant: bool,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { stride, pad },
            input,
            output,
            equivariant,
            relu: true,
            init_scale: 1.0,
            blur: false,
        }
    }

    pub fn dense(
        name: impl Into<String>,
        input: Representation,
        output: Representation,
        equivariant: bool,
        relu: bool,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            input,
            output,
            equivariant,
            relu,
            init_scale: 1.0,
            blur: false,
        }
    }

    pub fn with_init_scale(mut self, s: f64) -> Self {
        self.init_scale = s;
        self
    }

    pub fn in_channels(&self, order: usize) -> usize {
        self.input.dim(order)
    }

    pub fn out_channels(&self, order: usize) -> usize {
        self.output.dim(order)
    }

    fn validate(&self, order: usize) -> Result<()> {
        if !self.equivariant {
            return Ok(());
        }
        let has_std = self.input.multiplicity(RepKind::Standard) > 0
            || self.output.multiplicity(RepKind::Standard) > 0;
        if has_std && order < 3 {
            return Err(Error::Config(format!(
                "layer {}: ρ1 fields need a group of order ≥ 3",
                self.name
            )));
        }
        if let LayerKind::Conv { .. } = self.kind {
            let lifting = self.input.is_only(RepKind::Trivial);
            if !(lifting || self.input.is_only(RepKind::Regular))
                || !self.output.is_only(RepKind::Regular)
            {
                return Err(Error::Config(format!(
                    "layer {}: equivariant convolutions map trivial or regular fields to regular fields",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Trainable scalars of the realized layer.
    pub fn num_params(&self, order: usize) -> usize {
        let (ci, co) = (self.in_channels(order), self.out_channels(order));
        if !self.equivariant {
            return match self.kind {
                LayerKind::Conv { .. } => co * ci * 9 + co,
                LayerKind::Dense => co * ci + co,
            };
        }
        let bias = basis::bias_map(order, &self.output).n_params();
        let weight = match self.kind {
            LayerKind::Conv { .. } => {
                let fo = self.output.multiplicity(RepKind::Regular);
                if self.input.is_only(RepKind::Trivial) {
                    fo * ci * basis::KERNEL_COEFFS
                } else {
                    fo * self.input.multiplicity(RepKind::Regular) * order * basis::KERNEL_COEFFS
                }
            }
            LayerKind::Dense => {
                let mut total = 0;
                for &(tk, tm) in self.output.blocks() {
                    for &(fk, fm) in self.input.blocks() {
                        total += tm * fm * basis::intertwiner_dim(fk, tk, order);
                    }
                }
                total
            }
        };
        weight + bias
    }
}

/// A realized layer: parameter slots plus the tying maps of equivariant layers.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    order: usize,
    weight: usize,
    bias: usize,
    wmap: Option<Arc<ExpandMap>>,
    bmap: Option<Arc<ExpandMap>>,
}

impl Layer {
    /// Registers the layer's tensors in `store`, initialized from `rng`.
    pub fn build<F: Float, R: Rng + ?Sized>(
        spec: LayerSpec,
        order: usize,
        store: &mut ParamStore<F>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(order)?;
        let (ci, co) = (spec.in_channels(order), spec.out_channels(order));
        let s = spec.init_scale;
        let (wmap, bmap) = if spec.equivariant {
            let w = match spec.kind {
                LayerKind::Conv { .. } => {
                    let fo = spec.output.multiplicity(RepKind::Regular);
                    if spec.input.is_only(RepKind::Trivial) {
                        basis::lifting_map(order, ci, fo)
                    } else {
                        basis::regular_conv_map(order, spec.input.multiplicity(RepKind::Regular), fo)
                    }
                }
                LayerKind::Dense => basis::dense_map(order, &spec.input, &spec.output),
            };
            (Some(Arc::new(w)), Some(Arc::new(basis::bias_map(order, &spec.output))))
        } else {
            (None, None)
        };
        let (weight, bias) = match (&wmap, &bmap) {
            (Some(w), Some(b)) => {
                // Ring coefficients combine up to three per tap; a range of
                // sqrt(3/fan_in) gives taps a variance near 2/fan_in.
                let bound = match spec.kind {
                    LayerKind::Conv { .. } => (3.0 / (ci * 9) as f64).sqrt(),
                    LayerKind::Dense => (6.0 / ci as f64).sqrt(),
                };
                let wi = store.add_uniform(
                    format!("{}.weight", spec.name),
                    &[w.n_params()],
                    bound * s,
                    rng,
                );
                let bi = store.add_uniform(format!("{}.bias", spec.name), &[b.n_params()], 0.0, rng);
                (wi, bi)
            }
            _ => {
                let (shape, fan_in) = match spec.kind {
                    LayerKind::Conv { .. } => (vec![co, ci, 3, 3], ci * 9),
                    LayerKind::Dense => (vec![co, ci], ci),
                };
                let bound = (6.0 / fan_in as f64).sqrt() * s;
                let wi = store.add_uniform(format!("{}.weight", spec.name), &shape, bound, rng);
                let bi = store.add_uniform(format!("{}.bias", spec.name), &[co], 0.0, rng);
                (wi, bi)
            }
        };
        Ok(Self {
            spec,
            order,
            weight,
            bias,
            wmap,
            bmap,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Full weight tensor `(out, in[, 3, 3])`.
    pub fn weight<F: Float>(&self, g: &mut Graph<F>, pv: &[Var]) -> Var {
        match &self.wmap {
            Some(m) => g.expand(pv[self.weight], m),
            None => pv[self.weight],
        }
    }

    pub fn bias<F: Float>(&self, g: &mut Graph<F>, pv: &[Var]) -> Var {
        match &self.bmap {
            Some(m) => g.expand(pv[self.bias], m),
            None => pv[self.bias],
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, pv: &[Var], x: Var) -> Var {
        let w = self.weight(g, pv);
        let y = match self.spec.kind {
            LayerKind::Conv { stride, pad } => {
                let x = if self.spec.blur { g.blur(x, BLUR_KERNEL) } else { x };
                g.conv2d(x, w, stride, pad)
            }
            LayerKind::Dense => g.matmul_t(x, w),
        };
        let b = self.bias(g, pv);
        let y = g.channel_bias(y, b);
        if self.spec.relu {
            g.relu(y)
        } else {
            y
        }
    }
}

/// Max over the `n` channels of every regular field: `(B, F·n) -> (B, F)`.
pub fn group_pool<F: Float>(g: &mut Graph<F>, x: Var, order: usize) -> Var {
    g.group_max_pool(x, order)
}

/// Eager variant of [`group_pool`] for a single 1×1 regular field vector.
pub fn group_pool_vector<F: Float>(repr: &Representation, order: usize, x: &[F]) -> Result<Vec<F>> {
    if !repr.is_only(RepKind::Regular) {
        return Err(Error::Domain("group pooling needs regular fields".into()));
    }
    if x.len() != repr.dim(order) {
        return Err(Error::Shape(format!(
            "expected {} channels, got {}",
            repr.dim(order),
            x.len()
        )));
    }
    Ok(x.chunks(order)
        .map(|c| c.iter().copied().fold(F::neg_infinity(), F::max))
        .collect())
}
