//! Actor, critic and value networks, equivariant or conventional.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::group::{RepKind, Representation};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Float;

/// Action dimension `(a_λ, a_x, a_y, a_z, a_θ)`.
pub const ACTION_DIM: usize = 5;

/// Widths and input size shared by the actor, critic and value networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub group_order: usize,
    /// Side of the square observation; must be `2^m + 1`.
    pub resolution: usize,
    /// Regular fields after each spatial layer, `log2(resolution - 1)` entries.
    pub conv_fields: Vec<usize>,
    /// Regular fields of the actor's 1×1 hidden layers.
    pub actor_hidden: Vec<usize>,
    /// Regular fields of the critic/value encoder's 1×1 layers; the last is the encoder output.
    pub encoder_hidden: Vec<usize>,
    /// Regular fields of each Q head's hidden layer.
    pub head_hidden: usize,
    /// Smooth feature maps before every strided convolution.
    #[serde(default)]
    pub antialias: bool,
    /// Multiply observations by a soft disk mask so image corners, which a
    /// 45° rotation discards, do not reach the network.
    #[serde(default)]
    pub disk_mask: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ArchConfig {
    /// 65×65 observations and about a million actor parameters.
    pub fn full() -> Self {
        Self {
            group_order: 8,
            resolution: 65,
            conv_fields: vec![16, 32, 64, 64, 96, 96],
            actor_hidden: vec![96],
            encoder_hidden: vec![64],
            head_hidden: 64,
            antialias: true,
            disk_mask: true,
        }
    }

    /// A narrow 17×17 variant on C_4, sized for single-core training runs.
    pub fn desk() -> Self {
        Self {
            group_order: 4,
            resolution: 17,
            conv_fields: vec![4, 8, 8, 16],
            actor_hidden: vec![16, 16, 16],
            encoder_hidden: vec![16, 16, 32],
            head_hidden: 16,
            antialias: true,
            disk_mask: true,
        }
    }

    /// A very small variant for tests.
    pub fn tiny(order: usize) -> Self {
        Self {
            group_order: order,
            resolution: 9,
            conv_fields: vec![2, 3, 4],
            actor_hidden: vec![4],
            encoder_hidden: vec![4],
            head_hidden: 3,
            antialias: true,
            disk_mask: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_order < 3 {
            return Err(Error::Config("networks need a group of order ≥ 3".into()));
        }
        let r = self.resolution;
        if r < 3 || !(r - 1).is_power_of_two() {
            return Err(Error::Config(format!("resolution {r} is not 2^m + 1")));
        }
        let m = (r - 1).trailing_zeros() as usize;
        if self.conv_fields.len() != m {
            return Err(Error::Config(format!(
                "resolution {r} needs {m} spatial layers, got {}",
                self.conv_fields.len()
            )));
        }
        if self.encoder_hidden.is_empty() {
            return Err(Error::Config("encoder needs at least one 1×1 layer".into()));
        }
        let all = self
            .conv_fields
            .iter()
            .chain(&self.actor_hidden)
            .chain(&self.encoder_hidden)
            .chain(std::iter::once(&self.head_hidden));
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Which distribution head the actor carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorVariant {
    /// State-dependent mean and log-σ.
    Cql,
    /// State-dependent mean, global learnable log-σ.
    Iql,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    Actor(ActorVariant),
    Critic,
    Value,
}

/// Complete description of a network; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub role: NetRole,
    pub arch: ArchConfig,
    pub equivariant: bool,
    /// Conventional networks use `round(scale · fields · n)` channels where the
    /// equivariant network has `fields` regular fields.
    pub width_scale: f64,
}

/// The layer lists realized from a [`NetSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetLayers {
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<Vec<LayerSpec>>,
    /// Whether heads max-pool over regular fields before their last layer.
    pub pool: bool,
}

/// Field layout of the action inside networks: `(a_x, a_y)` as ρ1, then
/// `a_λ, a_z, a_θ` as ρ0.
pub fn action_repr() -> Representation {
    Representation::standard(1).with(RepKind::Trivial, 3)
}

impl NetSpec {
    pub fn new(role: NetRole, arch: ArchConfig, equivariant: bool) -> Self {
        Self {
            role,
            arch,
            equivariant,
            width_scale: 1.0,
        }
    }

    fn hidden(&self, fields: usize) -> Representation {
        if self.equivariant {
            Representation::regular(fields)
        } else {
            let c = (fields as f64 * self.arch.group_order as f64 * self.width_scale).round();
            Representation::trivial((c as usize).max(1))
        }
    }

    fn flat(&self, r: &Representation) -> Representation {
        if self.equivariant {
            r.clone()
        } else {
            Representation::trivial(r.dim(self.arch.group_order))
        }
    }

    fn conv_stack(&self, out: &mut Vec<LayerSpec>) -> Representation {
        let mut cur = Representation::trivial(2);
        let last = self.arch.conv_fields.len() - 1;
        for (i, &f) in self.arch.conv_fields.iter().enumerate() {
            let next = self.hidden(f);
            let (stride, pad) = if i < last { (2, 1) } else { (1, 0) };
            let mut layer = LayerSpec::conv(
                format!("conv{i}"),
                cur,
                next.clone(),
                stride,
                pad,
                self.equivariant,
            );
            layer.blur = self.arch.antialias && stride > 1;
            out.push(layer);
            cur = next;
        }
        cur
    }

    pub fn layers(&self) -> NetLayers {
        let eq = self.equivariant;
        let mut trunk = Vec::new();
        let mut cur = self.conv_stack(&mut trunk);
        match self.role {
            NetRole::Actor(variant) => {
                for (i, &f) in self.arch.actor_hidden.iter().enumerate() {
                    let next = self.hidden(f);
                    trunk.push(LayerSpec::dense(format!("fc{i}"), cur, next.clone(), eq, true));
                    cur = next;
                }
                let extra = match variant {
                    ActorVariant::Cql => ACTION_DIM,
                    ActorVariant::Iql => 0,
                };
                let out = self.flat(&action_repr().with(RepKind::Trivial, extra));
                let head = vec![LayerSpec::dense("out", cur, out, eq, false).with_init_scale(1e-2)];
                NetLayers {
                    trunk,
                    heads: vec![head],
                    pool: false,
                }
            }
            NetRole::Critic => {
                for (i, &f) in self.arch.encoder_hidden.iter().enumerate() {
                    let next = self.hidden(f);
                    trunk.push(LayerSpec::dense(format!("enc{i}"), cur, next.clone(), eq, true));
                    cur = next;
                }
                let fused = cur.concat(&self.flat(&action_repr()));
                let hidden = self.hidden(self.arch.head_hidden);
                let pooled = if eq {
                    Representation::trivial(self.arch.head_hidden)
                } else {
                    hidden.clone()
                };
                let heads = (0..2)
                    .map(|k| {
                        vec![
                            LayerSpec::dense(format!("q{k}.fc"), fused.clone(), hidden.clone(), eq, true),
                            LayerSpec::dense(
                                format!("q{k}.out"),
                                pooled.clone(),
                                Representation::trivial(1),
                                eq,
                                false,
                            ),
                        ]
                    })
                    .collect();
                NetLayers {
                    trunk,
                    heads,
                    pool: eq,
                }
            }
            NetRole::Value => {
                for (i, &f) in self.arch.encoder_hidden.iter().enumerate() {
                    let next = self.hidden(f);
                    trunk.push(LayerSpec::dense(format!("enc{i}"), cur, next.clone(), eq, true));
                    cur = next;
                }
                let head = vec![LayerSpec::dense("out", cur, Representation::trivial(1), eq, false)];
                NetLayers {
                    trunk,
                    heads: vec![head],
                    pool: false,
                }
            }
        }
    }

    /// Trainable scalars, including the IQL actor's global log-σ.
    pub fn num_params(&self) -> usize {
        let n = self.arch.group_order;
        let l = self.layers();
        let layers: usize = l
            .trunk
            .iter()
            .chain(l.heads.iter().flatten())
            .map(|s| s.num_params(n))
            .sum();
        let extra = match self.role {
            NetRole::Actor(ActorVariant::Iql) => ACTION_DIM,
            _ => 0,
        };
        layers + extra
    }

    /// Number of weight layers along the deepest input-to-output path.
    pub fn depth(&self) -> usize {
        let l = self.layers();
        l.trunk.len() + l.heads[0].len()
    }

    /// Stride and padding of each spatial layer.
    pub fn stride_schedule(&self) -> Vec<(usize, usize)> {
        self.layers()
            .trunk
            .iter()
            .filter_map(|s| match s.kind {
                super::layers::LayerKind::Conv { stride, pad } => Some((stride, pad)),
                _ => None,
            })
            .collect()
    }
}

/// A conventional network with the same layer and stride schedule whose
/// parameter count is as close as possible to the equivariant one.
pub fn build_matched_baseline(spec: &NetSpec) -> Result<NetSpec> {
    if !spec.equivariant {
        return Err(Error::Precondition("baseline of a non-equivariant spec".into()));
    }
    spec.arch.validate()?;
    let target = spec.num_params() as f64;
    let at = |s: f64| {
        let mut b = spec.clone();
        b.equivariant = false;
        b.width_scale = s;
        b
    };
    let (mut lo, mut hi) = (1e-3, 4.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if (at(mid).num_params() as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .map(at)
        .min_by(|a, b| {
            let da = (a.num_params() as f64 - target).abs();
            let db = (b.num_params() as f64 - target).abs();
            da.total_cmp(&db)
        })
        .expect("two candidates");
    Ok(best)
}

fn build_layers<F: Float>(
    specs: Vec<LayerSpec>,
    order: usize,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer>> {
    specs
        .into_iter()
        .map(|s| Layer::build(s, order, store, rng))
        .collect()
}

struct Built<F> {
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    pool: bool,
    params: ParamStore<F>,
}

fn build<F: Float>(spec: &NetSpec, seed: u64) -> Result<Built<F>> {
    spec.arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let l = spec.layers();
    let n = spec.arch.group_order;
    let trunk = build_layers(l.trunk, n, &mut params, &mut rng)?;
    let heads = l
        .heads
        .into_iter()
        .map(|h| build_layers(h, n, &mut params, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Built {
        trunk,
        heads,
        pool: l.pool,
        params,
    })
}

fn run_trunk<F: Float>(arch: &ArchConfig, layers: &[Layer], g: &mut Graph<F>, pv: &[Var], s: Var) -> Var {
    let mut x = s;
    if arch.disk_mask {
        let m = g.constant(disk_mask::<F>(arch.resolution, 1.0).into_dyn());
        x = g.mul(x, m);
    }
    for layer in layers {
        if matches!(layer.spec.kind, super::layers::LayerKind::Dense) && g.value(x).ndim() == 4 {
            let b = g.value(x).shape()[0];
            let c = g.value(x).len() / b;
            x = g.reshape(x, &[b, c]);
        }
        x = layer.forward(g, pv, x);
    }
    if g.value(x).ndim() == 4 {
        let b = g.value(x).shape()[0];
        let c = g.value(x).len() / b;
        x = g.reshape(x, &[b, c]);
    }
    x
}

fn check_states(spec: &NetSpec, shape: &[usize]) -> Result<()> {
    let r = spec.arch.resolution;
    if shape.len() != 4 || shape[1] != 2 || shape[2] != r || shape[3] != r {
        return Err(Error::Shape(format!(
            "expected states (B, 2, {r}, {r}), got {shape:?}"
        )));
    }
    Ok(())
}

/// Reorders network action columns `(x, y, λ, z, θ)` to `(λ, x, y, z, θ)`.
fn net_to_action<F: Float>(g: &mut Graph<F>, a: Var) -> Var {
    let xy = g.slice_cols(a, 0, 2);
    let lam = g.slice_cols(a, 2, 3);
    let rest = g.slice_cols(a, 3, 5);
    g.concat_cols(&[lam, xy, rest])
}

/// Reorders `(λ, x, y, z, θ)` to the network layout `(x, y, λ, z, θ)`.
pub(crate) fn action_to_net<F: Float>(g: &mut Graph<F>, a: Var) -> Var {
    let lam = g.slice_cols(a, 0, 1);
    let xy = g.slice_cols(a, 1, 3);
    let rest = g.slice_cols(a, 3, 5);
    g.concat_cols(&[xy, lam, rest])
}

/// Pre-squash policy parameters, columns in action order `(λ, x, y, z, θ)`.
#[derive(Clone, Copy, Debug)]
pub struct PolicyHead {
    /// `(B, 5)` Gaussian means before the tanh squashing.
    pub mean: Var,
    /// `(B, 5)` or, for a global σ, `(1, 5)`; clamped to `[−20, 2]`.
    pub log_std: Var,
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Gaussian policy network.
#[derive(Clone, Debug)]
pub struct Actor<F: Float> {
    pub spec: NetSpec,
    trunk: Vec<Layer>,
    out: Layer,
    log_std: Option<usize>,
    pub params: ParamStore<F>,
}

impl<F: Float> Actor<F> {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        let NetRole::Actor(variant) = spec.role else {
            return Err(Error::Config("actor spec must have the actor role".into()));
        };
        let mut b = build::<F>(&spec, seed)?;
        let log_std = match variant {
            ActorVariant::Iql => Some(b.params.add("log_std", ArrayD::zeros(IxDyn(&[1, ACTION_DIM])))),
            ActorVariant::Cql => None,
        };
        let out = b.heads.remove(0).remove(0);
        Ok(Self {
            spec,
            trunk: b.trunk,
            out,
            log_std,
            params: b.params,
        })
    }

    pub fn variant(&self) -> ActorVariant {
        match self.spec.role {
            NetRole::Actor(v) => v,
            _ => unreachable!("constructor checks the role"),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, pv: &[Var], states: Var) -> PolicyHead {
        let h = run_trunk(&self.spec.arch, &self.trunk, g, pv, states);
        let out = self.out.forward(g, pv, h);
        let raw_mean = g.slice_cols(out, 0, ACTION_DIM);
        let mean = net_to_action(g, raw_mean);
        let raw_log_std = match self.log_std {
            Some(i) => pv[i],
            None => g.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM),
        };
        let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        PolicyHead { mean, log_std }
    }

    /// Eager evaluation: `(mean, log_std)` with `log_std` broadcast to `(B, 5)`.
    pub fn evaluate(&self, states: &Array4<F>) -> Result<(Array2<F>, Array2<F>)> {
        check_states(&self.spec, states.shape())?;
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let s = g.constant(states.clone().into_dyn());
        let head = self.forward(&mut g, &pv, s);
        let mean = to2(g.value(head.mean));
        let ls = to2(g.value(head.log_std));
        let ls = ls.broadcast(mean.raw_dim()).expect("broadcast").to_owned();
        Ok((mean, ls))
    }
}

fn to2<F: Float>(a: &ArrayD<F>) -> Array2<F> {
    a.clone().into_dimensionality().expect("2-D")
}

/// Twin-head Q network with a shared state encoder.
#[derive(Clone, Debug)]
pub struct Critic<F: Float> {
    pub spec: NetSpec,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    pool: bool,
    pub params: ParamStore<F>,
}

/// Per-state part of each head's first layer, reused across many actions.
#[derive(Clone, Copy, Debug)]
pub struct StateParts {
    parts: [Var; 2],
    action_weights: [Var; 2],
}

impl StateParts {
    /// Copies that block gradient flow into the encoder and first-layer weights.
    pub fn detached<F: Float>(&self, g: &mut Graph<F>) -> StateParts {
        StateParts {
            parts: self.parts.map(|v| g.detach(v)),
            action_weights: self.action_weights.map(|v| g.detach(v)),
        }
    }
}

impl<F: Float> Critic<F> {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        if spec.role != NetRole::Critic {
            return Err(Error::Config("critic spec must have the critic role".into()));
        }
        let b = build::<F>(&spec, seed)?;
        Ok(Self {
            spec,
            trunk: b.trunk,
            heads: b.heads,
            pool: b.pool,
            params: b.params,
        })
    }

    /// Encoder features `(B, E)`.
    pub fn encode(&self, g: &mut Graph<F>, pv: &[Var], states: Var) -> Var {
        run_trunk(&self.spec.arch, &self.trunk, g, pv, states)
    }

    /// Splits each head's first layer `W [e; a] + b` into `W_e e + b`, computed
    /// once per state, and `W_a`, applied per action.
    pub fn state_parts(&self, g: &mut Graph<F>, pv: &[Var], enc: Var) -> StateParts {
        let e = g.value(enc).shape()[1];
        let mut parts = [enc; 2];
        let mut action_weights = [enc; 2];
        for (k, head) in self.heads.iter().enumerate() {
            let fc = &head[0];
            let w = fc.weight(g, pv);
            let cols = g.value(w).shape()[1];
            let we = g.slice_cols(w, 0, e);
            action_weights[k] = g.slice_cols(w, e, cols);
            let p = g.matmul_t(enc, we);
            let b = fc.bias(g, pv);
            parts[k] = g.channel_bias(p, b);
        }
        StateParts {
            parts,
            action_weights,
        }
    }

    /// Q values of both heads, `(M, 1)` each, for actions `(M, 5)` paired with
    /// the states at `rows`.
    pub fn q_from_parts(
        &self,
        g: &mut Graph<F>,
        pv: &[Var],
        sp: &StateParts,
        rows: &[usize],
        actions: Var,
    ) -> [Var; 2] {
        let a = action_to_net(g, actions);
        let mut out = [a; 2];
        for (k, head) in self.heads.iter().enumerate() {
            let pa = g.matmul_t(a, sp.action_weights[k]);
            let ps = g.gather_rows(sp.parts[k], rows);
            let h = g.add(ps, pa);
            let h = g.relu(h);
            let h = if self.pool {
                g.group_max_pool(h, self.spec.arch.group_order)
            } else {
                h
            };
            out[k] = head[1].forward(g, pv, h);
        }
        out
    }

    pub fn forward(&self, g: &mut Graph<F>, pv: &[Var], states: Var, actions: Var) -> [Var; 2] {
        let enc = self.encode(g, pv, states);
        let sp = self.state_parts(g, pv, enc);
        let b = g.value(states).shape()[0];
        let rows: Vec<usize> = (0..b).collect();
        self.q_from_parts(g, pv, &sp, &rows, actions)
    }

    /// Eager evaluation of both heads, `(B, 2)`.
    pub fn evaluate(&self, states: &Array4<F>, actions: &Array2<F>) -> Result<Array2<F>> {
        check_states(&self.spec, states.shape())?;
        if actions.shape() != [states.shape()[0], ACTION_DIM] {
            return Err(Error::Shape(format!(
                "actions must be (B, 5), got {:?}",
                actions.shape()
            )));
        }
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let s = g.constant(states.clone().into_dyn());
        let a = g.constant(actions.clone().into_dyn());
        let [q1, q2] = self.forward(&mut g, &pv, s, a);
        let both = g.concat_cols(&[q1, q2]);
        Ok(to2(g.value(both)))
    }
}

/// State-value network.
#[derive(Clone, Debug)]
pub struct ValueNet<F: Float> {
    pub spec: NetSpec,
    trunk: Vec<Layer>,
    out: Layer,
    pub params: ParamStore<F>,
}

impl<F: Float> ValueNet<F> {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        if spec.role != NetRole::Value {
            return Err(Error::Config("value spec must have the value role".into()));
        }
        let mut b = build::<F>(&spec, seed)?;
        let out = b.heads.remove(0).remove(0);
        Ok(Self {
            spec,
            trunk: b.trunk,
            out,
            params: b.params,
        })
    }

    /// `(B, 1)` state values.
    pub fn forward(&self, g: &mut Graph<F>, pv: &[Var], states: Var) -> Var {
        let h = run_trunk(&self.spec.arch, &self.trunk, g, pv, states);
        self.out.forward(g, pv, h)
    }

    pub fn evaluate(&self, states: &Array4<F>) -> Result<Array2<F>> {
        check_states(&self.spec, states.shape())?;
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let s = g.constant(states.clone().into_dyn());
        let v = self.forward(&mut g, &pv, s);
        Ok(to2(g.value(v)))
    }
}

/// Stacks single observations `(2, H, W)` into a batch.
pub fn stack_states<F: Float>(obs: &[ndarray::Array3<F>]) -> Array4<F> {
    let views: Vec<_> = obs.iter().map(|o| o.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal observation shapes")
}

/// Soft disk mask `(1, 1, R, R)`: one inside radius `c − margin`, Gaussian falloff outside.
pub fn disk_mask<F: Float>(resolution: usize, margin: f64) -> ndarray::Array4<F> {
    let c = (resolution as f64 - 1.0) / 2.0;
    let r0 = c - margin;
    ndarray::Array4::from_shape_fn((1, 1, resolution, resolution), |(_, _, i, j)| {
        let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
        F::of(if r <= r0 { 1.0 } else { (-(r - r0).powi(2) / 2.0).exp() })
    })
}
