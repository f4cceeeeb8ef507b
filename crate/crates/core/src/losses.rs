//! CQL and IQL objectives over graph tensors.
//!
//! Every function here takes precomputed network outputs as `(B, 1)` columns
//! or `(B, K)` matrices, so the same code serves training, tests and oracles.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::scalar::Float;

pub use crate::nn::polyak_update;

/// How the SAC entropy temperature is chosen in CQL mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Learned `log α` driven toward `target` entropy.
    Auto { initial: f64, target: f64 },
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqlConfig {
    pub cql_weight: f64,
    pub temperature: f64,
    /// Samples per source: uniform, `π(·|s)` and `π(·|s′)`.
    pub n_sampled_actions: usize,
    /// Subtract each proposal's log-density inside the logsumexp. Off, every
    /// sampled action counts equally.
    pub importance_sampling: bool,
    /// Updates during which the actor maximizes the dataset action's
    /// likelihood instead of Q.
    pub bc_warmup: u64,
    pub entropy: EntropyMode,
    /// Subtract `α log π(a′|s′)` inside the TD target.
    pub entropy_backup: bool,
    pub gamma: f64,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self {
            cql_weight: 1.0,
            temperature: 1.0,
            n_sampled_actions: 10,
            importance_sampling: false,
            bc_warmup: 0,
            entropy: EntropyMode::Auto {
                initial: 1e-2,
                target: -(crate::equivariant::ACTION_DIM as f64),
            },
            entropy_backup: true,
            gamma: 0.99,
        }
    }
}

impl CqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cql_weight >= 0.0) {
            return Err(Error::Config("cql_weight must be ≥ 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("cql temperature must be > 0".into()));
        }
        if self.n_sampled_actions < 1 {
            return Err(Error::Config("n_sampled_actions must be ≥ 1".into()));
        }
        match self.entropy {
            EntropyMode::Auto { initial, .. } if !(initial > 0.0) => {
                return Err(Error::Config("initial entropy temperature must be > 0".into()))
            }
            EntropyMode::Fixed(a) if !(a >= 0.0) => {
                return Err(Error::Config("entropy temperature must be ≥ 0".into()))
            }
            _ => {}
        }
        check_gamma(self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IqlConfig {
    pub expectile: f64,
    pub beta: f64,
    pub weight_clamp: f64,
    pub gamma: f64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            expectile: 0.8,
            beta: 0.5,
            weight_clamp: 100.0,
            gamma: 0.99,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        check_expectile(self.expectile)?;
        if !(self.beta > 0.0) || !(self.weight_clamp > 0.0) {
            return Err(Error::Config("beta and weight_clamp must be > 0".into()));
        }
        check_gamma(self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharedOptimConfig {
    pub learning_rate: f64,
    pub polyak: f64,
    pub batch_size: usize,
}

impl Default for SharedOptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            polyak: 5e-3,
            batch_size: 64,
        }
    }
}

impl SharedOptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.polyak > 0.0 && self.polyak <= 1.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate, polyak and batch_size must be positive (polyak ≤ 1)".into(),
            ));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!("discount {gamma} outside [0, 1]")))
    }
}

fn check_expectile(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("expectile {tau} outside (0, 1)")))
    }
}

fn same_shape<F: Float>(g: &Graph<F>, vars: &[Var]) -> Result<()> {
    let s = g.value(vars[0]).shape();
    for v in &vars[1..] {
        if g.value(*v).shape() != s {
            return Err(Error::Shape(format!(
                "expected {s:?}, got {:?}",
                g.value(*v).shape()
            )));
        }
    }
    Ok(())
}

/// `mean |τ − 𝟙(u < 0)| u²`.
pub fn expectile_loss<F: Float>(g: &mut Graph<F>, u: Var, tau: f64) -> Result<Var> {
    check_expectile(tau)?;
    let w = g
        .value(u)
        .mapv(|x| F::of(if x < F::zero() { 1.0 - tau } else { tau }));
    let w = g.constant(w);
    let sq = g.square(u);
    let l = g.mul(w, sq);
    Ok(g.mean(l))
}

/// Expectile regression of `V(s)` toward `Q̂(s, a)`; `q_hat` is detached here.
pub fn iql_value_loss<F: Float>(g: &mut Graph<F>, q_hat: Var, v: Var, tau: f64) -> Result<Var> {
    same_shape(g, &[q_hat, v])?;
    let q = g.detach(q_hat);
    let u = g.sub(q, v);
    expectile_loss(g, u, tau)
}

/// `y = r + γ (1 − done) x`, detached from `x`.
pub fn bellman_target<F: Float>(g: &mut Graph<F>, reward: Var, done: Var, next: Var, gamma: f64) -> Result<Var> {
    same_shape(g, &[reward, done, next])?;
    let x = g.detach(next);
    let notdone = g.value(done).mapv(|d| F::one() - d);
    let nd = g.constant(notdone);
    let t = g.mul(nd, x);
    let t = g.scale(t, gamma);
    Ok(g.add(reward, t))
}

/// Sum over heads of `mean (target − Q)²`.
pub fn squared_td<F: Float>(g: &mut Graph<F>, target: Var, qs: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &q in qs {
        same_shape(g, &[target, q])?;
        let d = g.sub(target, q);
        let sq = g.square(d);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    total.ok_or_else(|| Error::Shape("no Q heads".into()))
}

/// `Σ_heads mean (r + γ(1 − done) V(s′) − Q(s, a))²` with `V(s′)` detached.
pub fn iql_q_loss<F: Float>(
    g: &mut Graph<F>,
    reward: Var,
    v_next: Var,
    qs: &[Var],
    gamma: f64,
    done: Var,
) -> Result<Var> {
    let y = bellman_target(g, reward, done, v_next, gamma)?;
    squared_td(g, y, qs)
}

/// Advantage weights `min(exp(β (Q̂ − V)), clamp)` as constants.
pub fn advantage_weights<F: Float>(g: &Graph<F>, q_hat: Var, v: Var, beta: f64, clamp: f64) -> ArrayD<F> {
    let (q, vv) = (g.value(q_hat), g.value(v));
    let mut w = q - vv;
    w.mapv_inplace(|a| F::of((beta * a.as_f64()).exp().min(clamp)));
    w
}

/// `−mean(min(exp(β (Q̂ − V)), clamp) · log π(a|s))`.
pub fn iql_policy_loss<F: Float>(
    g: &mut Graph<F>,
    q_hat: Var,
    v: Var,
    log_pi: Var,
    beta: f64,
    clamp: f64,
) -> Result<Var> {
    same_shape(g, &[q_hat, v, log_pi])?;
    let w = advantage_weights(g, q_hat, v, beta, clamp);
    let w = g.constant(w);
    let l = g.mul(w, log_pi);
    let m = g.mean(l);
    Ok(g.neg(m))
}

/// Per-head terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct CqlTerms {
    pub total: Var,
    pub conservative: Var,
    pub td: Var,
}

/// Critic-side inputs of the CQL objective for one batch.
#[derive(Clone, Debug)]
pub struct CqlInputs {
    /// `Q_k(s, a_data)`, `(B, 1)` per head.
    pub q_data: Vec<Var>,
    /// `Q_k(s, ã_j)`, `(B, K)` per head, `K` sampled actions per state.
    pub q_sampled: Vec<Var>,
    /// Log-density of each `ã_j` under its proposal, `(B, K)`, constant.
    pub log_density: Var,
    /// Bellman target, `(B, 1)`, constant.
    pub target: Var,
}

/// `Σ_k [α_cql · mean_b(T · logsumexp_j(Q_k(s,ã_j)/T − log μ(ã_j)) − Q_k(s,a)) + mean_b(y − Q_k(s,a))²]`.
///
/// `conservative` and `td` in the result are summed over heads as well.
pub fn cql_loss<F: Float>(g: &mut Graph<F>, inp: &CqlInputs, cfg: &CqlConfig) -> Result<CqlTerms> {
    cfg.validate()?;
    if inp.q_data.is_empty() || inp.q_data.len() != inp.q_sampled.len() {
        return Err(Error::Shape("need one sampled-Q matrix per head".into()));
    }
    let logd = g.detach(inp.log_density);
    let mut cons: Option<Var> = None;
    for (&qd, &qs) in inp.q_data.iter().zip(&inp.q_sampled) {
        same_shape(g, &[qs, logd])?;
        let z = g.scale(qs, 1.0 / cfg.temperature);
        let z = g.sub(z, logd);
        let lse = g.logsumexp_cols(z);
        let lse = g.scale(lse, cfg.temperature);
        same_shape(g, &[lse, qd])?;
        let gap = g.sub(lse, qd);
        let m = g.mean(gap);
        cons = Some(match cons {
            Some(c) => g.add(c, m),
            None => m,
        });
    }
    let conservative = cons.expect("non-empty");
    let target = g.detach(inp.target);
    let td = squared_td(g, target, &inp.q_data)?;
    let wc = g.scale(conservative, cfg.cql_weight);
    let total = g.add(wc, td);
    Ok(CqlTerms {
        total,
        conservative,
        td,
    })
}

/// `r + γ(1 − done)(min_k Q̄_k(s′, a′) − α log π(a′|s′))`, detached.
///
/// Pass `alpha = 0` to drop the entropy backup.
pub fn cql_td_target<F: Float>(
    g: &mut Graph<F>,
    reward: Var,
    done: Var,
    min_target_q: Var,
    log_pi_next: Var,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    same_shape(g, &[min_target_q, log_pi_next])?;
    let lp = g.detach(log_pi_next);
    let ent = g.scale(lp, alpha);
    let soft = g.sub(min_target_q, ent);
    bellman_target(g, reward, done, soft, gamma)
}

/// `mean(α log π(ã|s) − min_k Q_k(s, ã))` for reparameterized `ã ~ π(·|s)`.
pub fn sac_actor_loss<F: Float>(g: &mut Graph<F>, log_pi: Var, min_q: Var, alpha: f64) -> Result<Var> {
    same_shape(g, &[log_pi, min_q])?;
    let a = g.scale(log_pi, alpha);
    let d = g.sub(a, min_q);
    Ok(g.mean(d))
}

/// `−mean(log α · (log π + target))` with `log π` detached; drives the
/// policy entropy toward `−target`.
pub fn entropy_loss<F: Float>(g: &mut Graph<F>, log_alpha: Var, log_pi: Var, target_entropy: f64) -> Result<Var> {
    if g.value(log_alpha).len() != 1 {
        return Err(Error::Shape("log α must be a single scalar".into()));
    }
    let lp = g.detach(log_pi);
    let t = g.add_scalar(lp, target_entropy);
    let m = g.mean(t);
    let m = g.detach(m);
    let l = g.mul(log_alpha, m);
    Ok(g.neg(l))
}

/// Elementwise minimum over heads.
pub fn min_heads<F: Float>(g: &mut Graph<F>, qs: &[Var]) -> Var {
    let mut m = qs[0];
    for &q in &qs[1..] {
        m = g.minimum(m, q);
    }
    m
}

/// A `(rows, 1)` constant column.
pub fn column<F: Float>(g: &mut Graph<F>, values: &[F]) -> Var {
    g.constant(ArrayD::from_shape_vec(IxDyn(&[values.len(), 1]), values.to_vec()).expect("column"))
}
