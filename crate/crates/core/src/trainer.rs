//! Offline training runs: agents, periodic evaluation, multi-seed
//! aggregation and the actor/critic ablation matrix.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Array4, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Augmentation, Batch, OfflineDataset, BEHAVIOR_GAMMA};
use crate::env::{bounds, discounted_return, EnvConfig, GraspEnv};
use crate::equivariant::certify::NetRef;
use crate::equivariant::{
    build_matched_baseline, certify_equivariance, stack_states, Actor, ActorVariant, ArchConfig, Critic, NetRole,
    NetSpec, PolicyHead, Subgroup, ValueNet,
};
use crate::error::{Error, Result};
use crate::losses::{
    cql_loss, cql_td_target, entropy_loss, iql_policy_loss, iql_q_loss, iql_value_loss, min_heads, sac_actor_loss,
    CqlConfig, CqlInputs, EntropyMode, IqlConfig, SharedOptimConfig,
};
use crate::nn::{Adam, Graph, ParamStore, Var};
use crate::policy::{self, UNIFORM_LOG_DENSITY};

/// Set to `1` to run seeds one after another instead of on separate threads.
pub const DETERMINISTIC_ENV: &str = "EQUIRL_DETERMINISTIC";

/// Whether the deterministic-numerics environment variable is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Cql,
    Iql,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cql => "CQL",
            Algorithm::Iql => "IQL",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub actor_equivariant: bool,
    /// Critic, and for IQL the value network, invariant.
    pub critic_invariant: bool,
    pub dataset: PathBuf,
    /// Must match the dataset's environment when given.
    pub env: Option<EnvConfig>,
    pub augmentation: Augmentation,
    /// Gradient updates; `0` gives a single evaluation of the initial policy.
    pub budget: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Discount of the evaluation return.
    pub eval_gamma: f64,
    /// Number of seeds; run `k` uses `seed + k`.
    pub seeds: usize,
    pub seed: u64,
    /// Network widths and input size; `group_order` is the `n` of `C_n`.
    pub arch: ArchConfig,
    pub optim: SharedOptimConfig,
    pub cql: CqlConfig,
    pub iql: IqlConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Iql,
            actor_equivariant: true,
            critic_invariant: true,
            dataset: PathBuf::from("data/medium"),
            env: None,
            augmentation: Augmentation::RandomSo2,
            budget: 5000,
            eval_every: 250,
            eval_episodes: 50,
            eval_gamma: BEHAVIOR_GAMMA,
            seeds: 3,
            seed: 0,
            arch: ArchConfig::desk(),
            optim: SharedOptimConfig::default(),
            cql: CqlConfig::default(),
            iql: IqlConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Switches to the full-size schedule and networks: 100k updates (200k for
    /// conventional CQL on optimal data, 300k on sub-optimal data), evaluation
    /// every 1000 updates over 100 episodes.
    pub fn full_scale(mut self, optimal_dataset: bool) -> Self {
        let conventional_cql = self.algorithm == Algorithm::Cql && !self.actor_equivariant && !self.critic_invariant;
        self.budget = match (conventional_cql, optimal_dataset) {
            (false, _) => 100_000,
            (true, true) => 200_000,
            (true, false) => 300_000,
        };
        self.eval_every = 1000;
        self.eval_episodes = 100;
        let n = self.arch.group_order;
        self.arch = ArchConfig {
            group_order: n,
            ..ArchConfig::full()
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.budget % self.eval_every != 0 {
            return Err(Error::Config(format!(
                "eval_every {} must be positive and divide the budget {}",
                self.eval_every, self.budget
            )));
        }
        if self.eval_episodes == 0 || self.seeds == 0 {
            return Err(Error::Config("eval_episodes and seeds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval_gamma) {
            return Err(Error::Config("eval_gamma outside [0, 1]".into()));
        }
        self.arch.validate()?;
        self.optim.validate()?;
        self.cql.validate()?;
        self.iql.validate()?;
        if let Some(env) = &self.env {
            env.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the configuration without the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `Equi-IQL`, `Non-Equi-CQL`, or the mixed arm description.
    pub fn label(&self) -> String {
        let a = self.algorithm.name();
        match (self.actor_equivariant, self.critic_invariant) {
            (true, true) => format!("Equi-{a}"),
            (false, false) => format!("Non-Equi-{a}"),
            (true, false) => format!("{a} (equi actor, non-inv critic)"),
            (false, true) => format!("{a} (non-equi actor, inv critic)"),
        }
    }

    fn spec(&self, role: NetRole, equivariant: bool) -> Result<NetSpec> {
        let eq = NetSpec::new(role, self.arch.clone(), true);
        if equivariant {
            Ok(eq)
        } else {
            build_matched_baseline(&eq)
        }
    }

    /// Errors when the dataset was collected on another environment or has a
    /// different observation size than the networks.
    pub fn check_dataset(&self, data: &OfflineDataset) -> Result<()> {
        let m = &data.manifest;
        if let Some(env) = &self.env {
            if env.config_hash() != m.env_config_hash {
                return Err(Error::Config("dataset was collected on a different environment config".into()));
            }
        }
        let r = self.arch.resolution;
        if m.observation_shape != [2, r, r] {
            return Err(Error::Config(format!(
                "dataset observations {:?} do not fit networks of resolution {r}",
                m.observation_shape
            )));
        }
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(())
    }
}

/// Loss values of one update, by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses(pub Vec<(&'static str, f64)>);

impl StepLosses {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| *n == name).map(|e| e.1)
    }

    fn push(&mut self, name: &'static str, v: f64, step: u64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v} at update {step}")));
        }
        self.0.push((name, v));
        Ok(())
    }
}

fn col(g: &mut Graph<f32>, a: &Array2<f32>) -> Var {
    g.constant(a.clone().into_dyn())
}

fn to2(g: &Graph<f32>, v: Var) -> Array2<f32> {
    g.value(v).clone().into_dimensionality().expect("2-D")
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.scalar(v) as f64
}

/// `min` over both heads of a critic evaluated with `params`, `(B, 1)`.
fn min_q(critic: &Critic<f32>, params: &ParamStore<f32>, states: &Array4<f32>, actions: &Array2<f32>) -> Array2<f32> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let s = g.constant(states.clone().into_dyn());
    let a = col(&mut g, actions);
    let qs = critic.forward(&mut g, &pv, s, a);
    let m = min_heads(&mut g, &qs);
    to2(&g, m)
}

fn select_rows(g: &mut Graph<f32>, head: &PolicyHead, rows: &[usize]) -> PolicyHead {
    let mean = g.gather_rows(head.mean, rows);
    let log_std = if g.value(head.log_std).shape()[0] == 1 {
        head.log_std
    } else {
        g.gather_rows(head.log_std, rows)
    };
    PolicyHead { mean, log_std }
}

fn detach_head(g: &mut Graph<f32>, head: &PolicyHead) -> PolicyHead {
    PolicyHead {
        mean: g.detach(head.mean),
        log_std: g.detach(head.log_std),
    }
}

/// IQL: expectile value regression, TD on `V(s′)` and advantage-weighted
/// policy extraction. The critic only ever sees dataset actions; every query
/// is checked and violations are counted.
#[derive(Clone, Debug)]
pub struct IqlAgent {
    pub actor: Actor<f32>,
    pub critic: Critic<f32>,
    pub target: ParamStore<f32>,
    pub value: ValueNet<f32>,
    actor_opt: Adam<f32>,
    critic_opt: Adam<f32>,
    value_opt: Adam<f32>,
    cfg: IqlConfig,
    polyak: f64,
    pub critic_queries: u64,
    pub ood_queries: u64,
}

impl IqlAgent {
    fn guard(&mut self, queried: &Array2<f32>, data: &Array2<f32>) {
        self.critic_queries += queried.nrows() as u64;
        let bad = if queried.shape() != data.shape() {
            queried.nrows()
        } else {
            queried
                .rows()
                .into_iter()
                .zip(data.rows())
                .filter(|(q, d)| q.iter().zip(d.iter()).any(|(x, y)| x.to_bits() != y.to_bits()))
                .count()
        };
        self.ood_queries += bad as u64;
    }

    /// One update; with `apply = false` only the losses are computed.
    pub fn update(&mut self, b: &Batch, step: u64, apply: bool) -> Result<StepLosses> {
        let mut out = StepLosses::default();
        let a = b.normalized_actions();

        self.guard(&a, &a);
        let q_hat = min_q(&self.critic, &self.target, &b.states, &a);

        let mut g = Graph::new();
        let pv = self.value.params.bind(&mut g, apply);
        let s = g.constant(b.states.clone().into_dyn());
        let v = self.value.forward(&mut g, &pv, s);
        let qh = col(&mut g, &q_hat);
        let lv = iql_value_loss(&mut g, qh, v, self.cfg.expectile)?;
        out.push("value", scalar(&g, lv), step)?;
        let v_s = to2(&g, v);
        if apply {
            let grads = g.backward(lv).collect(&pv);
            self.value_opt.step(&mut self.value.params, &grads)?;
        }

        let v_next = self.value.evaluate(&b.next_states)?;
        let mut g = Graph::new();
        let pv = self.critic.params.bind(&mut g, apply);
        let s = g.constant(b.states.clone().into_dyn());
        self.guard(&a, &a);
        let av = col(&mut g, &a);
        let qs = self.critic.forward(&mut g, &pv, s, av);
        let r = col(&mut g, &b.rewards);
        let d = col(&mut g, &b.dones);
        let vn = col(&mut g, &v_next);
        let lq = iql_q_loss(&mut g, r, vn, &qs, self.cfg.gamma, d)?;
        out.push("critic", scalar(&g, lq), step)?;
        if apply {
            let grads = g.backward(lq).collect(&pv);
            self.critic_opt.step(&mut self.critic.params, &grads)?;
        }

        let mut g = Graph::new();
        let pv = self.actor.params.bind(&mut g, apply);
        let s = g.constant(b.states.clone().into_dyn());
        let head = self.actor.forward(&mut g, &pv, s);
        let lp = policy::log_prob(&mut g, &head, &a);
        let qh = col(&mut g, &q_hat);
        let vs = col(&mut g, &v_s);
        let la = iql_policy_loss(&mut g, qh, vs, lp, self.cfg.beta, self.cfg.weight_clamp)?;
        out.push("actor", scalar(&g, la), step)?;
        if apply {
            let grads = g.backward(la).collect(&pv);
            self.actor_opt.step(&mut self.actor.params, &grads)?;
            self.target.polyak_from(&self.critic.params, self.polyak)?;
        }
        Ok(out)
    }
}

/// CQL(H) on a SAC actor. Critic, actor and temperature losses share one
/// graph; the actor term sees the critic through detached copies so each
/// optimizer only receives its own objective's gradient.
#[derive(Clone, Debug)]
pub struct CqlAgent {
    pub actor: Actor<f32>,
    pub critic: Critic<f32>,
    pub target: ParamStore<f32>,
    log_alpha: ParamStore<f32>,
    actor_opt: Adam<f32>,
    critic_opt: Adam<f32>,
    alpha_opt: Adam<f32>,
    cfg: CqlConfig,
    polyak: f64,
}

impl CqlAgent {
    pub fn alpha(&self) -> f64 {
        match self.cfg.entropy {
            EntropyMode::Fixed(a) => a,
            EntropyMode::Auto { .. } => (self.log_alpha.get(0).value[[0, 0]] as f64).exp(),
        }
    }

    pub fn update<R: RngCore>(&mut self, b: &Batch, rng: &mut R, step: u64, apply: bool) -> Result<StepLosses> {
        let mut out = StepLosses::default();
        let n = b.len();
        let k = self.cfg.n_sampled_actions;
        let alpha = self.alpha();
        let a = b.normalized_actions();

        let mut g = Graph::<f32>::new();
        let pc = self.critic.params.bind(&mut g, apply);
        let pa = self.actor.params.bind(&mut g, apply);
        let both = ndarray::concatenate(Axis(0), &[b.states.view(), b.next_states.view()]).expect("same shapes");
        let both = g.constant(both.into_dyn());
        let head2 = self.actor.forward(&mut g, &pa, both);
        let rows_s: Vec<usize> = (0..n).collect();
        let rows_n: Vec<usize> = (n..2 * n).collect();
        let head_s = select_rows(&mut g, &head2, &rows_s);
        let head_n = select_rows(&mut g, &head2, &rows_n);
        let hs = detach_head(&mut g, &head_s);
        let hn = detach_head(&mut g, &head_n);

        // Proposals: k uniform, k from π(·|s) and k from π(·|s′) per state.
        let rep_s = policy::repeat_head(&mut g, &hs, k);
        let rep_n = policy::repeat_head(&mut g, &hn, k);
        let (ps, lps) = policy::sample(&mut g, &rep_s, &policy::normal_noise(n * k, rng));
        let (pn, lpn) = policy::sample(&mut g, &rep_n, &policy::normal_noise(n * k, rng));
        let uni = policy::uniform_actions::<f32, _>(n * k, rng);
        let (ps, lps, pn, lpn) = (to2(&g, ps), to2(&g, lps), to2(&g, pn), to2(&g, lpn));
        let mut sampled = Array2::<f32>::zeros((n * 3 * k, 5));
        let mut logd = Array2::<f32>::zeros((n, 3 * k));
        for i in 0..n {
            for j in 0..k {
                let src = i * k + j;
                let base = i * 3 * k;
                sampled.row_mut(base + j).assign(&uni.row(src));
                sampled.row_mut(base + k + j).assign(&ps.row(src));
                sampled.row_mut(base + 2 * k + j).assign(&pn.row(src));
                if self.cfg.importance_sampling {
                    logd[[i, j]] = UNIFORM_LOG_DENSITY as f32;
                    logd[[i, k + j]] = lps[[src, 0]];
                    logd[[i, 2 * k + j]] = lpn[[src, 0]];
                }
            }
        }

        let s = g.constant(b.states.clone().into_dyn());
        let enc = self.critic.encode(&mut g, &pc, s);
        let sp = self.critic.state_parts(&mut g, &pc, enc);
        let av = col(&mut g, &a);
        let q_data = self.critic.q_from_parts(&mut g, &pc, &sp, &rows_s, av);
        let rows_rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, 3 * k)).collect();
        let sv = col(&mut g, &sampled);
        let q_samp = self.critic.q_from_parts(&mut g, &pc, &sp, &rows_rep, sv);
        let q_samp = q_samp.map(|q| g.reshape(q, &[n, 3 * k]));

        let (a_next, lp_next) = policy::sample(&mut g, &hn, &policy::normal_noise(n, rng));
        let a_next = to2(&g, a_next);
        let tq = min_q(&self.critic, &self.target, &b.next_states, &a_next);
        let tq = col(&mut g, &tq);
        let r = col(&mut g, &b.rewards);
        let d = col(&mut g, &b.dones);
        let backup = if self.cfg.entropy_backup { alpha } else { 0.0 };
        let target = cql_td_target(&mut g, r, d, tq, lp_next, backup, self.cfg.gamma)?;
        let log_density = col(&mut g, &logd);
        let terms = cql_loss(
            &mut g,
            &CqlInputs {
                q_data: q_data.to_vec(),
                q_sampled: q_samp.to_vec(),
                log_density,
                target,
            },
            &self.cfg,
        )?;

        let (a_pi, lp_pi) = policy::sample(&mut g, &head_s, &policy::normal_noise(n, rng));
        let spd = sp.detached(&mut g);
        let pcd: Vec<Var> = pc.iter().map(|&v| g.detach(v)).collect();
        let q_pi = self.critic.q_from_parts(&mut g, &pcd, &spd, &rows_s, a_pi);
        let mq = if step < self.cfg.bc_warmup {
            policy::log_prob(&mut g, &head_s, &a)
        } else {
            min_heads(&mut g, &q_pi)
        };
        let actor_loss = sac_actor_loss(&mut g, lp_pi, mq, alpha)?;
        let mut total = g.add(terms.total, actor_loss);

        let pl = self.log_alpha.bind(&mut g, apply);
        if let EntropyMode::Auto { target, .. } = self.cfg.entropy {
            let al = entropy_loss(&mut g, pl[0], lp_pi, target)?;
            out.push("alpha", scalar(&g, al), step)?;
            total = g.add(total, al);
        }
        out.push("critic", scalar(&g, terms.total), step)?;
        out.push("conservative", scalar(&g, terms.conservative), step)?;
        out.push("td", scalar(&g, terms.td), step)?;
        out.push("actor", scalar(&g, actor_loss), step)?;

        if apply {
            let grads = g.backward(total);
            self.critic_opt.step(&mut self.critic.params, &grads.collect(&pc))?;
            self.actor_opt.step(&mut self.actor.params, &grads.collect(&pa))?;
            if matches!(self.cfg.entropy, EntropyMode::Auto { .. }) {
                self.alpha_opt.step(&mut self.log_alpha, &grads.collect(&pl))?;
            }
            self.target.polyak_from(&self.critic.params, self.polyak)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Agent {
    Iql(Box<IqlAgent>),
    Cql(Box<CqlAgent>),
}

impl Agent {
    /// Fresh networks for `cfg`; network seeds are drawn from `init`.
    pub fn new<R: RngCore>(cfg: &RunConfig, init: &mut R) -> Result<Self> {
        let lr = cfg.optim.learning_rate;
        let critic = Critic::new(cfg.spec(NetRole::Critic, cfg.critic_invariant)?, init.next_u64())?;
        let target = critic.params.clone();
        Ok(match cfg.algorithm {
            Algorithm::Iql => {
                let actor = Actor::new(
                    cfg.spec(NetRole::Actor(ActorVariant::Iql), cfg.actor_equivariant)?,
                    init.next_u64(),
                )?;
                let value = ValueNet::new(cfg.spec(NetRole::Value, cfg.critic_invariant)?, init.next_u64())?;
                Agent::Iql(Box::new(IqlAgent {
                    actor_opt: Adam::new(lr, &actor.params),
                    critic_opt: Adam::new(lr, &critic.params),
                    value_opt: Adam::new(lr, &value.params),
                    actor,
                    critic,
                    target,
                    value,
                    cfg: cfg.iql.clone(),
                    polyak: cfg.optim.polyak,
                    critic_queries: 0,
                    ood_queries: 0,
                }))
            }
            Algorithm::Cql => {
                let actor = Actor::new(
                    cfg.spec(NetRole::Actor(ActorVariant::Cql), cfg.actor_equivariant)?,
                    init.next_u64(),
                )?;
                let initial = match cfg.cql.entropy {
                    EntropyMode::Auto { initial, .. } => initial,
                    EntropyMode::Fixed(a) => a.max(f64::MIN_POSITIVE),
                };
                let mut log_alpha = ParamStore::new();
                log_alpha.add(
                    "log_alpha",
                    ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), initial.ln() as f32),
                );
                Agent::Cql(Box::new(CqlAgent {
                    actor_opt: Adam::new(lr, &actor.params),
                    critic_opt: Adam::new(lr, &critic.params),
                    alpha_opt: Adam::new(lr, &log_alpha),
                    actor,
                    critic,
                    target,
                    log_alpha,
                    cfg: cfg.cql.clone(),
                    polyak: cfg.optim.polyak,
                }))
            }
        })
    }

    pub fn actor(&self) -> &Actor<f32> {
        match self {
            Agent::Iql(a) => &a.actor,
            Agent::Cql(a) => &a.actor,
        }
    }

    pub fn critic(&self) -> &Critic<f32> {
        match self {
            Agent::Iql(a) => &a.critic,
            Agent::Cql(a) => &a.critic,
        }
    }

    pub fn update<R: RngCore>(&mut self, b: &Batch, rng: &mut R, step: u64, apply: bool) -> Result<StepLosses> {
        match self {
            Agent::Iql(a) => a.update(b, step, apply),
            Agent::Cql(a) => a.update(b, rng, step, apply),
        }
    }

    /// Critic evaluations and those on actions outside the batch (IQL only).
    pub fn critic_query_counts(&self) -> Option<(u64, u64)> {
        match self {
            Agent::Iql(a) => Some((a.critic_queries, a.ood_queries)),
            Agent::Cql(_) => None,
        }
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta,
            actor: Some(self.actor().clone()),
            critic: Some(self.critic().clone()),
            value: match self {
                Agent::Iql(a) => Some(a.value.clone()),
                Agent::Cql(_) => None,
            },
        }
    }
}

/// Mean discounted return of the deterministic policy `tanh(μ(s))` over
/// `episodes` fresh episodes, all stepped as one batch.
pub fn evaluate_policy(actor: &Actor<f32>, env: &EnvConfig, episodes: usize, gamma: f64, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Domain("need at least one evaluation episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs = Vec::with_capacity(episodes);
    let mut obs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut e = GraspEnv::new(env.clone())?;
        obs.push(e.reset(&mut rng));
        envs.push(e);
    }
    let mut rewards: Vec<Vec<f64>> = vec![Vec::new(); episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    while !active.is_empty() {
        let batch: Vec<_> = active.iter().map(|&i| obs[i].clone()).collect();
        let (mean, _) = actor.evaluate(&stack_states(&batch))?;
        let act = policy::deterministic(&mean);
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let a = bounds::denormalize(std::array::from_fn(|k| act[[row, k]] as f64));
            let st = envs[i].step(&a)?;
            rewards[i].push(st.reward);
            obs[i] = st.observation;
            if !st.done {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(rewards.iter().map(|r| discounted_return(r, gamma)).sum::<f64>() / episodes as f64)
}

/// Summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub algorithm: Algorithm,
    pub actor_equivariant: bool,
    pub critic_invariant: bool,
    pub seed: u64,
    pub config_hash: String,
    pub eval_steps: Vec<u64>,
    pub eval_returns: Vec<f64>,
    pub best_return: f64,
    pub best_step: u64,
    pub wall_clock_secs: f64,
    pub behavioral_return: f64,
    /// IQL only: critic rows evaluated, and how many were not batch actions.
    pub critic_queries: Option<u64>,
    pub ood_critic_queries: Option<u64>,
}

impl RunRecord {
    /// `step,mean_return` lines with nine significant digits.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,mean_return\n");
        for (st, r) in self.eval_steps.iter().zip(&self.eval_returns) {
            s.push_str(&format!("{st},{}\n", crate::analysis::fmt_sig(*r)));
        }
        s
    }
}

/// A finished run: its record, the best-evaluating networks and the final agent.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: Checkpoint,
    pub agent: Agent,
}

/// Independent generators for evaluation episodes, network initialization and
/// minibatch sampling, all derived from one master seed.
pub struct SeedStreams {
    pub env: ChaCha8Rng,
    pub init: ChaCha8Rng,
    pub sampling: ChaCha8Rng,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            env: stream(1),
            init: stream(2),
            sampling: stream(3),
        }
    }
}

/// Trains one seed on an already loaded dataset. Nothing is written to disk.
pub fn train_on(cfg: &RunConfig, data: &OfflineDataset, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_dataset(data)?;
    let start = Instant::now();
    let env_cfg = &data.manifest.env_config;
    let mut streams = SeedStreams::new(seed);
    let mut agent = Agent::new(cfg, &mut streams.init)?;
    let mut steps = Vec::new();
    let mut returns = Vec::new();
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    let mut step = 0u64;
    loop {
        if step % cfg.eval_every == 0 {
            let j = evaluate_policy(agent.actor(), env_cfg, cfg.eval_episodes, cfg.eval_gamma, streams.env.next_u64())?;
            log::info!("{} seed {seed}: step {step} return {j:.4}", cfg.label());
            steps.push(step);
            returns.push(j);
            if best.as_ref().is_none_or(|b| j > b.0) {
                let meta = serde_json::json!({
                    "config": cfg,
                    "seed": seed,
                    "step": step,
                    "eval_return": j,
                });
                best = Some((j, step, agent.checkpoint(meta)));
            }
        }
        if step == cfg.budget {
            break;
        }
        let batch = data.sample_batch(&mut streams.sampling, cfg.optim.batch_size, cfg.augmentation)?;
        agent.update(&batch, &mut streams.sampling, step, true)?;
        step += 1;
    }
    let (best_return, best_step, best) = best.expect("at least one evaluation");
    let counts = agent.critic_query_counts();
    let record = RunRecord {
        label: cfg.label(),
        algorithm: cfg.algorithm,
        actor_equivariant: cfg.actor_equivariant,
        critic_invariant: cfg.critic_invariant,
        seed,
        config_hash: cfg.config_hash(),
        eval_steps: steps,
        eval_returns: returns,
        best_return,
        best_step,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        behavioral_return: data.manifest.behavioral_return,
        critic_queries: counts.map(|c| c.0),
        ood_critic_queries: counts.map(|c| c.1),
    };
    Ok(TrainOutcome { record, best, agent })
}

/// Writes `curve.csv`, `summary.json` and `best.ckpt` into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("curve.csv"), outcome.record.curve_csv())?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.record)?)?;
    outcome.best.save(dir.join("best.ckpt"))
}

/// Loads the dataset and trains the single seed `cfg.seed`, writing outputs
/// to `cfg.out_dir` when set.
pub fn train(cfg: &RunConfig) -> Result<RunRecord> {
    let data = OfflineDataset::load(&cfg.dataset)?;
    let outcome = train_on(cfg, &data, cfg.seed)?;
    if let Some(dir) = &cfg.out_dir {
        write_run(dir, &outcome)?;
    }
    Ok(outcome.record)
}

/// Runs `f` for every seed, on separate threads unless deterministic mode is on.
fn for_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if deterministic_mode() || seeds.len() == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}

/// Seeds `seed, seed + 1, …` of a config.
pub fn seed_list(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|k| cfg.seed + k).collect()
}

/// Every seed of `cfg` on one dataset; outputs go to `out_dir/seed_<s>/`.
pub fn train_seeds_on(cfg: &RunConfig, data: &OfflineDataset) -> Result<Vec<TrainOutcome>> {
    let outcomes = for_seeds(&seed_list(cfg), |s| train_on(cfg, data, s))?;
    if let Some(dir) = &cfg.out_dir {
        for o in &outcomes {
            write_run(&dir.join(format!("seed_{}", o.record.seed)), o)?;
        }
        let records: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
        let (mean, std) = aggregate_seeds(&records)?;
        let summary = serde_json::json!({
            "label": cfg.label(),
            "best_return_mean": mean,
            "best_return_std": std,
            "records": records,
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(outcomes)
}

/// Mean and population standard deviation of the best-eval returns.
pub fn aggregate_seeds(records: &[RunRecord]) -> Result<(f64, f64)> {
    let values: Vec<f64> = records.iter().map(|r| r.best_return).collect();
    mean_std(&values)
}

/// Arithmetic mean and population standard deviation, summed in sorted order
/// so that permuting the inputs cannot change the result.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Domain("cannot aggregate zero records".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub actor_equivariant: bool,
    pub critic_invariant: bool,
    pub best_returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Every seed's best actor passes the quarter-turn certificate at 1e-5.
    pub actor_certified: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub records: Vec<RunRecord>,
}

/// The four `(actor_equivariant, critic_invariant)` arms, full model first.
pub const ARMS: [(bool, bool); 4] = [(true, true), (true, false), (false, true), (false, false)];

/// Whether an actor passes the quarter-turn certificate at 1e-5.
pub fn actor_certified(actor: &Actor<f32>, seed: u64) -> Result<bool> {
    Ok(certify_equivariance(NetRef::Actor(actor), 16, Subgroup::QuarterTurns, seed)?.passes(1e-5))
}

/// Trains every arm for every seed of `base` on `data`.
pub fn run_ablation_on(base: &RunConfig, data: &OfflineDataset) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for (ae, ci) in ARMS {
        let cfg = RunConfig {
            actor_equivariant: ae,
            critic_invariant: ci,
            out_dir: base.out_dir.as_ref().map(|d| d.join(arm_dir(ae, ci))),
            ..base.clone()
        };
        runs.push(train_seeds_on(&cfg, data)?);
    }
    let report = ablation_report(base, &runs)?;
    if let Some(dir) = &base.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Summarizes finished runs, one group of seeds per arm, into a report.
/// Each group's arm is read from its records.
pub fn ablation_report(base: &RunConfig, runs: &[Vec<TrainOutcome>]) -> Result<AblationReport> {
    let mut arms = Vec::new();
    let mut records = Vec::new();
    for outcomes in runs {
        let recs: Vec<RunRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
        let (mean, std) = aggregate_seeds(&recs)?;
        let mut certified = true;
        for o in outcomes {
            let actor = o.best.actor.as_ref().expect("checkpoints hold the actor");
            certified &= actor_certified(actor, o.record.seed)?;
        }
        arms.push(ArmSummary {
            label: recs[0].label.clone(),
            actor_equivariant: recs[0].actor_equivariant,
            critic_invariant: recs[0].critic_invariant,
            best_returns: recs.iter().map(|r| r.best_return).collect(),
            mean,
            std,
            actor_certified: certified,
        });
        records.extend(recs);
    }
    Ok(AblationReport {
        algorithm: base.algorithm,
        seeds: seed_list(base),
        arms,
        records,
    })
}

/// Loads `base.dataset` and runs the ablation.
pub fn run_ablation(base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    let data = OfflineDataset::load(&base.dataset)?;
    run_ablation_on(base, &data)
}

fn arm_dir(actor_equivariant: bool, critic_invariant: bool) -> String {
    let a = if actor_equivariant { "equi_actor" } else { "nonequi_actor" };
    let c = if critic_invariant { "inv_critic" } else { "noninv_critic" };
    format!("{a}__{c}")
}

impl AblationReport {
    /// Table layout: one row per arm, check marks for the two components and
    /// `mean ± std` of the best evaluation.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("equivariant_actor,invariant_critic,mean,std,result\n");
        for a in &self.arms {
            let mark = |b: bool| if b { "yes" } else { "no" };
            s.push_str(&format!(
                "{},{},{},{},{:.2} ± {:.2}\n",
                mark(a.actor_equivariant),
                mark(a.critic_invariant),
                crate::analysis::fmt_sig(a.mean),
                crate::analysis::fmt_sig(a.std),
                a.mean,
                a.std
            ));
        }
        s
    }

    pub fn arm(&self, actor_equivariant: bool, critic_invariant: bool) -> Option<&ArmSummary> {
        self.arms
            .iter()
            .find(|a| a.actor_equivariant == actor_equivariant && a.critic_invariant == critic_invariant)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        let mut f = std::fs::File::create(dir.join("ablation.csv"))?;
        f.write_all(self.table_csv().as_bytes())?;
        Ok(())
    }
}

/// Step-0 losses of a fresh agent on one fixed minibatch, without updating.
pub fn initial_losses(cfg: &RunConfig, batch: &Batch, seed: u64) -> Result<StepLosses> {
    let mut streams = SeedStreams::new(seed);
    let mut agent = Agent::new(cfg, &mut streams.init)?;
    agent.update(batch, &mut streams.sampling, 0, false)
}

/// Copies rows `start..end` of a batch.
pub fn batch_rows(b: &Batch, start: usize, end: usize) -> Batch {
    Batch {
        states: b.states.slice(s![start..end, .., .., ..]).to_owned(),
        actions: b.actions.slice(s![start..end, ..]).to_owned(),
        rewards: b.rewards.slice(s![start..end, ..]).to_owned(),
        dones: b.dones.slice(s![start..end, ..]).to_owned(),
        next_states: b.next_states.slice(s![start..end, .., .., ..]).to_owned(),
        indices: b.indices[start..end].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: f64) -> RunRecord {
        RunRecord {
            label: "x".into(),
            algorithm: Algorithm::Iql,
            actor_equivariant: true,
            critic_invariant: true,
            seed: 0,
            config_hash: String::new(),
            eval_steps: vec![0],
            eval_returns: vec![v],
            best_return: v,
            best_step: 0,
            wall_clock_secs: 0.0,
            behavioral_return: 0.0,
            critic_queries: None,
            ood_critic_queries: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = aggregate_seeds(&[rec(0.4), rec(0.6)]).unwrap();
        assert!((m - 0.5).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert_eq!(aggregate_seeds(&[rec(0.3)]).unwrap(), (0.3, 0.0));
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn eval_every_must_divide_budget() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.eval_every = 300;
        assert!(c.validate().is_err());
        c.budget = 0;
        assert!(c.validate().is_ok());
        c.eval_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_budgets() {
        let base = RunConfig {
            algorithm: Algorithm::Cql,
            ..RunConfig::default()
        };
        assert_eq!(base.clone().full_scale(true).budget, 100_000);
        let conv = RunConfig {
            actor_equivariant: false,
            critic_invariant: false,
            ..base
        };
        assert_eq!(conv.clone().full_scale(true).budget, 200_000);
        assert_eq!(conv.clone().full_scale(false).budget, 300_000);
        let p = conv.full_scale(false);
        assert_eq!((p.eval_every, p.eval_episodes, p.arch.resolution), (1000, 100, 65));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let c = RunConfig::from_json_str(r#"{"algorithm": "cql", "budget": 10, "eval_every": 5}"#).unwrap();
        assert_eq!(c.algorithm, Algorithm::Cql);
        assert_eq!(c.eval_episodes, 50);
        assert!(RunConfig::from_json_str(r#"{"budgte": 10}"#).is_err());
        assert_ne!(c.config_hash(), RunConfig::default().config_hash());
        let mut d = c.clone();
        d.out_dir = Some("elsewhere".into());
        assert_eq!(c.config_hash(), d.config_hash());
    }

    #[test]
    fn streams_differ() {
        let mut s = SeedStreams::new(5);
        let (a, b, c) = (s.env.next_u64(), s.init.next_u64(), s.sampling.next_u64());
        assert!(a != b && b != c && a != c);
        assert_eq!(SeedStreams::new(5).env.next_u64(), a);
    }
}
