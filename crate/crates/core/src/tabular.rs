//! Exact finite-MDP checks of the symmetry argument for offline RL: discounted
//! state visitation, its invariance under a group action, the visitation
//! difference identity, the `‖Δ d‖₁` bound and the comparison of that bound
//! between the empirical MDP and its group-augmented counterpart.
//!
//! Visitation uses the `t = 0` convention `d = (1 − γ)(I − γ P_π)⁻¹ μ`, so `d`
//! sums to one. Unvisited state-action pairs of an empirical MDP self-loop
//! with reward zero.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// `P[s][a][s′]`, `R[s][a]`, initial distribution `μ` and discount `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    pub mu: Vec<f64>,
    pub gamma: f64,
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = x.iter().sum();
    x.into_iter().map(|v| v / s).collect()
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, p: Vec<f64>, r: Vec<f64>, mu: Vec<f64>, gamma: f64) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Domain("an MDP needs at least one state and one action".into()));
        }
        if p.len() != n_states * n_actions * n_states || r.len() != n_states * n_actions || mu.len() != n_states {
            return Err(Error::Shape("P, R or μ has the wrong length".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Domain(format!("γ = {gamma} outside (0, 1)")));
        }
        for row in p.chunks(n_states) {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Domain("every P[s][a] must be a probability vector".into()));
            }
        }
        if mu.iter().any(|&x| x < 0.0) || (mu.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Domain("μ must be a probability vector".into()));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("rewards must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            p,
            r,
            mu,
            gamma,
        })
    }

    /// Random kernel and rewards in `[0, 1)`, uniform `μ`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(random_simplex(rng, n_states));
        }
        let r = (0..n_states * n_actions).map(|_| rng.random_range(0.0..1.0)).collect();
        Self::new(n_states, n_actions, p, r, vec![1.0 / n_states as f64; n_states], gamma)
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    /// Moves probability `eps` of `P[s][a]` from `from` to `to`.
    pub fn perturbed(&self, s: usize, a: usize, from: usize, to: usize, eps: f64) -> Result<Self> {
        let mut p = self.p.clone();
        let base = (s * self.n_actions + a) * self.n_states;
        p[base + from] -= eps;
        p[base + to] += eps;
        Self::new(self.n_states, self.n_actions, p, self.r.clone(), self.mu.clone(), self.gamma)
    }

    /// `P_π` with `P_π[s′][s] = Σ_a P[s][a][s′] π(a|s)`.
    pub fn policy_transition(&self, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
        self.check_policy(pi)?;
        let n = self.n_states;
        let mut m = DMatrix::zeros(n, n);
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (s2, &p) in self.row(s, a).iter().enumerate() {
                    m[(s2, s)] += p * w;
                }
            }
        }
        Ok(m)
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(Error::Shape("policy and MDP sizes differ".into()));
        }
        Ok(())
    }
}

/// `π[s][a]`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    probs: Vec<f64>,
    /// Set by [`TabularPolicy::certify`] when `π(a|s) = π(ga|gs)` holds exactly.
    pub equivariant: bool,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Shape("policy table has the wrong length".into()));
        }
        for row in probs.chunks(n_actions) {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Domain("every π[s] must be a probability vector".into()));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
            equivariant: false,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::new(n_states, n_actions, vec![1.0 / n_actions as f64; n_states * n_actions]).expect("valid")
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> Self {
        let probs = (0..n_states).flat_map(|_| random_simplex(rng, n_actions)).collect();
        Self::new(n_states, n_actions, probs).expect("valid")
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Domain(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// `max |π(a|s) − π(ga|gs)|`.
    pub fn equivariance_residual(&self, act: &TabularGroupAction) -> Result<f64> {
        act.check_sizes(self.n_states, self.n_actions)?;
        let mut worst = 0.0f64;
        for g in 0..act.order() {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    worst = worst.max((self.prob(s, a) - self.prob(act.state(g, s), act.action(g, a))).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Sets the equivariant flag from an exact residual check.
    pub fn certify(mut self, act: &TabularGroupAction) -> Result<Self> {
        self.equivariant = self.equivariance_residual(act)? == 0.0;
        Ok(self)
    }
}

/// A finite group acting on states and actions by permutations; element `g`
/// maps `s ↦ state_perm[g][s]`. Element 0 is the identity and composition
/// follows the group law `g ∘ h = (g + h) mod order` of a cyclic group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularGroupAction {
    state_perm: Vec<Vec<usize>>,
    action_perm: Vec<Vec<usize>>,
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

impl TabularGroupAction {
    pub fn new(state_perm: Vec<Vec<usize>>, action_perm: Vec<Vec<usize>>) -> Result<Self> {
        let order = state_perm.len();
        if order == 0 || action_perm.len() != order {
            return Err(Error::Domain("need one state and one action permutation per element".into()));
        }
        for perms in [&state_perm, &action_perm] {
            let n = perms[0].len();
            if perms.iter().any(|p| p.len() != n || !is_permutation(p)) {
                return Err(Error::Domain("every element must act by a permutation".into()));
            }
            if perms[0].iter().enumerate().any(|(i, &j)| i != j) {
                return Err(Error::Domain("element 0 must act as the identity".into()));
            }
            for g in 0..order {
                for h in 0..order {
                    let gh = (g + h) % order;
                    if (0..n).any(|x| perms[g][perms[h][x]] != perms[gh][x]) {
                        return Err(Error::Domain(format!(
                            "permutations do not compose as a cyclic group at ({g}, {h})"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            state_perm,
            action_perm,
        })
    }

    /// Powers of a generator pair; the generators must have order dividing `order`.
    pub fn cyclic(order: usize, state_gen: &[usize], action_gen: &[usize]) -> Result<Self> {
        let powers = |gen: &[usize]| {
            let mut out = vec![(0..gen.len()).collect::<Vec<_>>()];
            for k in 1..order {
                let prev: &Vec<usize> = &out[k - 1];
                out.push(prev.iter().map(|&x| gen[x]).collect());
            }
            out
        };
        Self::new(powers(state_gen), powers(action_gen))
    }

    pub fn trivial(n_states: usize, n_actions: usize) -> Self {
        Self {
            state_perm: vec![(0..n_states).collect()],
            action_perm: vec![(0..n_actions).collect()],
        }
    }

    pub fn order(&self) -> usize {
        self.state_perm.len()
    }

    pub fn state(&self, g: usize, s: usize) -> usize {
        self.state_perm[g][s]
    }

    pub fn action(&self, g: usize, a: usize) -> usize {
        self.action_perm[g][a]
    }

    fn check_sizes(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.state_perm[0].len() != n_states || self.action_perm[0].len() != n_actions {
            return Err(Error::Shape("group action and MDP sizes differ".into()));
        }
        Ok(())
    }

    /// `max |P[s][a][s′] − P[gs][ga][gs′]|` and the same for `R`.
    pub fn invariance_residual(&self, mdp: &TabularMdp) -> Result<f64> {
        self.check_sizes(mdp.n_states, mdp.n_actions)?;
        let mut worst = 0.0f64;
        for g in 0..self.order() {
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let (gs, ga) = (self.state(g, s), self.action(g, a));
                    worst = worst.max((mdp.r(s, a) - mdp.r(gs, ga)).abs());
                    for s2 in 0..mdp.n_states {
                        worst = worst.max((mdp.p(s, a, s2) - mdp.p(gs, ga, self.state(g, s2))).abs());
                    }
                }
            }
        }
        Ok(worst)
    }

    /// States in the orbit of `s`, lowest first.
    pub fn orbit(&self, s: usize) -> Vec<usize> {
        let mut o: Vec<usize> = (0..self.order()).map(|g| self.state(g, s)).collect();
        o.sort_unstable();
        o.dedup();
        o
    }
}

/// A `C_n`-invariant MDP on `orbits · n` states `s = orbit · n + k` where
/// element `g` maps `k ↦ k + g`, with `n` actions shifted the same way plus
/// one fixed action. Rows are random for `k = 0` and transported elsewhere.
pub fn symmetric_mdp<R: Rng + ?Sized>(
    rng: &mut R,
    orbits: usize,
    order: usize,
    gamma: f64,
) -> Result<(TabularMdp, TabularGroupAction)> {
    let ns = orbits * order;
    let na = order + 1;
    let state_gen: Vec<usize> = (0..ns).map(|s| (s / order) * order + (s % order + 1) % order).collect();
    let action_gen: Vec<usize> = (0..na).map(|a| if a < order { (a + 1) % order } else { a }).collect();
    let act = TabularGroupAction::cyclic(order, &state_gen, &action_gen)?;
    let mut p = vec![0.0; ns * na * ns];
    let mut r = vec![0.0; ns * na];
    for o in 0..orbits {
        let rep = o * order;
        for a in 0..na {
            let row = random_simplex(rng, ns);
            let rew = rng.random_range(0.0..1.0);
            for g in 0..order {
                let (gs, ga) = (act.state(g, rep), act.action(g, a));
                r[gs * na + ga] = rew;
                for (s2, &v) in row.iter().enumerate() {
                    p[(gs * na + ga) * ns + act.state(g, s2)] = v;
                }
            }
        }
    }
    let mdp = TabularMdp::new(ns, na, p, r, vec![1.0 / ns as f64; ns], gamma)?;
    Ok((mdp, act))
}

/// A random policy that is exactly equivariant under `act` (transported from
/// orbit representatives; states with a nontrivial stabilizer are averaged).
pub fn equivariant_random_policy<R: Rng + ?Sized>(
    rng: &mut R,
    mdp: &TabularMdp,
    act: &TabularGroupAction,
) -> Result<TabularPolicy> {
    let table: Vec<f64> = (0..mdp.n_states).flat_map(|_| random_simplex(rng, mdp.n_actions)).collect();
    symmetrize_policy(&TabularPolicy::new(mdp.n_states, mdp.n_actions, table)?, act)
}

/// The equivariant policy agreeing with `pi` on orbit representatives, its
/// distribution at each representative averaged over the stabilizer.
pub fn symmetrize_policy(pi: &TabularPolicy, act: &TabularGroupAction) -> Result<TabularPolicy> {
    act.check_sizes(pi.n_states, pi.n_actions)?;
    let (ns, na) = (pi.n_states, pi.n_actions);
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let rep = act.orbit(s)[0];
        if rep != s {
            continue;
        }
        let stab: Vec<usize> = (0..act.order()).filter(|&g| act.state(g, rep) == rep).collect();
        let mut base = vec![0.0; na];
        for &h in &stab {
            for a in 0..na {
                base[act.action(h, a)] += pi.prob(rep, a) / stab.len() as f64;
            }
        }
        for g in 0..act.order() {
            let gs = act.state(g, rep);
            for a in 0..na {
                probs[gs * na + act.action(g, a)] = base[a];
            }
        }
    }
    TabularPolicy::new(ns, na, probs)?.certify(act)
}

/// `d = (1 − γ)(I − γ P_π)⁻¹ μ`.
pub fn state_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DVector<f64>> {
    let g = resolvent(mdp, pi)?;
    Ok(g * DVector::from_vec(mdp.mu.clone()) * (1.0 - mdp.gamma))
}

/// `(I − γ P_π)⁻¹`.
fn resolvent(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<DMatrix<f64>> {
    let n = mdp.n_states;
    let m = DMatrix::identity(n, n) - mdp.policy_transition(pi)? * mdp.gamma;
    m.try_inverse()
        .ok_or_else(|| Error::Numerical("I − γP_π is singular".into()))
}

/// `max_{g,s} |d(gs) − d(s)|` for an invariant MDP, an equivariant policy and uniform `μ`.
pub fn verify_visitation_invariance(mdp: &TabularMdp, act: &TabularGroupAction, pi: &TabularPolicy) -> Result<f64> {
    if act.invariance_residual(mdp)? > STOCHASTIC_TOL {
        return Err(Error::Precondition("the MDP is not invariant under the group action".into()));
    }
    if pi.equivariance_residual(act)? > STOCHASTIC_TOL {
        return Err(Error::Precondition("the policy is not equivariant".into()));
    }
    let u = 1.0 / mdp.n_states as f64;
    if mdp.mu.iter().any(|&m| (m - u).abs() > 1e-15) {
        return Err(Error::Precondition("the initial distribution must be uniform".into()));
    }
    Ok(visitation_deviation(mdp, act, pi)?)
}

/// `max_{g,s} |d(gs) − d(s)|` without precondition checks.
pub fn visitation_deviation(mdp: &TabularMdp, act: &TabularGroupAction, pi: &TabularPolicy) -> Result<f64> {
    let d = state_visitation(mdp, pi)?;
    let mut worst = 0.0f64;
    for g in 0..act.order() {
        for s in 0..mdp.n_states {
            worst = worst.max((d[act.state(g, s)] - d[s]).abs());
        }
    }
    Ok(worst)
}

fn same_space(a: &TabularMdp, b: &TabularMdp) -> Result<()> {
    if a.n_states != b.n_states || a.n_actions != b.n_actions {
        return Err(Error::Shape("MDPs live on different state or action sets".into()));
    }
    Ok(())
}

/// `‖(d_M̂ − d_M) − γ G′ Δ d_M‖_∞` with `G′ = (I − γ P_M̂)⁻¹`, `Δ = P_M̂ − P_M`.
pub fn visitation_difference_identity(m: &TabularMdp, m_hat: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    same_space(m, m_hat)?;
    let d = state_visitation(m, pi)?;
    let d_hat = state_visitation(m_hat, pi)?;
    let g_hat = resolvent(m_hat, pi)?;
    let delta = m_hat.policy_transition(pi)? - m.policy_transition(pi)?;
    let pred = g_hat * (delta * &d) * m.gamma;
    Ok(((d_hat - d) - pred).amax())
}

/// One transition of a tabular dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabTransition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s2: usize,
}

/// Visit counts `D(s)` and `D(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCounts {
    pub n_states: usize,
    pub n_actions: usize,
    pub state: Vec<usize>,
    pub pair: Vec<usize>,
}

impl DatasetCounts {
    pub fn from_transitions(n_states: usize, n_actions: usize, data: &[TabTransition]) -> Self {
        let mut state = vec![0; n_states];
        let mut pair = vec![0; n_states * n_actions];
        for t in data {
            state[t.s] += 1;
            pair[t.s * n_actions + t.a] += 1;
        }
        Self {
            n_states,
            n_actions,
            state,
            pair,
        }
    }

    pub fn d_sa(&self, s: usize, a: usize) -> usize {
        self.pair[s * self.n_actions + a]
    }

    /// Empirical behavior policy `D(a|s) / D(s)`, zero for unvisited states.
    pub fn behavior(&self, s: usize, a: usize) -> f64 {
        if self.state[s] == 0 {
            0.0
        } else {
            self.d_sa(s, a) as f64 / self.state[s] as f64
        }
    }
}

/// Maximum-likelihood MDP of a dataset.
pub fn empirical_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mu: &[f64],
    data: &[TabTransition],
) -> Result<TabularMdp> {
    let mut next = vec![0usize; n_states * n_actions * n_states];
    let mut count = vec![0usize; n_states * n_actions];
    let mut rsum = vec![0.0; n_states * n_actions];
    for t in data {
        if t.s >= n_states || t.s2 >= n_states || t.a >= n_actions {
            return Err(Error::Domain(format!("transition {t:?} out of range")));
        }
        let i = t.s * n_actions + t.a;
        count[i] += 1;
        rsum[i] += t.r;
        next[i * n_states + t.s2] += 1;
    }
    let mut p = vec![0.0; n_states * n_actions * n_states];
    let mut r = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        for a in 0..n_actions {
            let i = s * n_actions + a;
            if count[i] == 0 {
                p[i * n_states + s] = 1.0;
                continue;
            }
            r[i] = rsum[i] / count[i] as f64;
            for s2 in 0..n_states {
                p[i * n_states + s2] = next[i * n_states + s2] as f64 / count[i] as f64;
            }
        }
    }
    TabularMdp::new(n_states, n_actions, p, r, mu.to_vec(), gamma)
}

/// `M̂`, `M̂_G` and the counts of `D` and `D_G`.
#[derive(Clone, Debug)]
pub struct EmpiricalMdps {
    pub m_hat: TabularMdp,
    pub m_hat_g: TabularMdp,
    pub counts: DatasetCounts,
    pub counts_g: DatasetCounts,
    pub augmented: Vec<TabTransition>,
    /// Pairs `(transition, g ≠ e)` whose image state `g·s` is itself a state of `D`.
    pub orbit_collisions: usize,
}

/// `D_G = {(gs, ga, r, gs′)}` enumerated element-major, and the two empirical MDPs.
pub fn build_empirical_mdps(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mu: &[f64],
    data: &[TabTransition],
    act: &TabularGroupAction,
) -> Result<EmpiricalMdps> {
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    act.check_sizes(n_states, n_actions)?;
    let mut augmented = Vec::with_capacity(act.order() * data.len());
    for g in 0..act.order() {
        for t in data {
            augmented.push(TabTransition {
                s: act.state(g, t.s),
                a: act.action(g, t.a),
                r: t.r,
                s2: act.state(g, t.s2),
            });
        }
    }
    if augmented.len() != act.order() * data.len() {
        return Err(Error::Numerical("augmented dataset has the wrong size".into()));
    }
    let counts = DatasetCounts::from_transitions(n_states, n_actions, data);
    let mut orbit_collisions = 0;
    for g in 1..act.order() {
        orbit_collisions += data.iter().filter(|t| counts.state[act.state(g, t.s)] > 0).count();
    }
    Ok(EmpiricalMdps {
        m_hat: empirical_mdp(n_states, n_actions, gamma, mu, data)?,
        m_hat_g: empirical_mdp(n_states, n_actions, gamma, mu, &augmented)?,
        counts_g: DatasetCounts::from_transitions(n_states, n_actions, &augmented),
        counts,
        augmented,
        orbit_collisions,
    })
}

/// Exact `‖Δ d_M^π‖₁` and its bound, with the checked premises.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaBound {
    pub lhs: f64,
    pub rhs: f64,
    /// `‖P̂(·|s,a) − P(·|s,a)‖₁ ≤ C / √D(s,a)` on every visited pair.
    pub in_data_premise: bool,
    /// `‖P̂(·|s,a) − P(·|s,a)‖₁ ≤ 1` on every unvisited pair.
    pub out_of_data_premise: bool,
    /// Smallest `C` satisfying the visited-pair premise.
    pub min_constant: f64,
}

impl DeltaBound {
    pub fn premises_hold(&self) -> bool {
        self.in_data_premise && self.out_of_data_premise
    }
}

fn l1_row_gap(m: &TabularMdp, m_hat: &TabularMdp, s: usize, a: usize) -> f64 {
    m.row(s, a).iter().zip(m_hat.row(s, a)).map(|(x, y)| (x - y).abs()).sum()
}

/// `Σ_{(s,a)∈D} C/√D(s,a) · π(a|s) d(s) + Σ_{(s,a)∉D} π(a|s) d(s)` with `D(s,a) = D(s) π_β(a|s)`.
fn bound_value(pi: &TabularPolicy, d: &DVector<f64>, counts: &DatasetCounts, c: f64) -> f64 {
    let mut total = 0.0;
    for s in 0..pi.n_states {
        for a in 0..pi.n_actions {
            let w = pi.prob(s, a) * d[s];
            let n = counts.state[s] as f64 * counts.behavior(s, a);
            total += if counts.d_sa(s, a) > 0 { c / n.sqrt() * w } else { w };
        }
    }
    total
}

/// `‖(P_M̂^π − P_M^π) d_M^π‖₁` against its bound. Errors if the premises
/// hold and the inequality does not.
pub fn delta_d_bound(
    m: &TabularMdp,
    m_hat: &TabularMdp,
    pi: &TabularPolicy,
    counts: &DatasetCounts,
    c: f64,
) -> Result<DeltaBound> {
    if !(c > 0.0) {
        return Err(Error::Domain("the concentration constant must be positive".into()));
    }
    same_space(m, m_hat)?;
    let d = state_visitation(m, pi)?;
    let delta = m_hat.policy_transition(pi)? - m.policy_transition(pi)?;
    let lhs = (delta * &d).lp_norm(1);
    let rhs = bound_value(pi, &d, counts, c);
    let (mut in_ok, mut out_ok, mut min_c) = (true, true, 0.0f64);
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            let gap = l1_row_gap(m, m_hat, s, a);
            let n = counts.d_sa(s, a);
            if n > 0 {
                let need = gap * (n as f64).sqrt();
                min_c = min_c.max(need);
                in_ok &= need <= c;
            } else {
                out_ok &= gap <= 1.0;
            }
        }
    }
    let out = DeltaBound {
        lhs,
        rhs,
        in_data_premise: in_ok,
        out_of_data_premise: out_ok,
        min_constant: min_c,
    };
    if out.premises_hold() && lhs > rhs * (1.0 + 1e-12) {
        return Err(Error::Numerical(format!("bound violated under its premises: {lhs} > {rhs}")));
    }
    Ok(out)
}

/// Q-iteration to a sup-norm change of `1e-10`; returns `Q[s][a]` row-major.
pub fn q_iteration(mdp: &TabularMdp) -> Vec<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = q.chunks(na).map(|r| r.iter().copied().fold(f64::MIN, f64::max)).collect();
        let mut change = 0.0f64;
        let mut next = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                let x = mdp.r(s, a) + mdp.gamma * ev;
                change = change.max((x - q[s * na + a]).abs());
                next[s * na + a] = x;
            }
        }
        q = next;
        if change <= 1e-10 {
            return q;
        }
    }
}

/// Lowest index among actions within `1e-9` of the row maximum.
fn argmax_low(row: &[f64]) -> usize {
    let m = row.iter().copied().fold(f64::MIN, f64::max);
    row.iter().position(|&x| x >= m - 1e-9).expect("non-empty")
}

/// Deterministic greedy policy with lowest-index tie-breaking.
pub fn greedy_policy(mdp: &TabularMdp, q: &[f64]) -> TabularPolicy {
    let actions: Vec<usize> = q.chunks(mdp.n_actions).map(argmax_low).collect();
    TabularPolicy::deterministic(mdp.n_actions, &actions).expect("in range")
}

/// Greedy at each orbit's lowest state, transported to the rest of the orbit,
/// so ties break the same way everywhere and the result is exactly equivariant.
pub fn equivariant_greedy_policy(mdp: &TabularMdp, q: &[f64], act: &TabularGroupAction) -> Result<TabularPolicy> {
    symmetrize_policy(&greedy_policy(mdp, q), act)
}

/// Both bounds, their difference and the checked premise of the ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub group_order: usize,
    pub constant: f64,
    pub dataset_len: usize,
    pub augmented_len: usize,
    pub orbit_collisions: usize,
    /// `‖Δ_M̂ d^{π*}‖₁^U`.
    pub bound: f64,
    /// `‖Δ_M̂_G d^{π*_G}‖₁^U` from the counts of `D_G`.
    pub bound_equivariant: f64,
    /// The same bound rewritten through the counts of `D`, valid when orbits do not collide.
    pub bound_equivariant_rewritten: f64,
    pub difference: f64,
    /// `(|G| − 1) Σ_D π*_G d − Σ_D C/√(D(s)π_β(a|s)) π*_G d`.
    pub premise_value: f64,
    pub premise_holds: bool,
    pub equivariant_smaller: bool,
    pub equivariant_policy_certified: bool,
    /// Greedy actions of `π*` and `π*_G` coincide on every dataset state.
    pub policies_agree_on_data: bool,
}

/// Compares the bound for the optimal policy of `M̂` with that for the
/// optimal equivariant policy of `M̂_G`; visitation is under the true MDP.
pub fn compare_bounds(
    base: &TabularMdp,
    data: &[TabTransition],
    act: &TabularGroupAction,
    c: f64,
) -> Result<BoundComparison> {
    if !(c > 0.0) {
        return Err(Error::Domain("the concentration constant must be positive".into()));
    }
    let e = build_empirical_mdps(base.n_states, base.n_actions, base.gamma, &base.mu, data, act)?;
    let pi = greedy_policy(&e.m_hat, &q_iteration(&e.m_hat));
    let pi_g = equivariant_greedy_policy(&e.m_hat_g, &q_iteration(&e.m_hat_g), act)?;
    let d = state_visitation(base, &pi)?;
    let d_g = state_visitation(base, &pi_g)?;
    let bound = bound_value(&pi, &d, &e.counts, c);
    let bound_equivariant = bound_value(&pi_g, &d_g, &e.counts_g, c);

    let order = act.order() as f64;
    let (mut in_d, mut in_d_c, mut out_d) = (0.0, 0.0, 0.0);
    for s in 0..base.n_states {
        for a in 0..base.n_actions {
            let w = pi_g.prob(s, a) * d_g[s];
            let n = e.counts.state[s] as f64 * e.counts.behavior(s, a);
            if e.counts.d_sa(s, a) > 0 {
                in_d += w;
                in_d_c += c / n.sqrt() * w;
            } else {
                out_d += w;
            }
        }
    }
    let bound_equivariant_rewritten = order * in_d_c + out_d - (order - 1.0) * in_d;
    let premise_value = (order - 1.0) * in_d - in_d_c;
    let policies_agree_on_data = data
        .iter()
        .all(|t| (0..base.n_actions).all(|a| (pi.prob(t.s, a) - pi_g.prob(t.s, a)).abs() == 0.0));
    Ok(BoundComparison {
        group_order: act.order(),
        constant: c,
        dataset_len: data.len(),
        augmented_len: e.augmented.len(),
        orbit_collisions: e.orbit_collisions,
        bound,
        bound_equivariant,
        bound_equivariant_rewritten,
        difference: bound - bound_equivariant,
        premise_value,
        premise_holds: premise_value > 0.0,
        equivariant_smaller: bound_equivariant < bound,
        equivariant_policy_certified: pi_g.equivariant,
        policies_agree_on_data,
    })
}

/// `count` transitions with `s` uniform, `a` from `behavior` and `s′ ~ P`.
pub fn sample_transitions<R: Rng + ?Sized>(
    rng: &mut R,
    mdp: &TabularMdp,
    behavior: &TabularPolicy,
    count: usize,
) -> Vec<TabTransition> {
    let pick = |rng: &mut R, probs: &mut dyn Iterator<Item = f64>, n: usize| {
        let u: f64 = rng.random_range(0.0..1.0);
        let mut acc = 0.0;
        for (i, p) in probs.enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        n - 1
    };
    (0..count)
        .map(|_| {
            let s = rng.random_range(0..mdp.n_states);
            let a = pick(rng, &mut (0..mdp.n_actions).map(|a| behavior.prob(s, a)), mdp.n_actions);
            let s2 = pick(rng, &mut mdp.row(s, a).iter().copied(), mdp.n_states);
            TabTransition { s, a, r: mdp.r(s, a), s2 }
        })
        .collect()
}

/// Parameters of the randomized check suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub trials: usize,
    /// States of the random MDPs used for the bound and identity trials.
    pub states: usize,
    pub actions: usize,
    /// Order of the cyclic group of the symmetric instance.
    pub group_order: usize,
    /// Concentration constant of the bound comparison.
    pub constant: f64,
    pub transitions: usize,
    /// Transitions of the comparison dataset.
    pub comparison_transitions: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            states: 6,
            actions: 2,
            group_order: 4,
            constant: 0.5,
            transitions: 200,
            comparison_transitions: 50,
            gamma: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub config: TheoryConfig,
    /// `max |d(gs) − d(s)|` on the symmetric instance with an equivariant policy.
    pub visitation_invariance: f64,
    /// The same quantity after breaking one transition entry.
    pub broken_symmetry_deviation: f64,
    pub identity_residual_max: f64,
    /// Random instances drawn; drawing stops once `trials` of them satisfy both premises.
    pub bound_trials: usize,
    pub bound_trials_with_premises: usize,
    pub bound_violations: usize,
    pub max_lhs_over_rhs: f64,
    pub comparison: BoundComparison,
    /// The comparison rerun with a constant large enough to break the premise.
    pub negative_control: BoundComparison,
}

/// Runs every check of this module on seeded random instances.
///
/// Bound trials use, per trial, the larger of `constant` and the smallest
/// constant satisfying the visited-pair premise, so that the inequality is
/// exercised at its tightest admissible value. Instances whose unvisited
/// pairs break the `‖·‖₁ ≤ 1` premise are drawn but not counted.
pub fn run_theory_suite(cfg: &TheoryConfig) -> Result<TheoryReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.trials == 0 || cfg.states < 2 || cfg.actions == 0 || cfg.group_order == 0 {
        return Err(Error::Config("trials, states, actions and group order must be positive".into()));
    }

    let (sym, act) = symmetric_mdp(&mut rng, 2, cfg.group_order, cfg.gamma)?;
    let pi = equivariant_random_policy(&mut rng, &sym, &act)?;
    let visitation_invariance = verify_visitation_invariance(&sym, &act, &pi)?;
    let broken = sym.perturbed(0, 0, 0, 1, sym.p(0, 0, 0).min(0.05))?;
    let broken_symmetry_deviation = visitation_deviation(&broken, &act, &pi)?;

    let mut identity_residual_max = 0.0f64;
    let (mut attempts, mut valid, mut violations, mut worst) = (0, 0, 0, 0.0f64);
    while valid < cfg.trials && attempts < 50 * cfg.trials {
        attempts += 1;
        let m = TabularMdp::random(&mut rng, cfg.states, cfg.actions, cfg.gamma)?;
        let beta = TabularPolicy::random(&mut rng, cfg.states, cfg.actions);
        let pi = TabularPolicy::random(&mut rng, cfg.states, cfg.actions);
        let data = sample_transitions(&mut rng, &m, &beta, cfg.transitions);
        let m_hat = empirical_mdp(cfg.states, cfg.actions, cfg.gamma, &m.mu, &data)?;
        identity_residual_max = identity_residual_max.max(visitation_difference_identity(&m, &m_hat, &pi)?);
        let counts = DatasetCounts::from_transitions(cfg.states, cfg.actions, &data);
        let probe = delta_d_bound(&m, &m_hat, &pi, &counts, cfg.constant)?;
        let c = cfg.constant.max(probe.min_constant);
        let b = delta_d_bound(&m, &m_hat, &pi, &counts, c)?;
        if b.premises_hold() {
            valid += 1;
            worst = worst.max(b.lhs / b.rhs);
            if b.lhs > b.rhs {
                violations += 1;
            }
        }
    }

    let behavior = equivariant_random_policy(&mut rng, &sym, &act)?;
    let data = sample_transitions(&mut rng, &sym, &behavior, cfg.comparison_transitions);
    let comparison = compare_bounds(&sym, &data, &act, cfg.constant)?;
    let negative_control = compare_bounds(&sym, &data, &act, (cfg.constant * 100.0).max(50.0))?;
    Ok(TheoryReport {
        config: cfg.clone(),
        visitation_invariance,
        broken_symmetry_deviation,
        identity_residual_max,
        bound_trials: attempts,
        bound_trials_with_premises: valid,
        bound_violations: violations,
        max_lhs_over_rhs: worst,
        comparison,
        negative_control,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_absorbing_state() {
        let m = TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 0.9).unwrap();
        let d = state_visitation(&m, &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TabularMdp::new(1, 1, vec![0.5], vec![0.0], vec![1.0], 0.9).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0).is_err());
        assert!(TabularGroupAction::new(vec![vec![1, 0]], vec![vec![0]]).is_err());
        assert!(TabularGroupAction::cyclic(3, &[1, 0], &[0]).is_err());
    }
}
