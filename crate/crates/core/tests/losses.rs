use equirl::losses::*;
use equirl::nn::{check_gradients, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn col(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|_| col(rng, c)).collect()
}

fn arr_col(v: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[v.len(), 1]), v.to_vec()).unwrap()
}

fn arr_mat(m: &[Vec<f64>]) -> ArrayD<f64> {
    let c = m[0].len();
    ArrayD::from_shape_vec(IxDyn(&[m.len(), c]), m.concat()).unwrap()
}

fn expectile_oracle(u: &[f64], tau: f64) -> f64 {
    let mut s = 0.0;
    for &x in u {
        let ind = if x < 0.0 { 1.0 } else { 0.0 };
        s += (tau - ind).abs() * x * x;
    }
    s / u.len() as f64
}

fn grad_ok<F: Fn(&mut Graph<f64>, &[Var]) -> Var>(name: &str, f: F, inputs: &[ArrayD<f64>]) {
    let r = check_gradients(f, inputs, 1e-6, 1e-6);
    assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
}

#[test]
fn iql_losses_match_scalar_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 4..=8 {
        let q_hat = col(&mut rng, n);
        let v = col(&mut rng, n);
        let v_next = col(&mut rng, n);
        let r: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let d: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let q1 = col(&mut rng, n);
        let q2 = col(&mut rng, n);
        let logp = col(&mut rng, n);
        let (tau, gamma, beta, clamp) = (0.8, 0.99, 0.5, 100.0);

        let u: Vec<f64> = (0..n).map(|i| q_hat[i] - v[i]).collect();
        let value_oracle = expectile_oracle(&u, tau);
        let mut q_oracle = 0.0;
        for q in [&q1, &q2] {
            let mut s = 0.0;
            for i in 0..n {
                let y = r[i] + gamma * (1.0 - d[i]) * v_next[i];
                s += (y - q[i]).powi(2);
            }
            q_oracle += s / n as f64;
        }
        let mut p_oracle = 0.0;
        for i in 0..n {
            let w = (beta * (q_hat[i] - v[i])).exp().min(clamp);
            p_oracle -= w * logp[i];
        }
        p_oracle /= n as f64;

        let mut g = Graph::<f64>::new();
        let [qh, vv, vn, rr, dd, a1, a2, lp] =
            [&q_hat, &v, &v_next, &r, &d, &q1, &q2, &logp].map(|x| g.constant(arr_col(x)));
        let lv = iql_value_loss(&mut g, qh, vv, tau).unwrap();
        let lq = iql_q_loss(&mut g, rr, vn, &[a1, a2], gamma, dd).unwrap();
        let lpi = iql_policy_loss(&mut g, qh, vv, lp, beta, clamp).unwrap();
        assert!((g.scalar(lv) - value_oracle).abs() < 1e-6);
        assert!((g.scalar(lq) - q_oracle).abs() < 1e-6);
        assert!((g.scalar(lpi) - p_oracle).abs() < 1e-6);
    }
}

#[test]
fn policy_weights_saturate_and_vanish() {
    let mut g = Graph::<f64>::new();
    let q = column(&mut g, &[50.0, 0.0]);
    let v = column(&mut g, &[0.0, 0.0]);
    let lp = column(&mut g, &[-1.0, -3.0]);
    let l = iql_policy_loss(&mut g, q, v, lp, 0.5, 100.0).unwrap();
    assert!((g.scalar(l) - (100.0 + 3.0) / 2.0).abs() < 1e-12);
}

fn cql_oracle(
    q_data: &[Vec<f64>],
    q_samp: &[Vec<Vec<f64>>],
    logd: &[Vec<f64>],
    target: &[f64],
    weight: f64,
    temp: f64,
) -> (f64, f64, f64) {
    let b = target.len();
    let (mut cons, mut td) = (0.0, 0.0);
    for h in 0..q_data.len() {
        for i in 0..b {
            let mut s = 0.0;
            for j in 0..logd[i].len() {
                s += (q_samp[h][i][j] / temp - logd[i][j]).exp();
            }
            cons += (temp * s.ln() - q_data[h][i]) / b as f64;
            td += (target[i] - q_data[h][i]).powi(2) / b as f64;
        }
    }
    (weight * cons + td, cons, td)
}

#[test]
fn cql_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for b in 4..=8 {
        let k = 30;
        let qd = [col(&mut rng, b), col(&mut rng, b)];
        let qs = [mat(&mut rng, b, k), mat(&mut rng, b, k)];
        let logd = mat(&mut rng, b, k);
        let target = col(&mut rng, b);
        let cfg = CqlConfig {
            cql_weight: 1.3,
            temperature: 0.7,
            ..CqlConfig::default()
        };
        let (t0, c0, d0) = cql_oracle(&qd, &qs, &logd, &target, cfg.cql_weight, cfg.temperature);
        let mut g = Graph::<f64>::new();
        let inp = CqlInputs {
            q_data: qd.iter().map(|q| g.constant(arr_col(q))).collect(),
            q_sampled: qs.iter().map(|q| g.constant(arr_mat(q))).collect(),
            log_density: g.constant(arr_mat(&logd)),
            target: g.constant(arr_col(&target)),
        };
        let terms = cql_loss(&mut g, &inp, &cfg).unwrap();
        assert!((g.scalar(terms.total) - t0).abs() < 1e-5);
        assert!((g.scalar(terms.conservative) - c0).abs() < 1e-5);
        assert!((g.scalar(terms.td) - d0).abs() < 1e-5);
    }
}

#[test]
fn cql_constant_critic_uniform_sampler_closed_form() {
    let (b, n, c, temp) = (5, 10, 0.37, 1.0);
    let log_u = -5.0 * std::f64::consts::LN_2;
    let mut g = Graph::<f64>::new();
    let qd = g.constant(ArrayD::from_elem(IxDyn(&[b, 1]), c));
    let inp = CqlInputs {
        q_data: vec![qd],
        q_sampled: vec![g.constant(ArrayD::from_elem(IxDyn(&[b, n]), c))],
        log_density: g.constant(ArrayD::from_elem(IxDyn(&[b, n]), log_u)),
        target: qd,
    };
    let cfg = CqlConfig {
        temperature: temp,
        ..CqlConfig::default()
    };
    let terms = cql_loss(&mut g, &inp, &cfg).unwrap();
    let closed = temp * ((n as f64).ln() - log_u);
    assert!((g.scalar(terms.conservative) - closed).abs() < 1e-12);
    assert_eq!(g.scalar(terms.td), 0.0);
}

#[test]
fn cql_td_target_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b = 6;
    let (r, d, mq, lp) = (col(&mut rng, b), col(&mut rng, b), col(&mut rng, b), col(&mut rng, b));
    let d: Vec<f64> = d.iter().map(|x| if *x > 0.0 { 1.0 } else { 0.0 }).collect();
    let (alpha, gamma) = (0.2, 0.99);
    let mut g = Graph::<f64>::new();
    let [rv, dv, mv, lv] = [&r, &d, &mq, &lp].map(|x| g.constant(arr_col(x)));
    let y = cql_td_target(&mut g, rv, dv, mv, lv, alpha, gamma).unwrap();
    for i in 0..b {
        let o = r[i] + gamma * (1.0 - d[i]) * (mq[i] - alpha * lp[i]);
        assert!((g.value(y)[[i, 0]] - o).abs() < 1e-12);
    }
}

#[test]
fn sac_losses_match_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let b = 4;
    let (lp, q1, q2) = (col(&mut rng, b), col(&mut rng, b), col(&mut rng, b));
    let (alpha, log_alpha, target) = (0.3, 0.3f64.ln(), -5.0);
    let mut actor_o = 0.0;
    let mut ent_o = 0.0;
    for i in 0..b {
        actor_o += (alpha * lp[i] - q1[i].min(q2[i])) / b as f64;
        ent_o -= log_alpha * (lp[i] + target) / b as f64;
    }
    let mut g = Graph::<f64>::new();
    let [lv, a1, a2] = [&lp, &q1, &q2].map(|x| g.constant(arr_col(x)));
    let m = min_heads(&mut g, &[a1, a2]);
    let la = sac_actor_loss(&mut g, lv, m, alpha).unwrap();
    let lav = g.variable(ArrayD::from_elem(IxDyn(&[1, 1]), log_alpha));
    let le = entropy_loss(&mut g, lav, lv, target).unwrap();
    assert!((g.scalar(la) - actor_o).abs() < 1e-5);
    assert!((g.scalar(le) - ent_o).abs() < 1e-5);
}

#[test]
fn entropy_loss_vanishes_at_target_entropy() {
    let mut g = Graph::<f64>::new();
    let lp = column(&mut g, &[4.0, 6.0]);
    let la = g.variable(ArrayD::from_elem(IxDyn(&[1, 1]), 0.4));
    let l = entropy_loss(&mut g, la, lp, -5.0).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let grads = g.backward(l);
    assert_eq!(grads.wrt(la).unwrap()[[0, 0]], 0.0);
}

#[test]
fn constant_critic_gives_no_actor_gradient_without_entropy() {
    let mut g = Graph::<f64>::new();
    let mean = g.variable(ArrayD::from_elem(IxDyn(&[3, 1]), 0.2));
    let lp = g.square(mean);
    let q = column(&mut g, &[1.0, 1.0, 1.0]);
    let l = sac_actor_loss(&mut g, lp, q, 0.0).unwrap();
    let grads = g.backward(l);
    assert!(grads.wrt(mean).unwrap().iter().all(|x| *x == 0.0));
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let b = 5;
    let c = |rng: &mut ChaCha8Rng| arr_col(&col(rng, b));
    let (q, v, lp) = (c(&mut rng), c(&mut rng), c(&mut rng));
    grad_ok("expectile", |g, x| {
        let u = g.sub(x[0], x[1]);
        expectile_loss(g, u, 0.8).unwrap()
    }, &[q.clone(), v.clone()]);
    grad_ok("iql value", |g, x| {
        let qc = g.constant(q.clone());
        iql_value_loss(g, qc, x[0], 0.7).unwrap()
    }, &[v.clone()]);
    let r = c(&mut rng);
    let d = arr_col(&[0.0, 1.0, 0.0, 0.0, 1.0]);
    grad_ok("iql q", |g, x| {
        let dd = g.constant(d.clone());
        let vn = g.constant(v.clone());
        iql_q_loss(g, x[0], vn, &[x[1], x[2]], 0.99, dd).unwrap()
    }, &[r.clone(), q.clone(), lp.clone()]);
    grad_ok("iql policy", |g, x| {
        let (qc, vc) = (g.constant(q.clone()), g.constant(v.clone()));
        iql_policy_loss(g, qc, vc, x[0], 0.5, 100.0).unwrap()
    }, &[lp.clone()]);
    let k = 7;
    let qs1 = arr_mat(&mat(&mut rng, b, k));
    let qs2 = arr_mat(&mat(&mut rng, b, k));
    let logd = arr_mat(&mat(&mut rng, b, k));
    grad_ok("cql", |g, x| {
        let inp = CqlInputs {
            q_data: vec![x[0], x[1]],
            q_sampled: vec![x[2], x[3]],
            log_density: g.constant(logd.clone()),
            target: g.constant(r.clone()),
        };
        let cfg = CqlConfig { temperature: 0.8, ..CqlConfig::default() };
        cql_loss(g, &inp, &cfg).unwrap().total
    }, &[q.clone(), v.clone(), qs1, qs2]);
    grad_ok("sac actor", |g, x| {
        let m = min_heads(g, &[x[1], x[2]]);
        sac_actor_loss(g, x[0], m, 0.2).unwrap()
    }, &[lp.clone(), q.clone(), v.clone()]);
    let la = ArrayD::from_elem(IxDyn(&[1, 1]), -1.3);
    grad_ok("entropy", |g, x| {
        let lc = g.constant(lp.clone());
        entropy_loss(g, x[0], lc, -5.0).unwrap()
    }, &[la]);
}

proptest! {
    #[test]
    fn median_expectile_is_half_mse(u in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
        let mut g = Graph::<f64>::new();
        let v = column(&mut g, &u);
        let l = expectile_loss(&mut g, v, 0.5).unwrap();
        let mse = u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64;
        prop_assert!((g.scalar(l) - 0.5 * mse).abs() <= 1e-12 * (1.0 + mse));
    }

    #[test]
    fn expectile_loss_is_nonnegative(u in proptest::collection::vec(-10.0f64..10.0, 1..16), tau in 0.01f64..0.99) {
        let mut g = Graph::<f64>::new();
        let v = column(&mut g, &u);
        let l = expectile_loss(&mut g, v, tau).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
    }
}
