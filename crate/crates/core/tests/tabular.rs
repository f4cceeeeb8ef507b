use equirl::tabular::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(1 − γ) Σ_t γ^t P_π^t μ` summed until the terms vanish.
fn visitation_by_series(m: &TabularMdp, pi: &TabularPolicy) -> Vec<f64> {
    let n = m.n_states;
    let mut cur = m.mu.clone();
    let mut acc = vec![0.0; n];
    let mut w = 1.0 - m.gamma;
    for _ in 0..5000 {
        for s in 0..n {
            acc[s] += w * cur[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..m.n_actions {
                for s2 in 0..n {
                    next[s2] += cur[s] * pi.prob(s, a) * m.p(s, a, s2);
                }
            }
        }
        cur = next;
        w *= m.gamma;
    }
    acc
}

#[test]
fn two_state_chain_by_hand() {
    // s0 → s1 with probability 1, s1 absorbing; d(s0) = 1 − γ.
    let m = TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], 0.5).unwrap();
    let d = state_visitation(&m, &TabularPolicy::uniform(2, 1)).unwrap();
    assert!((d[0] - 0.5).abs() < 1e-15);
    assert!((d[1] - 0.5).abs() < 1e-15);
}

#[test]
fn visitation_matches_power_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let m = TabularMdp::random(&mut rng, 7, 3, 0.9).unwrap();
        let pi = TabularPolicy::random(&mut rng, 7, 3);
        let d = state_visitation(&m, &pi).unwrap();
        for (x, y) in d.iter().zip(visitation_by_series(&m, &pi)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn visitation_is_invariant_and_breaks_without_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for order in [2, 4, 8] {
        let (m, act) = symmetric_mdp(&mut rng, 3, order, 0.95).unwrap();
        assert_eq!(act.invariance_residual(&m).unwrap(), 0.0);
        let pi = equivariant_random_policy(&mut rng, &m, &act).unwrap();
        assert!(pi.equivariant);
        assert!(verify_visitation_invariance(&m, &act, &pi).unwrap() <= 1e-10);

        let broken = m.perturbed(0, 0, 0, 1, m.p(0, 0, 0).min(0.05)).unwrap();
        assert!(verify_visitation_invariance(&broken, &act, &pi).is_err());
        assert!(visitation_deviation(&broken, &act, &pi).unwrap() > 1e-6);

        let skewed = TabularPolicy::random(&mut rng, m.n_states, m.n_actions);
        assert!(verify_visitation_invariance(&m, &act, &skewed).is_err());
    }
}

#[test]
fn non_uniform_start_is_a_precondition_failure() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (m, act) = symmetric_mdp(&mut rng, 2, 4, 0.9).unwrap();
    let mut mu = vec![0.0; m.n_states];
    mu[0] = 1.0;
    let mut p = Vec::new();
    for s in 0..m.n_states {
        for a in 0..m.n_actions {
            p.extend_from_slice(m.row(s, a));
        }
    }
    let r: Vec<f64> = (0..m.n_states)
        .flat_map(|s| (0..m.n_actions).map(move |a| (s, a)))
        .map(|(s, a)| m.r(s, a))
        .collect();
    let pointed = TabularMdp::new(m.n_states, m.n_actions, p, r, mu, m.gamma).unwrap();
    let pi = equivariant_random_policy(&mut rng, &m, &act).unwrap();
    assert!(verify_visitation_invariance(&pointed, &act, &pi).is_err());
}

#[test]
fn difference_identity_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let m = TabularMdp::random(&mut rng, 6, 2, 0.9).unwrap();
        let beta = TabularPolicy::random(&mut rng, 6, 2);
        let pi = TabularPolicy::random(&mut rng, 6, 2);
        let data = sample_transitions(&mut rng, &m, &beta, 40);
        let m_hat = empirical_mdp(6, 2, 0.9, &m.mu, &data).unwrap();
        assert!(visitation_difference_identity(&m, &m_hat, &pi).unwrap() <= 1e-8);
    }
}

#[test]
fn unvisited_pairs_self_loop_with_zero_reward() {
    let data = [TabTransition { s: 0, a: 1, r: 2.0, s2: 2 }, TabTransition { s: 0, a: 1, r: 4.0, s2: 1 }];
    let m = empirical_mdp(3, 2, 0.9, &[1.0 / 3.0; 3], &data).unwrap();
    assert_eq!(m.row(0, 1), &[0.0, 0.5, 0.5]);
    assert_eq!(m.r(0, 1), 3.0);
    assert_eq!(m.row(2, 0), &[0.0, 0.0, 1.0]);
    assert_eq!(m.r(2, 0), 0.0);
}

#[test]
fn trivial_group_gives_the_same_empirical_mdp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = TabularMdp::random(&mut rng, 5, 3, 0.9).unwrap();
    let beta = TabularPolicy::uniform(5, 3);
    let data = sample_transitions(&mut rng, &m, &beta, 30);
    let e = build_empirical_mdps(5, 3, 0.9, &m.mu, &data, &TabularGroupAction::trivial(5, 3)).unwrap();
    assert_eq!(e.m_hat, e.m_hat_g);
    assert_eq!(e.augmented.len(), data.len());
    assert_eq!(e.orbit_collisions, 0);
}

#[test]
fn augmented_dataset_has_one_copy_per_element() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, act) = symmetric_mdp(&mut rng, 2, 4, 0.9).unwrap();
    let pi = equivariant_random_policy(&mut rng, &m, &act).unwrap();
    let data = sample_transitions(&mut rng, &m, &pi, 12);
    let e = build_empirical_mdps(m.n_states, m.n_actions, 0.9, &m.mu, &data, &act).unwrap();
    assert_eq!(e.augmented.len(), 4 * data.len());
    assert_eq!(&e.augmented[..data.len()], &data[..]);
    assert_eq!(e.counts_g.state.iter().sum::<usize>(), 4 * data.len());
    for g in 0..4 {
        for s in 0..m.n_states {
            assert_eq!(e.counts_g.state[s], e.counts_g.state[act.state(g, s)]);
            for a in 0..m.n_actions {
                assert_eq!(e.counts_g.behavior(s, a), e.counts_g.behavior(act.state(g, s), act.action(g, a)));
            }
        }
    }
}

#[test]
fn trivial_group_bounds_coincide() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let m = TabularMdp::random(&mut rng, 6, 2, 0.9).unwrap();
    let data = sample_transitions(&mut rng, &m, &TabularPolicy::uniform(6, 2), 30);
    let c = compare_bounds(&m, &data, &TabularGroupAction::trivial(6, 2), 0.5).unwrap();
    assert_eq!(c.bound, c.bound_equivariant);
    assert_eq!(c.difference, 0.0);
    assert!(!c.equivariant_smaller);
}

#[test]
fn random_walk_on_a_cycle_visits_uniformly() {
    let mut p = vec![0.0; 16];
    for s in 0..4 {
        p[s * 4 + (s + 1) % 4] = 0.5;
        p[s * 4 + (s + 3) % 4] = 0.5;
    }
    let m = TabularMdp::new(4, 1, p, vec![0.0; 4], vec![0.25; 4], 0.9).unwrap();
    let d = state_visitation(&m, &TabularPolicy::uniform(4, 1)).unwrap();
    assert!(d.iter().all(|x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn bound_holds_whenever_its_premises_do() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut checked, mut drawn) = (0, 0);
    while checked < 100 {
        drawn += 1;
        assert!(drawn < 2000);
        let m = TabularMdp::random(&mut rng, 5, 2, 0.9).unwrap();
        let beta = TabularPolicy::random(&mut rng, 5, 2);
        let pi = TabularPolicy::random(&mut rng, 5, 2);
        let data = sample_transitions(&mut rng, &m, &beta, 100);
        let m_hat = empirical_mdp(5, 2, 0.9, &m.mu, &data).unwrap();
        let counts = DatasetCounts::from_transitions(5, 2, &data);
        let probe = delta_d_bound(&m, &m_hat, &pi, &counts, 1.0).unwrap();
        let b = delta_d_bound(&m, &m_hat, &pi, &counts, probe.min_constant.max(1e-3)).unwrap();
        assert!(b.in_data_premise);
        if b.out_of_data_premise {
            assert!(b.lhs <= b.rhs, "{} > {}", b.lhs, b.rhs);
            checked += 1;
        }
    }
}

#[test]
fn entrywise_premise_alone_does_not_imply_the_bound() {
    // s0 → s1 → s1; the dataset only covers s1, so s0 self-loops in M̂ and
    // its row is off by 2 in ‖·‖₁ while every entry is off by at most 1.
    let m = TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 2], vec![0.5, 0.5], 0.9).unwrap();
    let data = [TabTransition { s: 1, a: 0, r: 0.0, s2: 1 }];
    let m_hat = empirical_mdp(2, 1, 0.9, &m.mu, &data).unwrap();
    let counts = DatasetCounts::from_transitions(2, 1, &data);
    let b = delta_d_bound(&m, &m_hat, &TabularPolicy::uniform(2, 1), &counts, 1e-3).unwrap();
    assert!(b.in_data_premise);
    assert!(!b.out_of_data_premise);
    assert!(b.lhs > b.rhs);
}

#[test]
fn bound_rejects_a_non_positive_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = TabularMdp::random(&mut rng, 3, 2, 0.9).unwrap();
    let counts = DatasetCounts::from_transitions(3, 2, &[]);
    assert!(delta_d_bound(&m, &m, &TabularPolicy::uniform(3, 2), &counts, 0.0).is_err());
}

#[test]
fn exact_model_has_zero_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = TabularMdp::random(&mut rng, 4, 2, 0.9).unwrap();
    let counts = DatasetCounts::from_transitions(4, 2, &[TabTransition { s: 0, a: 0, r: 0.0, s2: 0 }]);
    let b = delta_d_bound(&m, &m, &TabularPolicy::uniform(4, 2), &counts, 0.5).unwrap();
    assert_eq!(b.lhs, 0.0);
    assert!(b.rhs > 0.0);
}

#[test]
fn greedy_policies_break_ties_low_and_stay_equivariant() {
    let q = [1.0, 1.0, 0.5, 0.2, 0.9, 0.9];
    let m = TabularMdp::random(&mut ChaCha8Rng::seed_from_u64(13), 2, 3, 0.9).unwrap();
    let pi = greedy_policy(&m, &q);
    assert_eq!(pi.prob(0, 0), 1.0);
    assert_eq!(pi.prob(1, 1), 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (m, act) = symmetric_mdp(&mut rng, 2, 4, 0.9).unwrap();
    let q = q_iteration(&m);
    let pi_g = equivariant_greedy_policy(&m, &q, &act).unwrap();
    assert!(pi_g.equivariant);
    assert_eq!(pi_g.equivariance_residual(&act).unwrap(), 0.0);
}

#[test]
fn q_iteration_solves_a_bandit() {
    let m = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], 0.5).unwrap();
    let q = q_iteration(&m);
    assert!((q[0] - 2.0).abs() < 1e-9);
    assert!((q[1] - 1.0).abs() < 1e-9);
}

#[test]
fn equivariant_bound_is_smaller_on_the_four_fold_instance() {
    let report = run_theory_suite(&TheoryConfig::default()).unwrap();
    let c = &report.comparison;
    assert_eq!(c.group_order, 4);
    assert!(c.premise_holds, "{c:?}");
    assert!(c.equivariant_smaller, "{c:?}");
    assert!(c.equivariant_policy_certified);
    assert!(c.bound_equivariant < c.bound);
    let n = &report.negative_control;
    assert!(!n.premise_holds, "{n:?}");
}

#[test]
fn theory_suite_reports_every_check() {
    let cfg = TheoryConfig {
        trials: 20,
        ..TheoryConfig::default()
    };
    let r = run_theory_suite(&cfg).unwrap();
    assert!(r.visitation_invariance <= 1e-10);
    assert!(r.broken_symmetry_deviation > 1e-6);
    assert!(r.identity_residual_max <= 1e-8);
    assert_eq!(r.bound_trials_with_premises, 20);
    assert_eq!(r.bound_violations, 0);
    let again = run_theory_suite(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn visitation_is_a_distribution(seed in any::<u64>(), n in 1usize..8, na in 1usize..4, gamma in 0.05f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TabularMdp::random(&mut rng, n, na, gamma).unwrap();
        let pi = TabularPolicy::random(&mut rng, n, na);
        let d = state_visitation(&m, &pi).unwrap();
        prop_assert!(d.iter().all(|&x| x >= -1e-15));
        prop_assert!((d.sum() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cyclic_actions_compose(order in 1usize..7, orbits in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, act) = symmetric_mdp(&mut rng, orbits, order, 0.9).unwrap();
        prop_assert_eq!(act.order(), order);
        prop_assert_eq!(act.invariance_residual(&m).unwrap(), 0.0);
        for s in 0..m.n_states {
            prop_assert_eq!(act.orbit(s).len(), order);
        }
    }
}
