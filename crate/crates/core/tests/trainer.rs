use equirl::analysis::{export_report, q_rotation_probe, AngleGrid};
use equirl::checkpoint::Checkpoint;
use equirl::dataset::{collect_dataset, Augmentation, Budget, OfflineDataset};
use equirl::env::{EnvConfig, PolicyTag};
use equirl::equivariant::ArchConfig;
use equirl::error::Error;
use equirl::group::CyclicGroup;
use equirl::trainer::*;

fn tiny_env() -> EnvConfig {
    EnvConfig {
        resolution: 9,
        supersample: 1,
        max_steps: 12,
        ..EnvConfig::default()
    }
}

fn tiny_data() -> OfflineDataset {
    collect_dataset(&tiny_env(), PolicyTag::Medium, Budget::Episodes(3), 1).unwrap()
}

fn tiny_cfg(algorithm: Algorithm) -> RunConfig {
    let mut cfg = RunConfig {
        algorithm,
        budget: 4,
        eval_every: 2,
        eval_episodes: 2,
        seeds: 2,
        arch: ArchConfig::tiny(4),
        ..RunConfig::default()
    };
    cfg.optim.batch_size = 8;
    cfg
}

#[test]
fn zero_budget_evaluates_once() {
    let data = tiny_data();
    let cfg = RunConfig {
        budget: 0,
        ..tiny_cfg(Algorithm::Iql)
    };
    let out = train_on(&cfg, &data, 0).unwrap();
    assert_eq!(out.record.eval_steps, vec![0]);
    assert_eq!(out.record.best_step, 0);
    assert_eq!(out.record.critic_queries, Some(0));
}

#[test]
fn same_seed_same_curve() {
    let data = tiny_data();
    for alg in [Algorithm::Iql, Algorithm::Cql] {
        let cfg = tiny_cfg(alg);
        let a = train_on(&cfg, &data, 5).unwrap();
        let b = train_on(&cfg, &data, 5).unwrap();
        assert_eq!(a.record.eval_returns, b.record.eval_returns);
        assert_eq!(a.record.eval_steps, vec![0, 2, 4]);
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    }
}

#[test]
fn iql_never_queries_the_critic_off_the_data() {
    let data = tiny_data();
    let cfg = RunConfig {
        budget: 20,
        eval_every: 20,
        ..tiny_cfg(Algorithm::Iql)
    };
    let out = train_on(&cfg, &data, 1).unwrap();
    assert!(out.record.critic_queries.unwrap() >= 20 * 8);
    assert_eq!(out.record.ood_critic_queries, Some(0));
    let cql = train_on(&RunConfig { algorithm: Algorithm::Cql, ..cfg }, &data, 1).unwrap();
    assert_eq!(cql.record.critic_queries, None);
}

#[test]
fn runs_write_their_outputs() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        out_dir: Some(dir.path().to_path_buf()),
        ..tiny_cfg(Algorithm::Cql)
    };
    let outcomes = train_seeds_on(&cfg, &data).unwrap();
    assert_eq!(outcomes.len(), 2);
    for s in [0, 1] {
        let run = dir.path().join(format!("seed_{s}"));
        let mut rd = csv::Reader::from_path(run.join("curve.csv")).unwrap();
        assert_eq!(rd.headers().unwrap(), vec!["step", "mean_return"]);
        let rows: Vec<(u64, f64)> = rd.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2, 4]);
        let summary: RunRecord = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.seed, s);
        let ck = Checkpoint::load(run.join("best.ckpt")).unwrap();
        assert!(ck.actor.is_some() && ck.critic.is_some() && ck.value.is_none());
        assert_eq!(ck.meta["step"], summary.best_step);
    }
    let agg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(agg["label"], "Equi-CQL");
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let data = tiny_data();
    let other_env = EnvConfig {
        max_steps: 13,
        ..tiny_env()
    };
    let cfg = RunConfig {
        env: Some(other_env),
        ..tiny_cfg(Algorithm::Iql)
    };
    assert!(matches!(train_on(&cfg, &data, 0), Err(Error::Config(_))));
    let mut wide = tiny_cfg(Algorithm::Iql);
    wide.arch.resolution = 17;
    assert!(matches!(train_on(&wide, &data, 0), Err(Error::Config(_))));
}

#[test]
fn diverging_updates_abort() {
    let data = tiny_data();
    let mut cfg = RunConfig {
        budget: 200,
        eval_every: 200,
        ..tiny_cfg(Algorithm::Cql)
    };
    cfg.optim.learning_rate = 1e30;
    match train_on(&cfg, &data, 0) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("at update"), "{msg}"),
        other => panic!("expected a numerical error, got {:?}", other.map(|o| o.record)),
    }
}

#[test]
fn ablation_covers_four_arms_and_certifies_actors() {
    let data = tiny_data();
    let cfg = RunConfig {
        budget: 2,
        eval_every: 2,
        ..tiny_cfg(Algorithm::Iql)
    };
    let report = run_ablation_on(&cfg, &data).unwrap();
    assert_eq!(report.arms.len(), 4);
    assert_eq!(report.records.len(), 8);
    for arm in &report.arms {
        assert_eq!(arm.best_returns.len(), 2);
        assert_eq!(arm.actor_certified, arm.actor_equivariant, "{}", arm.label);
    }
    let csv = report.table_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("±"));
}

#[test]
fn augmentation_modes_agree_at_initialization() {
    let data = tiny_data();
    let cfg = RunConfig {
        augmentation: Augmentation::None,
        ..tiny_cfg(Algorithm::Iql)
    };
    let idx: Vec<usize> = (0..data.len().min(6)).collect();
    let batch = data.gather(&idx);
    let expanded = batch.group_expanded(&CyclicGroup::new(4).unwrap());
    let plain = initial_losses(&cfg, &batch, 3).unwrap();
    let full = initial_losses(&cfg, &expanded, 3).unwrap();
    // Under an invariant critic and value net, the rotated copies contribute
    // identical losses, so the expanded batch has the same mean.
    for name in ["value", "critic", "actor"] {
        let (a, b) = (plain.get(name).unwrap(), full.get(name).unwrap());
        assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{name}: {a} vs {b}");
    }
}

#[test]
fn probe_of_an_invariant_critic_is_flat_at_quarter_turns() {
    let data = tiny_data();
    let cfg = RunConfig {
        budget: 2,
        eval_every: 2,
        ..tiny_cfg(Algorithm::Iql)
    };
    let inv = train_on(&cfg, &data, 0).unwrap();
    let plain = train_on(
        &RunConfig {
            actor_equivariant: false,
            critic_invariant: false,
            ..cfg
        },
        &data,
        0,
    )
    .unwrap();
    let p_inv = q_rotation_probe(inv.agent.critic(), &data, 16, AngleGrid::Uniform, "invariant").unwrap();
    let p_plain = q_rotation_probe(plain.agent.critic(), &data, 16, AngleGrid::Uniform, "plain").unwrap();
    assert_eq!((p_inv.mean[0], p_inv.std[0]), (0.0, 0.0));
    assert!(p_inv.quarter_turn_extremes().0 <= 1e-4);
    assert!(p_inv.max_std() < p_plain.max_std());

    let rnd = q_rotation_probe(inv.agent.critic(), &data, 8, AngleGrid::Random { seed: 2 }, "random").unwrap();
    assert_eq!(rnd.angles.len(), 8);
    assert_eq!(rnd.std[0], 0.0);

    let dir = tempfile::tempdir().unwrap();
    let index = export_report(&[inv.record.clone()], &[p_inv.clone()], dir.path()).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join(&index.probes[0].file)).unwrap();
    let rows: Vec<(f64, f64, f64)> = rd.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 16);
    for (row, (a, m)) in rows.iter().zip(p_inv.angles.iter().zip(&p_inv.mean)) {
        assert!((row.0 - a).abs() <= 1e-8 * a.abs().max(1.0));
        assert!((row.1 - m).abs() <= 1e-8 * m.abs().max(1e-3));
    }
    let empty = export_report(&[], &[], &dir.path().join("empty")).unwrap();
    assert!(empty.curves.is_empty() && empty.probes.is_empty());
}

#[test]
fn empty_aggregate_is_an_error() {
    assert!(aggregate_seeds(&[]).is_err());
    let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
    assert_eq!((m, s), (2.0, 1.0));
}

#[test]
fn evaluation_is_seeded() {
    let data = tiny_data();
    let cfg = tiny_cfg(Algorithm::Iql);
    let mut streams = SeedStreams::new(0);
    let agent = Agent::new(&cfg, &mut streams.init).unwrap();
    let env = &data.manifest.env_config;
    let a = evaluate_policy(agent.actor(), env, 4, 0.99, 9).unwrap();
    let b = evaluate_policy(agent.actor(), env, 4, 0.99, 9).unwrap();
    assert_eq!(a, b);
    assert!(evaluate_policy(agent.actor(), env, 0, 0.99, 9).is_err());
}

#[test]
fn cql_switches_change_only_their_terms() {
    use rand::SeedableRng;
    let data = tiny_data();
    let idx: Vec<usize> = (0..8).collect();
    let batch = data.gather(&idx);
    let losses = |cfg: &RunConfig, step: u64| {
        let mut streams = SeedStreams::new(0);
        let mut agent = Agent::new(cfg, &mut streams.init).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        agent.update(&batch, &mut rng, step, false).unwrap()
    };
    let base = tiny_cfg(Algorithm::Cql);
    let mut warm = base.clone();
    warm.cql.bc_warmup = 3;
    let (b0, w0, w3) = (losses(&base, 0), losses(&warm, 0), losses(&warm, 3));
    assert_ne!(b0.get("actor"), w0.get("actor"));
    assert_eq!(b0.get("critic"), w0.get("critic"));
    assert_eq!(losses(&base, 3).get("actor"), w3.get("actor"));

    let mut is = base.clone();
    is.cql.importance_sampling = true;
    let i0 = losses(&is, 0);
    assert!(i0.get("conservative").unwrap().is_finite());
    assert_ne!(i0.get("conservative"), b0.get("conservative"));
    assert_eq!(i0.get("td"), b0.get("td"));
}
