use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use equirl::analysis::{export_report, q_rotation_probe, AngleGrid};
use equirl::checkpoint::Checkpoint;
use equirl::dataset::{collect_dataset, Budget, OfflineDataset};
use equirl::env::{EnvConfig, PolicyTag};
use equirl::equivariant::{certify_equivariance, NetRef, Subgroup};
use equirl::error::{Error, Result};
use equirl::tabular::{run_theory_suite, TheoryConfig};
use equirl::trainer::{self, RunConfig};

/// SO(2)-equivariant offline RL on a rotation-invariant grasping task.
///
/// Set EQUIRL_DETERMINISTIC=1 to run seeds sequentially so repeated runs are
/// bitwise identical.
#[derive(Parser)]
#[command(name = "equirl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent configuration and write curve.csv, summary.json and best.ckpt.
    Train(TrainArgs),
    /// Train all four actor/critic symmetry arms and write ablation.json and ablation.csv.
    Ablate(AblateArgs),
    /// Roll out a behavior policy and save the transitions.
    Collect(CollectArgs),
    /// Measure the equivariance residuals of every network in a checkpoint.
    Certify(CertifyArgs),
    /// Rotate dataset pairs by a grid of angles and record how the critic's Q-values move.
    Probe(ProbeArgs),
    /// Run the tabular visitation and bound checks and write a JSON report.
    Theory(TheoryArgs),
}

#[derive(Args)]
struct ScaleArgs {
    /// Use the full-size budgets, evaluation and network widths.
    #[arg(long)]
    full_scale: bool,
    /// With --full-scale: the dataset is expert data (longer conventional-CQL budget).
    #[arg(long, requires = "full_scale")]
    optimal_dataset: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train only this seed (default: every seed of the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scale: ScaleArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scale: ScaleArgs,
}

#[derive(Args)]
#[group(id = "budget", required = true, multiple = false)]
struct BudgetArgs {
    #[arg(long, group = "budget")]
    episodes: Option<usize>,
    /// Whole episodes until at least this many transitions.
    #[arg(long, group = "budget")]
    transitions: Option<usize>,
}

#[derive(Args)]
struct CollectArgs {
    /// Environment config JSON; defaults apply to omitted fields.
    #[arg(long)]
    env: PathBuf,
    /// expert, medium or near-random.
    #[arg(long)]
    policy: PolicyTag,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes PATH.manifest.json and PATH.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Residual threshold for quarter turns.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint holding a critic; repeat to probe several.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 128)]
    angles: usize,
    /// Draw angles uniformly at random instead of the evenly spaced grid.
    #[arg(long)]
    random_angles: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    states: usize,
    #[arg(long, default_value_t = 4)]
    group_order: usize,
    #[arg(long, default_value_t = 0.5)]
    constant: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Path, scale: &ScaleArgs, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json_file(path)?;
    if scale.full_scale {
        cfg = cfg.full_scale(scale.optimal_dataset);
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out(cfg: &RunConfig) -> PathBuf {
    let slug: String = cfg
        .label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    PathBuf::from("runs").join(slug)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.scale, a.out)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(default_out(&cfg));
    }
    let dir = cfg.out_dir.clone().expect("set above");
    let data = OfflineDataset::load(&cfg.dataset)?;
    if let Some(seed) = a.seed {
        let outcome = trainer::train_on(&cfg, &data, seed)?;
        trainer::write_run(&dir, &outcome)?;
        let r = &outcome.record;
        println!("{} seed {}: best {:.4} at step {}", r.label, r.seed, r.best_return, r.best_step);
    } else {
        let outcomes = trainer::train_seeds_on(&cfg, &data)?;
        let records: Vec<_> = outcomes.into_iter().map(|o| o.record).collect();
        let (mean, std) = trainer::aggregate_seeds(&records)?;
        println!("{}: best {mean:.4} ± {std:.4} over {} seeds", cfg.label(), records.len());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.scale, a.out)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("runs").join(format!("ablation_{}", cfg.algorithm.name().to_lowercase())));
    }
    let report = trainer::run_ablation(&cfg)?;
    print!("{}", report.table_csv());
    Ok(())
}

fn collect(a: CollectArgs) -> Result<()> {
    let env = EnvConfig::from_json_file(&a.env)?;
    let budget = match (a.budget.episodes, a.budget.transitions) {
        (Some(n), _) => Budget::Episodes(n),
        (_, Some(n)) => Budget::Transitions(n),
        _ => unreachable!("clap requires one budget"),
    };
    let data = collect_dataset(&env, a.policy, budget, a.seed)?;
    data.save(&a.out)?;
    let m = &data.manifest;
    println!(
        "{} episodes, {} transitions, behavioral return {:.4}",
        m.episodes, m.transitions, m.behavioral_return
    );
    Ok(())
}

fn certify(a: CertifyArgs) -> Result<bool> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut nets: Vec<(&str, NetRef<'_, f32>)> = Vec::new();
    if let Some(n) = &ck.actor {
        nets.push(("actor", NetRef::Actor(n)));
    }
    if let Some(n) = &ck.critic {
        nets.push(("critic", NetRef::Critic(n)));
    }
    if let Some(n) = &ck.value {
        nets.push(("value", NetRef::Value(n)));
    }
    let mut ok = true;
    let mut out = serde_json::Map::new();
    for (key, net) in nets {
        let equivariant = match &net {
            NetRef::Actor(n) => n.spec.equivariant,
            NetRef::Critic(n) => n.spec.equivariant,
            NetRef::Value(n) => n.spec.equivariant,
        };
        let quarter = certify_equivariance(net, a.samples, Subgroup::QuarterTurns, a.seed)?;
        let full = certify_equivariance(net, a.samples, Subgroup::Full, a.seed)?;
        let pass = quarter.passes(a.tolerance);
        if equivariant && !pass {
            ok = false;
        }
        println!(
            "{key}: equivariant={equivariant} quarter-turn max {:.3e} ({}), all elements max {:.3e}",
            quarter.max_deviation,
            if pass { "pass" } else { "fail" },
            full.max_deviation
        );
        out.insert(key.into(), serde_json::json!({ "quarter_turns": quarter, "full": full }));
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ok)
}

fn probe(a: ProbeArgs) -> Result<()> {
    let data = OfflineDataset::load(&a.dataset)?;
    let grid = if a.random_angles {
        AngleGrid::Random { seed: a.seed }
    } else {
        AngleGrid::Uniform
    };
    let mut results = Vec::new();
    for path in &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let critic = ck
            .critic
            .as_ref()
            .ok_or_else(|| Error::Format(format!("{} holds no critic", path.display())))?;
        let tag = if critic.spec.equivariant { "invariant" } else { "non_invariant" };
        let tag = format!("{tag}:{}", path.display());
        let r = q_rotation_probe(critic, &data, a.angles, grid, &tag)?;
        let (qstd, qmean) = r.quarter_turn_extremes();
        println!(
            "{tag}: max std {:.3e}, at multiples of 90° std {:.3e} |mean| {:.3e}",
            r.max_std(),
            qstd,
            qmean
        );
        results.push(r);
    }
    let index = export_report(&[], &results, &a.out)?;
    println!("wrote {} probe files to {}", index.probes.len(), a.out.display());
    Ok(())
}

fn theory(a: TheoryArgs) -> Result<()> {
    let cfg = TheoryConfig {
        trials: a.trials,
        states: a.states,
        group_order: a.group_order,
        constant: a.constant,
        seed: a.seed,
        ..TheoryConfig::default()
    };
    let report = run_theory_suite(&cfg)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?)?;
    let c = &report.comparison;
    println!("visitation invariance {:.3e}", report.visitation_invariance);
    println!("identity residual {:.3e}", report.identity_residual_max);
    println!(
        "bound: {} violations in {} trials with premises ({} drawn)",
        report.bound_violations, report.bound_trials_with_premises, report.bound_trials
    );
    println!(
        "comparison: U = {:.4}, U_G = {:.4}, premise {}, equivariant smaller {}",
        c.bound, c.bound_equivariant, c.premise_holds, c.equivariant_smaller
    );
    println!("negative control premise holds: {}", report.negative_control.premise_holds);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Collect(a) => collect(a).map(|_| true),
        Command::Certify(a) => certify(a),
        Command::Probe(a) => probe(a).map(|_| true),
        Command::Theory(a) => theory(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
