//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Set `RDRL_ACCEPTANCE_DIR` to keep run directories; otherwise they live in
//! a temporary directory. Runs with an unchanged config found there are
//! reused.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use proptest::prelude::*;

use common::props::{self, bounds_strategy, pre_action, run_property};
use common::{grad, grid_search, small_dispatch_cases};
use rdrl_core::env::{action_bounds, RewardConfig, VvcEnv};
use rdrl_core::grid::{two_bus, CaseName};
use rdrl_core::harness::{self, window_stats, ExperimentConfig, Method, MetricsRow};
use rdrl_core::mbo::{optimize, MboConfig};
use rdrl_core::powerflow::{InjectionSet, RadialSolver};
use rdrl_core::residual::{base_only_metrics, train_stage, PolicyChain, StageSchedule};
use rdrl_core::sac::AgentConfig;

const WINDOW: usize = 10;
const DAYS: usize = 60;
const SEEDS: [u64; 3] = [0, 1, 2];
const HIDDEN: usize = 128;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!(
            "criterion {id} {name}: {} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
        println!("{line}");
        self.lines.push((id, pass, line));
    }
}

fn power_flow_exactness() -> (bool, String) {
    let (r, p) = (0.01, 0.1);
    let case = two_bus(r, 0.0, p, 0.0).unwrap();
    let sol = RadialSolver::new(&case)
        .unwrap()
        .solve(&InjectionSet::from_loads(&case))
        .unwrap();
    let exact = (1.0 + (1.0 - 4.0 * r * p).sqrt()) / 2.0;
    let worst_v = (sol.v_mag[1] - exact).abs();
    let (mut worst_mis, mut worst_bal): (f64, f64) = (0.0, 0.0);
    for name in [CaseName::Case33, CaseName::Case69, CaseName::Case118] {
        let case = name.with_devices();
        let solver = RadialSolver::new(&case).unwrap();
        let inj = InjectionSet::from_loads(&case);
        let sol = solver.solve(&inj).unwrap();
        worst_mis = worst_mis.max(solver.mismatch(&inj, &sol).unwrap());
        let loss = solver.branch_losses(&sol.voltages());
        worst_bal = worst_bal.max((sol.p_inj.iter().sum::<f64>() - loss).abs());
    }
    (
        worst_v < 1e-9 && worst_mis < 1e-8 && worst_bal < 1e-8,
        format!("two-bus {worst_v:.1e}, mismatch {worst_mis:.1e}, balance {worst_bal:.1e}"),
    )
}

fn oracle_dispatch() -> (bool, String) {
    let reward = RewardConfig::default();
    let (mut da_max, mut df_max, mut shortfall): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let cases = small_dispatch_cases();
    for case in &cases {
        let inj = InjectionSet::from_loads(case);
        let bounds = action_bounds(case);
        let res = optimize(case, &inj, &bounds, &MboConfig::default()).unwrap();
        let (a_grid, f_grid) = grid_search(case, &inj, &bounds, &reward, 1e-2);
        let da = res
            .a_m
            .iter()
            .zip(&a_grid)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        da_max = da_max.max(da);
        df_max = df_max.max((res.objective - f_grid).abs());
        shortfall = shortfall.max(f_grid - res.objective);
    }
    // The grid optimum is a lower bound on the true one; only falling short
    // of it counts against the dispatcher.
    (
        da_max < 2e-2 && shortfall < 1e-4,
        format!(
            "{} cases, action gap {da_max:.1e}, shortfall {shortfall:.1e}, |objective gap| {df_max:.1e}",
            cases.len()
        ),
    )
}

fn agent_config() -> AgentConfig {
    AgentConfig {
        hidden: vec![HIDDEN, HIDDEN],
        ..AgentConfig::default()
    }
}

fn experiment(root: &Path, method: Method, lambdas: &[f64], name: &str) -> ExperimentConfig {
    ExperimentConfig {
        case_name: CaseName::Case33,
        method,
        lambda_schedule: lambdas.to_vec(),
        perturb_factor: None,
        n_days: DAYS,
        full_schedule: false,
        seeds: SEEDS.to_vec(),
        scenario_seed: 0,
        noise_width: rdrl_core::env::DEFAULT_NOISE_WIDTH,
        c_v: rdrl_core::env::DEFAULT_PENALTY,
        agent: agent_config(),
        mbo: MboConfig::default(),
        output_dir: root.join(name),
        base_cache_dir: Some(root.join("base_cache")),
    }
}

fn cold_start(root: &Path) -> (bool, String) {
    let cfg = experiment(root, Method::Rdrl, &[0.5], "cold");
    let profile = Arc::new(cfg.scenarios().unwrap());
    let (policy, table) = harness::dispatch_table(&cfg, &profile, cfg.perturbation()).unwrap();
    let case = Arc::new(CaseName::Case33.with_devices());
    let bounds = action_bounds(&case);
    let mut env = VvcEnv::new(case, profile, cfg.reward()).unwrap();
    let chain = PolicyChain::new(table, policy.describe(), bounds);
    let ambo = base_only_metrics(&chain, &mut env, 1).unwrap()[1].reward;
    let mut worst: f64 = 0.0;
    for seed in SEEDS {
        let schedule = StageSchedule {
            lambda: 0.5,
            n_days: 1,
            seed,
        };
        let trained = train_stage(&chain, &mut env, &cfg.agent_config(), &schedule).unwrap();
        let first = trained.metrics[1].reward;
        worst = worst.max((first - ambo).abs() / ambo.abs());
    }
    (
        worst <= 0.02,
        format!("AMBO day 0 {ambo:.4}, worst relative gap {:.3}%", 100.0 * worst),
    )
}

fn rows_of_stage(rows: &[MetricsRow], stage: usize) -> Vec<MetricsRow> {
    rows.iter().filter(|r| r.stage == stage).cloned().collect()
}

fn critic_loss(rows: &[MetricsRow]) -> f64 {
    let s = window_stats(rows, WINDOW).unwrap();
    s.critic_loss_p + s.critic_loss_v
}

/// `a >= b` in at least two seeds and in the seed-mean.
fn majority_ge(a: &harness::WindowStats, b: &harness::WindowStats) -> (bool, usize) {
    let wins = a
        .per_seed_reward
        .iter()
        .filter(|(s, r)| **r >= b.per_seed_reward[s])
        .count();
    (wins >= 2 && a.mean_reward >= b.mean_reward, wins)
}

fn fmt_seeds(s: &harness::WindowStats) -> String {
    let v: Vec<String> = s.per_seed_reward.values().map(|r| format!("{r:.4}")).collect();
    format!("{:.4} [{}]", s.mean_reward, v.join(" "))
}

fn gradient_suite() -> (bool, String) {
    let cases: [(&str, fn(u64) -> f64); 4] = [
        ("mlp", grad::mlp_case),
        ("critic", grad::critic_case),
        ("actor", grad::actor_case),
        ("alpha", grad::alpha_case),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in cases {
        let worst = (0..100).map(f).fold(0.0, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    (pass, parts.join(", "))
}

fn mechanical_invariants() -> (bool, String) {
    let mut failures = Vec::new();
    let mut check = |name: &str, r: Result<(), String>| {
        if let Err(e) = r {
            failures.push(format!("{name}: {e}"));
        }
    };
    check(
        "containment",
        run_property(
            512,
            (bounds_strategy(6).prop_flat_map(|b| {
                let d = b.dim();
                (Just(b), pre_action(d))
            }), 1e-3..=1.0f64),
            |((b, pre), l)| props::residual_containment(&b, l, &pre),
        ),
    );
    check(
        "stage clip",
        run_property(
            256,
            (
                bounds_strategy(4).prop_flat_map(|b| {
                    let d = b.dim();
                    (Just(b), prop::collection::vec(-8.0..8.0f64, d))
                }),
                prop::collection::vec(0.05..=1.0f64, 0..=2),
                0.1..50.0f64,
                0u64..1000,
                prop::collection::vec(-3.0..3.0f64, 3),
            ),
            |((b, a_m), ls, scale, seed, s)| props::stage_clip_feasibility(&b, &ls, scale, seed, &a_m, &s),
        ),
    );
    let bounds = action_bounds(&CaseName::Case33.with_devices());
    let (c, h) = (bounds.center(), bounds.half_width());
    check(
        "zero residual",
        run_property(
            16,
            (prop::collection::vec(-1.0..1.0f64, 4), prop::collection::vec(0.05..=1.0f64, 0..=2), 0u64..50),
            |(u, ls, day_seed)| {
                let a: Vec<f64> = u.iter().zip(c.iter().zip(&h)).map(|(u, (c, h))| c + 2.0 * h * u).collect();
                props::zero_residual_day(a, &ls, day_seed)
            },
        ),
    );
    // Small enough to enumerate.
    let fifo: Result<(), String> = (1..=16)
        .flat_map(|cap| (0..=48).map(move |n| (cap, n)))
        .try_for_each(|(cap, n)| props::fifo(cap, n).map_err(|e| format!("capacity {cap}, n {n}: {e}")));
    check("fifo", fifo);
    check(
        "scenarios",
        run_property(
            64,
            (any::<u64>(), 1usize..6, 0usize..4, prop_oneof![Just(0.0), 0.01..0.5f64]),
            |(seed, d, e, w)| props::scenario_determinism(seed, d, e, w),
        ),
    );
    let pass = failures.is_empty();
    (
        pass,
        if pass {
            "containment, stage clip, zero residual, fifo (exhaustive to 16x48), scenarios".into()
        } else {
            failures.join("; ")
        },
    )
}

#[test]
fn acceptance() {
    let _ = env_logger::builder().is_test(true).try_init();
    let tmp = tempfile::tempdir().unwrap();
    let root: PathBuf = std::env::var_os("RDRL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    let mut report = Report { lines: Vec::new() };
    let clock = Instant::now();

    let (p, d) = power_flow_exactness();
    report.record(1, "power-flow exactness", p, d);
    let (p, d) = oracle_dispatch();
    report.record(2, "oracle OPF equivalence", p, d);
    let (p, d) = cold_start(&root);
    report.record(3, "inheritance at cold start", p, d);

    let run = |method, lambdas: &[f64], name| {
        let cfg = experiment(&root, method, lambdas, name);
        let t = Instant::now();
        let out = harness::run(&cfg).unwrap();
        println!("  {} finished in {:.0?}", cfg.label(), t.elapsed());
        out.rows
    };
    let mbo = window_stats(&run(Method::Mbo, &[], "mbo"), WINDOW).unwrap();
    let ambo = window_stats(&run(Method::Ambo, &[], "ambo"), WINDOW).unwrap();
    let drl_rows = run(Method::Drl, &[], "drl");
    let drl = window_stats(&drl_rows, WINDOW).unwrap();
    let rdrl = window_stats(&run(Method::Rdrl, &[0.5], "rdrl_0.5"), WINDOW).unwrap();
    let rdrl_e_rows = run(Method::Rdrl, &[1.0], "rdrl_1.0");
    let rdrl_e = window_stats(&rdrl_e_rows, WINDOW).unwrap();
    let rdrl_02_rows = run(Method::Rdrl, &[0.2], "rdrl_0.2");
    let boost_rows = run(Method::Brdrl, &[0.1, 0.2], "brdrl_0.1_0.2");

    let (a, wa) = majority_ge(&mbo, &rdrl);
    let (b, wb) = majority_ge(&rdrl, &ambo);
    let (c, wc) = majority_ge(&rdrl, &drl);
    report.record(
        4,
        "training ordering",
        a && b && c,
        format!(
            "MBO {} >= RDRL(0.5) {} in {wa}/3, >= AMBO {} in {wb}/3, >= DRL {} in {wc}/3",
            fmt_seeds(&mbo),
            fmt_seeds(&rdrl),
            fmt_seeds(&ambo),
            fmt_seeds(&drl)
        ),
    );
    report.record(
        5,
        "residual policy learning effect",
        rdrl_e.mean_reward >= drl.mean_reward,
        format!("RDRL-E {} vs DRL {}", fmt_seeds(&rdrl_e), fmt_seeds(&drl)),
    );
    let (l02, l10) = (critic_loss(&rdrl_02_rows), critic_loss(&rdrl_e_rows));
    report.record(
        6,
        "reduced action space critic loss",
        l02 < l10,
        format!("lambda 0.2 {l02:.3e} vs lambda 1.0 {l10:.3e}"),
    );
    let stage1 = window_stats(&rows_of_stage(&boost_rows, 1), WINDOW).unwrap();
    let stage2 = window_stats(&rows_of_stage(&boost_rows, 2), WINDOW).unwrap();
    report.record(
        7,
        "boosting rescue",
        stage2.mean_reward > stage1.mean_reward,
        format!("stage 2 (0.2) {} vs stage 1 (0.1) {}", fmt_seeds(&stage2), fmt_seeds(&stage1)),
    );

    let (p, d) = gradient_suite();
    report.record(8, "gradient suite", p, d);
    let (p, d) = mechanical_invariants();
    report.record(9, "mechanical invariants", p, d);

    println!("acceptance finished in {:.0?}", clock.elapsed());
    let failed: Vec<&String> = report.lines.iter().filter(|l| !l.1).map(|l| &l.2).collect();
    assert!(failed.is_empty(), "failed criteria:\n{failed:#?}");
}
