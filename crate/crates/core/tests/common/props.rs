//! Property checks shared by the invariant suite and the acceptance run.

use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdrl_core::env::{action_bounds, build_scenarios_with_noise, ActionBounds, RewardConfig, VvcEnv};
use rdrl_core::grid::CaseName;
use rdrl_core::neural::Mlp;
use rdrl_core::residual::{
    map_residual, test_day, BaseActions, BasePolicy, DayMetrics, PolicyChain, ResidualSpace,
};
use rdrl_core::sac::{Normalizer, PolicySnapshot, ReplayBuffer, Transition};

pub type PropResult = Result<(), TestCaseError>;

/// Bounds of width > 0 with lower edges anywhere in [-3, 3].
pub fn bounds_strategy(max_dim: usize) -> impl Strategy<Value = ActionBounds> {
    prop::collection::vec((-3.0..3.0f64, 0.05..4.0f64), 1..=max_dim).prop_map(|v| {
        let lower: Vec<f64> = v.iter().map(|(l, _)| *l).collect();
        let upper: Vec<f64> = v.iter().map(|(l, w)| l + w).collect();
        ActionBounds::new(lower, upper).unwrap()
    })
}

/// Pre-actions strictly inside (-1, 1).
pub fn pre_action(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.999_999..0.999_999f64, dim)
}

pub fn residual_containment(bounds: &ActionBounds, lambda: f64, pre: &[f64]) -> PropResult {
    let space = ResidualSpace::new(lambda, bounds).unwrap();
    let half = bounds.half_width();
    let r = map_residual(&space, pre);
    for i in 0..r.len() {
        prop_assert!(r[i].abs() <= space.delta[i]);
        prop_assert!((space.delta[i] - lambda * half[i]).abs() <= 1e-12 * half[i].max(1.0));
    }
    Ok(())
}

/// A policy with random weights large enough to push actions to the edges.
pub fn random_policy(obs_dim: usize, act_dim: usize, scale: f64, seed: u64) -> PolicySnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actor = Mlp::new(&[obs_dim + act_dim, 8, 2 * act_dim], &mut rng).unwrap();
    for p in actor.params_mut() {
        *p *= scale;
    }
    PolicySnapshot::new(actor, Normalizer::new(obs_dim + act_dim), obs_dim, act_dim).unwrap()
}

fn zero_policy(obs_dim: usize, act_dim: usize) -> PolicySnapshot {
    let actor = Mlp::zeros(&[obs_dim + act_dim, 4, 2 * act_dim]).unwrap();
    PolicySnapshot::new(actor, Normalizer::new(obs_dim + act_dim), obs_dim, act_dim).unwrap()
}

fn constant_chain(bounds: &ActionBounds, a: Vec<f64>) -> PolicyChain {
    let profile = build_scenarios_with_noise(0, 1, 0.0).unwrap();
    let policy = BasePolicy::Constant(a);
    let base = BaseActions::compute(&policy, bounds, &profile, 1).unwrap();
    PolicyChain::new(Arc::new(base), policy.describe(), bounds.clone())
}

/// Every running sum of a random chain stays in the box, whatever the
/// stages output and wherever the base action lies.
pub fn stage_clip_feasibility(
    bounds: &ActionBounds,
    lambdas: &[f64],
    scale: f64,
    seed: u64,
    a_m: &[f64],
    s: &[f64],
) -> PropResult {
    let dim = bounds.dim();
    let mut chain = constant_chain(bounds, bounds.center());
    for (k, &l) in lambdas.iter().enumerate() {
        let space = ResidualSpace::new(l, bounds).unwrap();
        chain
            .push(space, random_policy(s.len(), dim, scale, seed + k as u64))
            .unwrap();
    }
    let extra_space = ResidualSpace::new(1.0, bounds).unwrap();
    let extra = vec![0.999; dim];
    let c = chain.compose(s, a_m, Some((&extra_space, &extra))).unwrap();
    prop_assert_eq!(c.running.len(), lambdas.len() + 1);
    for a in c.running.iter().chain([&c.a_exec]) {
        prop_assert!(bounds.contains(a), "{:?} outside {:?}", a, bounds);
    }
    for (r, stage) in c.residuals.iter().zip(&chain.stages) {
        for (ri, di) in r.iter().zip(&stage.space.delta) {
            prop_assert!(ri.abs() <= *di);
        }
    }
    Ok(())
}

fn transition(i: usize) -> Transition {
    Transition {
        s: vec![i as f64],
        a_m: vec![0.0],
        a_r_pre: vec![0.0],
        r_p: -(i as f64),
        r_v: 0.0,
        s_next: vec![i as f64 + 1.0],
    }
}

/// After `n` pushes the buffer holds exactly the newest `min(n, capacity)`
/// transitions, oldest first.
pub fn fifo(capacity: usize, n: usize) -> PropResult {
    let mut buf = ReplayBuffer::new(capacity);
    for i in 0..n {
        buf.store(transition(i)).unwrap();
        prop_assert_eq!(buf.len(), (i + 1).min(capacity));
    }
    let kept: Vec<f64> = buf.iter().map(|t| t.s[0]).collect();
    let expect: Vec<f64> = (n.saturating_sub(capacity)..n).map(|i| i as f64).collect();
    prop_assert_eq!(kept, expect);
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    for t in buf.sample(64, &mut rng) {
        prop_assert!(t.s[0] >= n.saturating_sub(capacity) as f64);
    }
    Ok(())
}

/// Same seed gives the same profile, and a shorter run is a prefix of a
/// longer one.
pub fn scenario_determinism(seed: u64, days: usize, extra: usize, width: f64) -> PropResult {
    let a = build_scenarios_with_noise(seed, days, width).unwrap();
    let b = build_scenarios_with_noise(seed, days, width).unwrap();
    prop_assert_eq!(&a, &b);
    prop_assert_eq!(a.content_hash(), b.content_hash());
    let long = build_scenarios_with_noise(seed, days + extra, width).unwrap();
    prop_assert_eq!(&long.load_mult[..days], &a.load_mult[..]);
    prop_assert_eq!(&long.gen_mult[..days], &a.gen_mult[..]);
    if width > 0.0 {
        let other = build_scenarios_with_noise(seed + 1, days, width).unwrap();
        prop_assert_ne!(&other.load_mult, &a.load_mult);
    }
    Ok(())
}

/// A chain whose stages all output zero reproduces the base policy's day.
pub fn zero_residual_day(base_action: Vec<f64>, lambdas: &[f64], day_seed: u64) -> PropResult {
    let case = Arc::new(CaseName::Case33.with_devices());
    let bounds = action_bounds(&case);
    let profile = Arc::new(build_scenarios_with_noise(day_seed, 1, 0.2).unwrap());
    let mut env = VvcEnv::new(case, profile.clone(), RewardConfig::default()).unwrap();
    let policy = BasePolicy::Constant(base_action);
    let base = Arc::new(BaseActions::compute(&policy, &bounds, &profile, 1).unwrap());
    let plain = PolicyChain::new(base.clone(), policy.describe(), bounds.clone());
    let mut zeroed = plain.clone();
    let obs_dim = env.observation_dim();
    for &l in lambdas {
        zeroed
            .push(ResidualSpace::new(l, &bounds).unwrap(), zero_policy(obs_dim, bounds.dim()))
            .unwrap();
    }
    let reference = test_day(&plain, &mut env, 0, None).unwrap();
    let top_space = ResidualSpace::new(0.5, &bounds).unwrap();
    let top = zero_policy(obs_dim, bounds.dim());
    let stacked = test_day(&zeroed, &mut env, 0, Some((&top_space, &top))).unwrap();
    prop_assert!(same_day(&reference, &stacked), "{:?} vs {:?}", reference, stacked);
    Ok(())
}

/// Bitwise equality of two days' sums; unset critic losses are NaN on both.
pub fn same_day(a: &DayMetrics, b: &DayMetrics) -> bool {
    let bits = |m: &DayMetrics| {
        [m.reward, m.power_loss, m.violation, m.critic_loss_p, m.critic_loss_v].map(f64::to_bits)
    };
    a.day == b.day && a.phase == b.phase && bits(a) == bits(b)
}

/// Run `check` through a proptest runner; `Err` carries the minimal failure.
pub fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> PropResult,
) -> Result<(), String> {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}
