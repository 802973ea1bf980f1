mod common;

use common::{grid_search, newton_raphson, objective, small_dispatch_cases};
use rdrl_core::env::{action_bounds, build_scenarios, scenario_injections, RewardConfig};
use rdrl_core::grid::CaseName;
use rdrl_core::mbo::{optimize, MboConfig};
use rdrl_core::powerflow::{solve, InjectionSet, RadialSolver};

#[test]
fn sweep_matches_newton_raphson_on_every_feeder() {
    for name in [CaseName::Case33, CaseName::Case69, CaseName::Case118] {
        let case = name.load();
        let inj = InjectionSet::from_loads(&case);
        let sol = solve(&case, &inj).unwrap();
        assert!(sol.converged);
        let v_ref = newton_raphson(&case, &inj);
        let v = sol.voltages();
        let dv = v.iter().zip(&v_ref).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(dv < 1e-7, "{}: voltage gap {dv}", name.as_str());
        let loss_ref = RadialSolver::new(&case).unwrap().branch_losses(&v_ref);
        assert!((sol.total_loss - loss_ref).abs() < 1e-6, "{}", name.as_str());
    }
}

#[test]
fn injections_balance_branch_losses() {
    for name in [CaseName::Case33, CaseName::Case69, CaseName::Case118] {
        let case = name.with_devices();
        let solver = RadialSolver::new(&case).unwrap();
        let inj = InjectionSet::from_loads(&case);
        let sol = solver.solve(&inj).unwrap();
        assert!(solver.mismatch(&inj, &sol).unwrap() < 1e-8);
        let loss = solver.branch_losses(&sol.voltages());
        assert!((sol.p_inj.iter().sum::<f64>() - loss).abs() < 1e-8);
    }
}

#[test]
fn dispatch_matches_grid_search() {
    let reward = RewardConfig::default();
    for case in small_dispatch_cases() {
        let inj = InjectionSet::from_loads(&case);
        let bounds = action_bounds(&case);
        let res = optimize(&case, &inj, &bounds, &MboConfig::default()).unwrap();
        let (a_grid, f_grid) = grid_search(&case, &inj, &bounds, &reward, 1e-2);
        let da = res
            .a_m
            .iter()
            .zip(&a_grid)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(da < 2e-2, "action {:?} vs grid {:?}", res.a_m, a_grid);
        assert!(
            res.objective > f_grid - 1e-4,
            "objective {} vs grid {}",
            res.objective,
            f_grid
        );
    }
}

#[test]
fn single_svg_matches_fine_grid() {
    let case = small_dispatch_cases().remove(0);
    let inj = InjectionSet::from_loads(&case);
    let bounds = action_bounds(&case);
    let reward = RewardConfig::default();
    let res = optimize(&case, &inj, &bounds, &MboConfig::default()).unwrap();
    let (a_grid, f_grid) = grid_search(&case, &inj, &bounds, &reward, 1e-3);
    assert!((res.a_m[0] - a_grid[0]).abs() < 1e-3, "{:?} {:?}", res.a_m, a_grid);
    assert!(f_grid >= objective(&case, &inj, &[0.0], &reward));
}

#[test]
fn accurate_model_beats_perturbed_model() {
    let case = CaseName::Case33.with_devices();
    let wrong = case.perturb_impedances(1.5).unwrap();
    let profile = build_scenarios(3, 1).unwrap();
    let bounds = action_bounds(&case);
    let reward = RewardConfig::default();
    let cfg = MboConfig::default();
    for step in [12, 40, 76] {
        let inj = scenario_injections(&case, &profile, 0, step);
        let good = optimize(&case, &inj, &bounds, &cfg).unwrap();
        let bad = optimize(&wrong, &inj, &bounds, &cfg).unwrap();
        let f_good = objective(&case, &inj, &good.a_m, &reward);
        let f_bad = objective(&case, &inj, &bad.a_m, &reward);
        assert!(f_good >= f_bad, "step {step}: {f_good} < {f_bad}");
    }
}

#[test]
fn unit_perturbation_is_the_accurate_model() {
    let case = CaseName::Case33.with_devices();
    let same = case.perturb_impedances(1.0).unwrap();
    let profile = build_scenarios(5, 1).unwrap();
    let inj = scenario_injections(&case, &profile, 0, 50);
    let bounds = action_bounds(&case);
    let a = optimize(&case, &inj, &bounds, &MboConfig::default()).unwrap();
    let b = optimize(&same, &inj, &bounds, &MboConfig::default()).unwrap();
    assert_eq!(a, b);
}
