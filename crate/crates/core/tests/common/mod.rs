//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod props;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use rdrl_core::env::{ActionBounds, RewardConfig};
use rdrl_core::grid::{Branch, Bus, BusKind, Device, NetworkCase};
use rdrl_core::mbo::evaluate_objective;
use rdrl_core::powerflow::InjectionSet;

/// Polar Newton-Raphson on the full bus admittance matrix. Returns complex
/// bus voltages.
pub fn newton_raphson(case: &NetworkCase, inj: &InjectionSet) -> Vec<Complex64> {
    let n = case.n_buses();
    let slack = case.slack();
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for b in &case.branches {
        let yb = Complex64::new(1.0, 0.0) / Complex64::new(b.r, b.x);
        y[b.from_bus][b.from_bus] += yb;
        y[b.to_bus][b.to_bus] += yb;
        y[b.from_bus][b.to_bus] -= yb;
        y[b.to_bus][b.from_bus] -= yb;
    }
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];

    for _ in 0..50 {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let ibus: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|k| y[i][k] * v[k]).sum())
            .collect();
        let s: Vec<Complex64> = (0..n).map(|i| v[i] * ibus[i].conj()).collect();
        let mut f = DVector::zeros(2 * m);
        for (r, &i) in pq.iter().enumerate() {
            f[r] = s[i].re - inj.p[i];
            f[m + r] = s[i].im - inj.q[i];
        }
        if f.amax() < 1e-11 {
            return v;
        }
        // dS/dVa and dS/dVm, dense.
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pq.iter().enumerate() {
                let unit = v[k] / vm[k];
                let mut ds_da = -Complex64::i() * v[i] * (y[i][k] * v[k]).conj();
                let mut ds_dm = v[i] * (y[i][k] * unit).conj();
                if i == k {
                    ds_da += Complex64::i() * v[i] * ibus[i].conj();
                    ds_dm += ibus[i].conj() * unit;
                }
                jac[(r, c)] = ds_da.re;
                jac[(r, m + c)] = ds_dm.re;
                jac[(m + r, c)] = ds_da.im;
                jac[(m + r, m + c)] = ds_dm.im;
            }
        }
        let dx = jac.lu().solve(&(-f)).expect("nonsingular jacobian");
        for (r, &i) in pq.iter().enumerate() {
            va[i] += dx[r];
            vm[i] += dx[m + r];
        }
    }
    panic!("newton-raphson did not converge");
}

/// Slack, then a chain of PQ buses with the given loads on identical
/// branches.
pub fn chain(r: f64, x: f64, loads: &[(f64, f64)]) -> NetworkCase {
    let mut buses = vec![Bus {
        id: 0,
        kind: BusKind::Slack,
        p_load: 0.0,
        q_load: 0.0,
    }];
    let mut branches = Vec::new();
    for (i, &(p, q)) in loads.iter().enumerate() {
        buses.push(Bus {
            id: i + 1,
            kind: BusKind::Pq,
            p_load: p,
            q_load: q,
        });
        branches.push(Branch {
            from_bus: i,
            to_bus: i + 1,
            r,
            x,
        });
    }
    NetworkCase::new("chain", buses, branches, Vec::new()).unwrap()
}

/// Small dispatch problems with one or two devices.
pub fn small_dispatch_cases() -> Vec<NetworkCase> {
    let svg = |bus, lo, hi| Device::svg(bus, lo, hi).unwrap();
    let ib = |bus| Device::ib_er(bus, 1.5, 2.5).unwrap();
    vec![
        chain(0.05, 0.08, &[(0.4, 0.3)])
            .with_devices(vec![svg(1, -1.0, 1.0)])
            .unwrap(),
        chain(0.02, 0.04, &[(0.3, 0.2), (0.5, 0.4)])
            .with_devices(vec![svg(1, 0.0, 2.0), ib(2)])
            .unwrap(),
        chain(0.03, 0.03, &[(0.2, 0.1), (0.2, 0.1), (0.6, 0.5)])
            .with_devices(vec![svg(3, 0.0, 2.0)])
            .unwrap(),
        // Heavy enough that the voltage penalty shapes the optimum.
        chain(0.04, 0.09, &[(0.6, 0.6), (0.6, 0.6)])
            .with_devices(vec![svg(1, 0.0, 0.4), svg(2, 0.0, 0.4)])
            .unwrap(),
    ]
}

/// Exhaustive search over the box at the given resolution.
pub fn grid_search(
    case: &NetworkCase,
    inj: &InjectionSet,
    bounds: &ActionBounds,
    reward: &RewardConfig,
    h: f64,
) -> (Vec<f64>, f64) {
    let axes: Vec<Vec<f64>> = bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(&l, &u)| {
            let k = ((u - l) / h).round() as usize;
            (0..=k).map(|i| l + (u - l) * i as f64 / k as f64).collect()
        })
        .collect();
    let model = rdrl_core::mbo::DispatchModel::new(case.clone()).unwrap();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut idx = vec![0usize; axes.len()];
    loop {
        let a: Vec<f64> = idx.iter().zip(&axes).map(|(&i, ax)| ax[i]).collect();
        let f = model.evaluate_objective(inj, &a, reward).unwrap();
        if f > best.1 {
            best = (a, f);
        }
        let mut d = 0;
        loop {
            if d == idx.len() {
                return best;
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

pub fn objective(case: &NetworkCase, inj: &InjectionSet, a: &[f64], reward: &RewardConfig) -> f64 {
    evaluate_objective(case, inj, a, reward).unwrap()
}

pub mod grad {
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use rdrl_core::neural::Mlp;
    use rdrl_core::sac::{actor_objective_and_grad, alpha_loss_and_grad, critic_loss_and_grad};

    pub const H: f64 = 1e-5;
    /// ReLU pre-activations closer than this to zero make a central
    /// difference straddle a kink; such draws are redrawn.
    const KINK_MARGIN: f64 = 1e-3;

    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }

    fn numeric(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut p = params.to_vec();
        (0..p.len())
            .map(|i| {
                let x = p[i];
                p[i] = x + H;
                let up = f(&p);
                p[i] = x - H;
                let down = f(&p);
                p[i] = x;
                (up - down) / (2.0 * H)
            })
            .collect()
    }

    /// Smallest |hidden pre-activation| over a batch.
    pub fn kink_distance(net: &Mlp, x: &Array2<f64>) -> f64 {
        let mut h = x.clone();
        let mut margin = f64::INFINITY;
        for l in 0..net.n_layers() - 1 {
            let (w, b) = net.layer(l);
            let z = h.dot(&w) + &b;
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            h = z.mapv(|v| v.max(0.0));
        }
        margin
    }

    fn random_net(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Mlp {
        let hidden: Vec<usize> = (0..rng.random_range(1..=2))
            .map(|_| rng.random_range(2..=8))
            .collect();
        let mut sizes = vec![n_in];
        sizes.extend(hidden);
        sizes.push(n_out);
        Mlp::new(&sizes, rng).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.5..1.5))
    }

    /// Network backward pass against differences of `sum(output * weights)`.
    pub fn mlp_case(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let (n_in, n_out) = (rng.random_range(1..=5), rng.random_range(1..=3));
            let net = random_net(&mut rng, n_in, n_out);
            let rows = rng.random_range(1..=4);
            let x = random_rows(&mut rng, rows, n_in);
            if kink_distance(&net, &x) < KINK_MARGIN {
                continue;
            }
            let wout = random_rows(&mut rng, x.nrows(), n_out);
            let (_, cache) = net.forward_batch(x.view()).unwrap();
            let g = net.backward(&cache, wout.view());
            let sizes = net.sizes().to_vec();
            let num_p = numeric(net.params(), |p| {
                let n = Mlp::from_params(&sizes, p.to_vec()).unwrap();
                (n.predict(x.view()).unwrap() * &wout).sum()
            });
            let num_x = numeric(x.as_slice().unwrap(), |xv| {
                let xa = Array2::from_shape_vec(x.raw_dim(), xv.to_vec()).unwrap();
                (net.predict(xa.view()).unwrap() * &wout).sum()
            });
            return max_rel(&g.params, &num_p).max(max_rel(&g.input.iter().copied().collect::<Vec<_>>(), &num_x));
        }
    }

    pub fn critic_case(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let n_in = rng.random_range(2..=7);
            let net = random_net(&mut rng, n_in, 1);
            let rows = rng.random_range(1..=6);
            let x = random_rows(&mut rng, rows, n_in);
            if kink_distance(&net, &x) < KINK_MARGIN {
                continue;
            }
            let targets: Vec<f64> = (0..x.nrows()).map(|_| rng.random_range(-2.0..0.0)).collect();
            let (_, g) = critic_loss_and_grad(&net, x.view(), &targets).unwrap();
            let sizes = net.sizes().to_vec();
            let num = numeric(net.params(), |p| {
                let n = Mlp::from_params(&sizes, p.to_vec()).unwrap();
                critic_loss_and_grad(&n, x.view(), &targets).unwrap().0
            });
            return max_rel(&g, &num);
        }
    }

    /// Actor gradient through the reparameterized sample and both critics.
    pub fn actor_case(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let s_dim = rng.random_range(1..=4);
            let a_dim = rng.random_range(1..=3);
            let actor = random_net(&mut rng, s_dim, 2 * a_dim);
            let q_p = random_net(&mut rng, s_dim + a_dim, 1);
            let q_v = random_net(&mut rng, s_dim + a_dim, 1);
            let alpha = rng.random_range(0.0..0.5);
            let weight = rng.random_range(0.0..60.0);
            let rows = rng.random_range(1..=4);
            let x = random_rows(&mut rng, rows, s_dim);
            let noise = Array2::from_shape_simple_fn((rows, a_dim), || rng.sample(StandardNormal));
            let out = actor_objective_and_grad(&actor, &q_p, &q_v, weight, alpha, x.view(), noise.view())
                .unwrap();
            // Reconstruct the critic inputs to screen for kinks there too.
            let head = actor.predict(x.view()).unwrap();
            let mut cin = Array2::zeros((rows, s_dim + a_dim));
            for i in 0..rows {
                for j in 0..s_dim {
                    cin[[i, j]] = x[[i, j]];
                }
                for j in 0..a_dim {
                    let u = head[[i, j]] + head[[i, a_dim + j]].exp() * noise[[i, j]];
                    cin[[i, s_dim + j]] = u.tanh();
                }
            }
            if kink_distance(&actor, &x) < KINK_MARGIN
                || kink_distance(&q_p, &cin) < KINK_MARGIN
                || kink_distance(&q_v, &cin) < KINK_MARGIN
            {
                continue;
            }
            let sizes = actor.sizes().to_vec();
            let num = numeric(actor.params(), |p| {
                let a = Mlp::from_params(&sizes, p.to_vec()).unwrap();
                actor_objective_and_grad(&a, &q_p, &q_v, weight, alpha, x.view(), noise.view())
                    .unwrap()
                    .objective
            });
            return max_rel(&out.grad, &num);
        }
    }

    pub fn alpha_case(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_alpha = rng.random_range(-5.0..1.0);
        let lp = rng.random_range(-6.0..3.0);
        let target = -(rng.random_range(1..=8) as f64);
        let (_, g) = alpha_loss_and_grad(log_alpha, lp, target);
        let num = numeric(&[log_alpha], |p| alpha_loss_and_grad(p[0], lp, target).0);
        rel_err(g, num[0])
    }
}
