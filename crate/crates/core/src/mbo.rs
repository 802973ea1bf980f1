//! Model-based reactive dispatch.
//!
//! Maximizes the same penalized reward the environment pays out,
//! `-loss - c_v * violation`, over the device box by projected-gradient
//! ascent. Gradients come from central finite differences on the power flow
//! of the supplied model, which may be the accurate feeder or a perturbed
//! one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionBounds, RewardConfig, VoltageLimits};
use crate::error::{Error, Result};
use crate::grid::NetworkCase;
use crate::powerflow::{InjectionSet, RadialSolver};

/// Armijo sufficient-increase constant.
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const MAX_STEP: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MboConfig {
    pub penalty: f64,
    pub limits: VoltageLimits,
    pub step_size: f64,
    pub backtrack: f64,
    pub max_iters: usize,
    pub grad_eps: f64,
    pub tol: f64,
    /// Starts: the (clipped) zero vector, then seeded uniform points.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MboConfig {
    fn default() -> Self {
        MboConfig {
            penalty: crate::env::DEFAULT_PENALTY,
            limits: VoltageLimits::default(),
            step_size: 0.5,
            backtrack: 0.5,
            max_iters: 200,
            grad_eps: 1e-4,
            tol: 1e-5,
            restarts: 3,
            seed: 0,
        }
    }
}

impl MboConfig {
    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            c_v: self.penalty,
            limits: self.limits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.penalty, self.step_size, self.grad_eps, self.tol];
        if positive.iter().any(|v| !(*v > 0.0))
            || !(self.backtrack > 0.0 && self.backtrack < 1.0)
            || self.max_iters == 0
            || self.restarts == 0
        {
            return Err(Error::Config(format!("invalid dispatch settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub a_m: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step of the winning start.
    #[serde(skip)]
    pub history: Vec<f64>,
}

/// A network model ready for repeated objective evaluations.
#[derive(Debug, Clone)]
pub struct DispatchModel {
    case: NetworkCase,
    solver: RadialSolver,
}

impl DispatchModel {
    pub fn new(case: NetworkCase) -> Result<Self> {
        let solver = RadialSolver::new(&case)?;
        Ok(DispatchModel { case, solver })
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    /// Penalized reward of `action` on this model; `-inf` if the flow
    /// diverges.
    pub fn evaluate_objective(
        &self,
        inj: &InjectionSet,
        action: &[f64],
        reward: &RewardConfig,
    ) -> Result<f64> {
        let full = inj.with_device_q(&self.case, action)?;
        let sol = self.solver.solve(&full)?;
        if !sol.converged {
            return Ok(f64::NEG_INFINITY);
        }
        let (r_p, r_v) = reward.parts(&sol);
        Ok(reward.combine(r_p, r_v))
    }

    pub fn optimize(
        &self,
        inj: &InjectionSet,
        bounds: &ActionBounds,
        cfg: &MboConfig,
    ) -> Result<DispatchResult> {
        cfg.validate()?;
        if bounds.dim() != self.case.action_dim() {
            return Err(Error::Shape {
                expected: self.case.action_dim(),
                got: bounds.dim(),
            });
        }
        let reward = cfg.reward();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut best: Option<DispatchResult> = None;
        for k in 0..cfg.restarts {
            let x0 = if k == 0 {
                bounds.clip(&vec![0.0; bounds.dim()])
            } else {
                bounds
                    .lower
                    .iter()
                    .zip(&bounds.upper)
                    .map(|(&l, &u)| rng.random_range(l..u))
                    .collect()
            };
            let Some(res) = self.ascend(inj, bounds, cfg, &reward, x0)? else {
                continue;
            };
            if best.as_ref().map_or(true, |b| res.objective > b.objective) {
                best = Some(res);
            }
        }
        best.ok_or_else(|| Error::Solver("power flow diverged from every start".into()))
    }

    fn ascend(
        &self,
        inj: &InjectionSet,
        bounds: &ActionBounds,
        cfg: &MboConfig,
        reward: &RewardConfig,
        mut x: Vec<f64>,
    ) -> Result<Option<DispatchResult>> {
        let f_at = |a: &[f64]| self.evaluate_objective(inj, a, reward);
        let mut f = f_at(&x)?;
        if !f.is_finite() {
            return Ok(None);
        }
        let n = x.len();
        let mut history = vec![f];
        let mut step = cfg.step_size;
        let mut converged = false;
        let mut iterations = 0;
        let mut probe = x.clone();
        let mut grad = vec![0.0; n];

        while iterations < cfg.max_iters {
            iterations += 1;
            for i in 0..n {
                probe.copy_from_slice(&x);
                probe[i] = x[i] + cfg.grad_eps;
                let up = f_at(&probe)?;
                probe[i] = x[i] - cfg.grad_eps;
                let down = f_at(&probe)?;
                grad[i] = (up - down) / (2.0 * cfg.grad_eps);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                break;
            }
            let stationarity = {
                let moved: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a + g).collect();
                let p = bounds.clip(&moved);
                p.iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            if stationarity < cfg.tol {
                converged = true;
                break;
            }

            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<f64> = bounds.clip(
                    &x.iter()
                        .zip(&grad)
                        .map(|(a, g)| a + step * g)
                        .collect::<Vec<_>>(),
                );
                let ascent: f64 = trial
                    .iter()
                    .zip(&x)
                    .zip(&grad)
                    .map(|((t, a), g)| g * (t - a))
                    .sum();
                let ft = f_at(&trial)?;
                if ft.is_finite() && ft >= f + ARMIJO * ascent {
                    x = trial;
                    f = ft;
                    history.push(f);
                    accepted = true;
                    break;
                }
                step *= cfg.backtrack;
            }
            if !accepted {
                // No representable ascent along the projected arc.
                converged = true;
                break;
            }
            step = (step / cfg.backtrack).min(MAX_STEP);
        }

        Ok(Some(DispatchResult {
            a_m: x,
            objective: f,
            iterations,
            converged,
            history,
        }))
    }
}

/// One-shot objective evaluation on `model`.
pub fn evaluate_objective(
    model: &NetworkCase,
    inj: &InjectionSet,
    action: &[f64],
    reward: &RewardConfig,
) -> Result<f64> {
    DispatchModel::new(model.clone())?.evaluate_objective(inj, action, reward)
}

/// One-shot dispatch on `model`.
pub fn optimize(
    model: &NetworkCase,
    inj: &InjectionSet,
    bounds: &ActionBounds,
    cfg: &MboConfig,
) -> Result<DispatchResult> {
    DispatchModel::new(model.clone())?.optimize(inj, bounds, cfg)
}
