//! Backward-forward sweep AC power flow for radial feeders.
//!
//! Constant-power loads, slack voltage fixed at 1.0∠0, flat start on every
//! solve. Convergence is judged on the complex power mismatch at PQ buses.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{NetworkCase, RadialOrder};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Net bus injections (generation minus load), p.u. Slack entries are zero;
/// the slack balances whatever is left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        InjectionSet {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Case loads as negative injections.
    pub fn from_loads(case: &NetworkCase) -> Self {
        InjectionSet {
            p: case.buses.iter().map(|b| -b.p_load).collect(),
            q: case.buses.iter().map(|b| -b.q_load).collect(),
        }
    }

    /// Add device reactive setpoints at their buses.
    pub fn with_device_q(&self, case: &NetworkCase, q_g: &[f64]) -> Result<Self> {
        if q_g.len() != case.devices.len() {
            return Err(Error::Shape {
                expected: case.devices.len(),
                got: q_g.len(),
            });
        }
        let mut out = self.clone();
        for (d, q) in case.devices.iter().zip(q_g) {
            out.q[d.bus] += q;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Net active injection implied by the solved voltages, slack included.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub total_loss: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.v_mag
            .iter()
            .zip(&self.v_ang)
            .map(|(&m, &a)| Complex64::from_polar(m, a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub slack_voltage: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            slack_voltage: 1.0,
        }
    }
}

/// Case topology compiled once for repeated solves.
#[derive(Debug, Clone)]
pub struct RadialSolver {
    order: RadialOrder,
    /// Series impedance per branch index.
    z: Vec<Complex64>,
    n: usize,
    opts: SweepOptions,
}

impl RadialSolver {
    pub fn new(case: &NetworkCase) -> Result<Self> {
        Self::with_options(case, SweepOptions::default())
    }

    pub fn with_options(case: &NetworkCase, opts: SweepOptions) -> Result<Self> {
        let order = case.radial_order()?;
        let z = case
            .branches
            .iter()
            .map(|b| Complex64::new(b.r, b.x))
            .collect();
        Ok(RadialSolver {
            order,
            z,
            n: case.n_buses(),
            opts,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> &RadialOrder {
        &self.order
    }

    fn check_len(&self, inj: &InjectionSet) -> Result<()> {
        if inj.p.len() != self.n || inj.q.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                got: inj.p.len().min(inj.q.len()),
            });
        }
        Ok(())
    }

    /// Current injected into the network at each bus implied by `v`.
    fn implied_currents(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut cur = vec![Complex64::new(0.0, 0.0); self.n];
        for e in &self.order.leaf_first {
            let j = (v[e.parent] - v[e.child]) / self.z[e.branch];
            cur[e.parent] += j;
            cur[e.child] -= j;
        }
        cur
    }

    fn max_mismatch(&self, inj: &InjectionSet, v: &[Complex64]) -> f64 {
        let cur = self.implied_currents(v);
        let root = self.order.root;
        (0..self.n)
            .filter(|&i| i != root)
            .map(|i| {
                let implied = v[i] * cur[i].conj();
                (Complex64::new(inj.p[i], inj.q[i]) - implied).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, inj: &InjectionSet) -> Result<PowerFlowSolution> {
        self.check_len(inj)?;
        let root = self.order.root;
        let v0 = Complex64::new(self.opts.slack_voltage, 0.0);
        let mut v = vec![v0; self.n];
        let mut branch_cur = vec![Complex64::new(0.0, 0.0); self.n];
        let mut converged = false;
        let mut iterations = 0;

        for it in 1..=self.opts.max_iter {
            iterations = it;
            // Backward: J(child) = sum of downstream branch currents minus the
            // current injected at the child.
            for c in branch_cur.iter_mut() {
                *c = Complex64::new(0.0, 0.0);
            }
            for e in &self.order.leaf_first {
                let s = Complex64::new(inj.p[e.child], inj.q[e.child]);
                let injected = (s / v[e.child]).conj();
                branch_cur[e.child] -= injected;
                let j = branch_cur[e.child];
                if e.parent != root {
                    branch_cur[e.parent] += j;
                }
            }
            // Forward: voltage drops from the root outwards.
            for e in self.order.root_first() {
                v[e.child] = v[e.parent] - self.z[e.branch] * branch_cur[e.child];
            }
            if v.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
                break;
            }
            if self.max_mismatch(inj, &v) < self.opts.tol {
                converged = true;
                break;
            }
        }

        let cur = self.implied_currents(&v);
        let s: Vec<Complex64> = v.iter().zip(&cur).map(|(vi, ii)| vi * ii.conj()).collect();
        let p_inj: Vec<f64> = s.iter().map(|x| x.re).collect();
        let q_inj: Vec<f64> = s.iter().map(|x| x.im).collect();
        Ok(PowerFlowSolution {
            v_mag: v.iter().map(|x| x.norm()).collect(),
            v_ang: v.iter().map(|x| x.arg()).collect(),
            total_loss: p_inj.iter().sum(),
            p_inj,
            q_inj,
            converged,
            iterations,
        })
    }

    pub fn mismatch(&self, inj: &InjectionSet, sol: &PowerFlowSolution) -> Result<f64> {
        self.check_len(inj)?;
        Ok(self.max_mismatch(inj, &sol.voltages()))
    }

    /// Sum of I²r over branches for the given voltages.
    pub fn branch_losses(&self, v: &[Complex64]) -> f64 {
        self.order
            .leaf_first
            .iter()
            .map(|e| {
                let j = (v[e.parent] - v[e.child]) / self.z[e.branch];
                j.norm_sqr() * self.z[e.branch].re
            })
            .sum()
    }
}

/// One-shot solve.
pub fn solve(case: &NetworkCase, inj: &InjectionSet) -> Result<PowerFlowSolution> {
    RadialSolver::new(case)?.solve(inj)
}

/// Largest complex power mismatch over PQ buses.
pub fn mismatch(case: &NetworkCase, inj: &InjectionSet, sol: &PowerFlowSolution) -> Result<f64> {
    RadialSolver::new(case)?.mismatch(inj, sol)
}
