//! Single-period Volt-Var control environment.
//!
//! Each step is one 15-minute snapshot of a daily profile. The agent sees
//! the feeder state measured with the previous setpoints held, picks new
//! reactive setpoints, and is rewarded for that same snapshot:
//! `r = r_p + c_v * r_v` with `r_p` the negative feeder loss and `r_v` the
//! negative summed voltage-band excursion.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DeviceKind, NetworkCase};
use crate::powerflow::{InjectionSet, PowerFlowSolution, RadialSolver};

pub const STEPS_PER_DAY: usize = 96;
/// Half-width of the uniform multiplicative noise on both curves.
pub const DEFAULT_NOISE_WIDTH: f64 = 0.2;
pub const DEFAULT_PENALTY: f64 = 50.0;

const PROFILE_HEADER: &str = "# rdrl-scenario v1";

/// Tabulated daily base curves (load double peak, daytime generation bell).
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCurves {
    pub load: Vec<f64>,
    pub gen: Vec<f64>,
}

impl BaseCurves {
    pub fn bundled() -> Self {
        let text = include_str!("../data/base_curve.csv");
        let mut load = Vec::with_capacity(STEPS_PER_DAY);
        let mut gen = Vec::with_capacity(STEPS_PER_DAY);
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse().expect("bundled curve is numeric"))
                .collect();
            load.push(cols[1]);
            gen.push(cols[2]);
        }
        assert_eq!(load.len(), STEPS_PER_DAY);
        BaseCurves { load, gen }
    }
}

/// Per-step load and generation multipliers for a run of days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioProfile {
    pub steps_per_day: usize,
    pub n_days: usize,
    pub load_mult: Vec<Vec<f64>>,
    pub gen_mult: Vec<Vec<f64>>,
    pub seed: u64,
    pub noise_width: f64,
}

pub fn build_scenarios(seed: u64, n_days: usize) -> Result<ScenarioProfile> {
    build_scenarios_with_noise(seed, n_days, DEFAULT_NOISE_WIDTH)
}

pub fn build_scenarios_with_noise(
    seed: u64,
    n_days: usize,
    noise_width: f64,
) -> Result<ScenarioProfile> {
    if n_days == 0 {
        return Err(Error::Config("n_days must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&noise_width) {
        return Err(Error::Config(format!(
            "noise width must lie in [0, 1), got {noise_width}"
        )));
    }
    let base = BaseCurves::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut load_mult = Vec::with_capacity(n_days);
    let mut gen_mult = Vec::with_capacity(n_days);
    for _ in 0..n_days {
        let mut l = Vec::with_capacity(STEPS_PER_DAY);
        let mut g = Vec::with_capacity(STEPS_PER_DAY);
        for t in 0..STEPS_PER_DAY {
            let ul: f64 = rng.random_range(-1.0..1.0);
            let ug: f64 = rng.random_range(-1.0..1.0);
            if noise_width == 0.0 {
                l.push(base.load[t]);
                g.push(base.gen[t]);
            } else {
                l.push(base.load[t] * (1.0 + noise_width * ul));
                g.push(base.gen[t] * (1.0 + noise_width * ug));
            }
        }
        load_mult.push(l);
        gen_mult.push(g);
    }
    Ok(ScenarioProfile {
        steps_per_day: STEPS_PER_DAY,
        n_days,
        load_mult,
        gen_mult,
        seed,
        noise_width,
    })
}

impl ScenarioProfile {
    pub fn total_steps(&self) -> usize {
        self.n_days * self.steps_per_day
    }

    /// Write as `day,step,load_mult,gen_mult` rows with a version line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(
            f,
            "{PROFILE_HEADER} seed={} noise_width={} steps_per_day={}",
            self.seed, self.noise_width, self.steps_per_day
        )
        .map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["day", "step", "load_mult", "gen_mult"])?;
        for d in 0..self.n_days {
            for t in 0..self.steps_per_day {
                w.write_record([
                    d.to_string(),
                    t.to_string(),
                    self.load_mult[d][t].to_string(),
                    self.gen_mult[d][t].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (first, rest) = text
            .split_once('\n')
            .ok_or_else(|| Error::Data(format!("{}: empty profile", path.display())))?;
        let meta = first
            .strip_prefix(PROFILE_HEADER)
            .ok_or_else(|| Error::Data(format!("{}: missing version line", path.display())))?;
        let mut seed = 0;
        let mut noise_width = 0.0;
        let mut steps_per_day = STEPS_PER_DAY;
        for kv in meta.split_whitespace() {
            let bad = || Error::Data(format!("bad profile metadata {kv:?}"));
            match kv.split_once('=') {
                Some(("seed", v)) => seed = v.parse().map_err(|_| bad())?,
                Some(("noise_width", v)) => noise_width = v.parse().map_err(|_| bad())?,
                Some(("steps_per_day", v)) => steps_per_day = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        let mut rdr = csv::Reader::from_reader(rest.as_bytes());
        let mut load_mult: Vec<Vec<f64>> = Vec::new();
        let mut gen_mult: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad profile row {rec:?}")))
            };
            let (d, t) = (field(0)? as usize, field(1)? as usize);
            if d == load_mult.len() {
                load_mult.push(Vec::with_capacity(steps_per_day));
                gen_mult.push(Vec::with_capacity(steps_per_day));
            }
            if d + 1 != load_mult.len() || t != load_mult[d].len() {
                return Err(Error::Data(format!("profile rows out of order at {d},{t}")));
            }
            load_mult[d].push(field(2)?);
            gen_mult[d].push(field(3)?);
        }
        if load_mult.is_empty() || load_mult.iter().any(|d| d.len() != steps_per_day) {
            return Err(Error::Data(format!("{}: incomplete profile", path.display())));
        }
        Ok(ScenarioProfile {
            steps_per_day,
            n_days: load_mult.len(),
            load_mult,
            gen_mult,
            seed,
            noise_width,
        })
    }

    /// SHA-256 of the canonical CSV encoding, hex.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("{} {} {}\n", self.seed, self.noise_width, self.steps_per_day));
        for (l, g) in self.load_mult.iter().zip(&self.gen_mult) {
            for (a, b) in l.iter().zip(g) {
                h.update(a.to_bits().to_le_bytes());
                h.update(b.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub lower: f64,
    pub upper: f64,
}

impl Default for VoltageLimits {
    fn default() -> Self {
        VoltageLimits {
            lower: 0.95,
            upper: 1.05,
        }
    }
}

impl VoltageLimits {
    /// Summed excursion outside the band, >= 0.
    pub fn violation(&self, v: &[f64]) -> f64 {
        v.iter()
            .map(|&x| (x - self.upper).max(0.0) + (self.lower - x).max(0.0))
            .sum()
    }
}

/// Reward shaping shared by the environment and the model-based optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub c_v: f64,
    pub limits: VoltageLimits,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            c_v: DEFAULT_PENALTY,
            limits: VoltageLimits::default(),
        }
    }
}

impl RewardConfig {
    /// `(r_p, r_v)` for a converged solution.
    pub fn parts(&self, sol: &PowerFlowSolution) -> (f64, f64) {
        (-sol.total_loss, -self.limits.violation(&sol.v_mag))
    }

    pub fn combine(&self, r_p: f64, r_v: f64) -> f64 {
        r_p + self.c_v * r_v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Shape {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Config("action bounds need lower < upper".into()));
        }
        Ok(ActionBounds { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clip(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&l, &u))| x.max(l).min(u))
            .collect()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim()
            && a
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| l <= x && x <= u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }
}

/// Reactive boxes of the attached devices.
pub fn action_bounds(case: &NetworkCase) -> ActionBounds {
    let (lower, upper) = case
        .devices
        .iter()
        .map(|d| match d.kind {
            DeviceKind::IbEr => {
                let q = (d.s_rated * d.s_rated - d.p_rated * d.p_rated).sqrt();
                (-q, q)
            }
            DeviceKind::Svg => (d.q_min, d.q_max),
        })
        .unzip();
    ActionBounds { lower, upper }
}

/// Uncontrolled injections of a case at one scenario snapshot.
pub fn scenario_injections(
    case: &NetworkCase,
    profile: &ScenarioProfile,
    day: usize,
    step: usize,
) -> InjectionSet {
    let lm = profile.load_mult[day][step];
    let gm = profile.gen_mult[day][step];
    let mut inj = InjectionSet {
        p: case.buses.iter().map(|b| -b.p_load * lm).collect(),
        q: case.buses.iter().map(|b| -b.q_load * lm).collect(),
    };
    for d in &case.devices {
        if d.kind == DeviceKind::IbEr {
            inj.p[d.bus] += d.p_rated * gm;
        }
    }
    inj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub q_g: Vec<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.p.len() + self.q.len() + self.v.len() + self.q_g.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(&self.p);
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.q_g);
        out
    }

    fn from_solution(sol: &PowerFlowSolution, q_g: &[f64]) -> Self {
        Observation {
            p: sol.p_inj.clone(),
            q: sol.q_inj.clone(),
            v: sol.v_mag.clone(),
            q_g: q_g.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub r_p: f64,
    pub r_v: f64,
    pub r: f64,
    pub next_obs: Observation,
    pub executed_action: Vec<f64>,
    /// The profile is exhausted; `next_obs` repeats the final snapshot.
    pub done: bool,
}

impl StepResult {
    pub fn power_loss(&self) -> f64 {
        -self.r_p
    }

    pub fn violation(&self) -> f64 {
        -self.r_v
    }
}

/// Outcome of applying one action to one snapshot, without moving the
/// environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub solution: PowerFlowSolution,
    pub r_p: f64,
    pub r_v: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct VvcEnv {
    case: Arc<NetworkCase>,
    solver: Arc<RadialSolver>,
    profile: Arc<ScenarioProfile>,
    bounds: ActionBounds,
    reward: RewardConfig,
    day: usize,
    step: usize,
    held: Vec<f64>,
}

impl VvcEnv {
    pub fn new(
        case: Arc<NetworkCase>,
        profile: Arc<ScenarioProfile>,
        reward: RewardConfig,
    ) -> Result<Self> {
        let solver = Arc::new(RadialSolver::new(&case)?);
        let bounds = action_bounds(&case);
        let held = vec![0.0; case.action_dim()];
        Ok(VvcEnv {
            case,
            solver,
            profile,
            bounds,
            reward,
            day: 0,
            step: 0,
            held,
        })
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    pub fn profile(&self) -> &Arc<ScenarioProfile> {
        &self.profile
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn position(&self) -> (usize, usize) {
        (self.day, self.step)
    }

    pub fn observation_dim(&self) -> usize {
        3 * self.case.n_buses() + self.case.action_dim()
    }

    pub fn injections(&self, day: usize, step: usize) -> InjectionSet {
        scenario_injections(&self.case, &self.profile, day, step)
    }

    fn check_position(&self, day: usize, step: usize) -> Result<()> {
        if day >= self.profile.n_days || step >= self.profile.steps_per_day {
            return Err(Error::Config(format!(
                "scenario position ({day}, {step}) outside {}x{} profile",
                self.profile.n_days, self.profile.steps_per_day
            )));
        }
        Ok(())
    }

    fn measure(&self, day: usize, step: usize, q_g: &[f64]) -> Result<PowerFlowSolution> {
        let inj = self.injections(day, step).with_device_q(&self.case, q_g)?;
        let sol = self.solver.solve(&inj)?;
        if !sol.converged {
            return Err(Error::EnvFault {
                day,
                step,
                action: q_g.to_vec(),
            });
        }
        Ok(sol)
    }

    /// Move to `(day, step)` with all device setpoints back at zero.
    pub fn reset(&mut self, day: usize, step: usize) -> Result<Observation> {
        self.check_position(day, step)?;
        self.day = day;
        self.step = step;
        self.held = vec![0.0; self.case.action_dim()];
        self.observe()
    }

    /// Observation at the current position with the held setpoints.
    pub fn observe(&self) -> Result<Observation> {
        let sol = self.measure(self.day, self.step, &self.held)?;
        Ok(Observation::from_solution(&sol, &self.held))
    }

    /// Reward of `action` (clipped) at an arbitrary snapshot.
    pub fn evaluate(&self, day: usize, step: usize, action: &[f64]) -> Result<Evaluation> {
        self.check_position(day, step)?;
        if action.len() != self.bounds.dim() {
            return Err(Error::Shape {
                expected: self.bounds.dim(),
                got: action.len(),
            });
        }
        let executed = self.bounds.clip(action);
        let solution = self.measure(day, step, &executed)?;
        let (r_p, r_v) = self.reward.parts(&solution);
        Ok(Evaluation {
            solution,
            r_p,
            r_v,
            r: self.reward.combine(r_p, r_v),
        })
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.bounds.dim() {
            return Err(Error::Shape {
                expected: self.bounds.dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Data(format!("non-finite action {action:?}")));
        }
        let executed = self.bounds.clip(action);
        let (day, step) = (self.day, self.step);
        let sol = self.measure(day, step, &executed)?;
        let (r_p, r_v) = self.reward.parts(&sol);
        let r = self.reward.combine(r_p, r_v);

        let (next_day, next_step, done) = if step + 1 < self.profile.steps_per_day {
            (day, step + 1, false)
        } else if day + 1 < self.profile.n_days {
            (day + 1, 0, false)
        } else {
            (day, step, true)
        };
        let next_sol = if done {
            sol
        } else {
            self.measure(next_day, next_step, &executed)?
        };
        self.day = next_day;
        self.step = next_step;
        self.held = executed.clone();
        Ok(StepResult {
            r_p,
            r_v,
            r,
            next_obs: Observation::from_solution(&next_sol, &executed),
            executed_action: executed,
            done,
        })
    }
}
