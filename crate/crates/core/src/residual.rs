//! Residual policies on top of a base dispatch, and boosting chains of
//! frozen residual stages.
//!
//! Stage `k` sees the running action `a_e^{k-1}` (the base action after all
//! earlier stages) and adds `a_r^k = delta_k * pre_action` with
//! `delta_k = lambda_k * (upper - lower) / 2`; the sum is clipped to the box
//! before the next stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{scenario_injections, ActionBounds, ScenarioProfile, VvcEnv};
use crate::error::{Error, Result};
use crate::grid::NetworkCase;
use crate::mbo::{DispatchModel, MboConfig};
use crate::sac::{ActMode, Agent, AgentConfig, PolicyCheckpoint, PolicySnapshot, Transition};

pub const MAX_STAGES: usize = 3;
const CHAIN_FORMAT: &str = "rdrl-chain";
const CHAIN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpace {
    pub lambda: f64,
    pub delta: Vec<f64>,
}

impl ResidualSpace {
    pub fn new(lambda: f64, bounds: &ActionBounds) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!("residual scale {lambda} outside (0, 1]")));
        }
        Ok(ResidualSpace {
            lambda,
            delta: bounds.half_width().iter().map(|h| lambda * h).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }
}

pub fn map_residual(space: &ResidualSpace, pre_action: &[f64]) -> Vec<f64> {
    space
        .delta
        .iter()
        .zip(pre_action)
        .map(|(d, p)| d * p)
        .collect()
}

/// Where stage zero's action comes from.
#[derive(Debug, Clone)]
pub enum BasePolicy {
    /// Per-step dispatch on a (possibly inaccurate) feeder model.
    Mbo {
        model: NetworkCase,
        perturb_factor: f64,
        cfg: MboConfig,
    },
    /// The same action every step.
    Constant(Vec<f64>),
}

impl BasePolicy {
    pub fn describe(&self) -> BaseRecord {
        match self {
            BasePolicy::Mbo {
                perturb_factor,
                cfg,
                ..
            } => BaseRecord::Mbo {
                perturb_factor: *perturb_factor,
                cfg: cfg.clone(),
            },
            BasePolicy::Constant(a) => BaseRecord::Constant { action: a.clone() },
        }
    }
}

/// Base actions for every `(day, step)` of a profile, computed once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseActions {
    pub steps_per_day: usize,
    pub n_days: usize,
    pub actions: Vec<Vec<f64>>,
}

impl BaseActions {
    pub fn compute(
        policy: &BasePolicy,
        bounds: &ActionBounds,
        profile: &ScenarioProfile,
        n_days: usize,
    ) -> Result<Self> {
        if n_days > profile.n_days {
            return Err(Error::Config(format!(
                "{n_days} days requested from a {}-day profile",
                profile.n_days
            )));
        }
        let spd = profile.steps_per_day;
        let mut actions = Vec::with_capacity(n_days * spd);
        match policy {
            BasePolicy::Constant(a) => {
                if a.len() != bounds.dim() {
                    return Err(Error::Shape {
                        expected: bounds.dim(),
                        got: a.len(),
                    });
                }
                actions.resize(n_days * spd, bounds.clip(a));
            }
            BasePolicy::Mbo { model, cfg, .. } => {
                let dm = DispatchModel::new(model.clone())?;
                for day in 0..n_days {
                    for step in 0..spd {
                        let inj = scenario_injections(model, profile, day, step);
                        actions.push(dm.optimize(&inj, bounds, cfg)?.a_m);
                    }
                }
            }
        }
        Ok(BaseActions {
            steps_per_day: spd,
            n_days,
            actions,
        })
    }

    pub fn get(&self, day: usize, step: usize) -> &[f64] {
        &self.actions[day * self.steps_per_day + step]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStage {
    pub index: usize,
    pub space: ResidualSpace,
    pub policy: PolicySnapshot,
}

/// Result of pushing one observation through the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    pub a_m: Vec<f64>,
    /// Residual added by each stage, in order.
    pub residuals: Vec<Vec<f64>>,
    /// Running action after each stage's clip.
    pub running: Vec<Vec<f64>>,
    pub a_exec: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyChain {
    pub base: Arc<BaseActions>,
    pub base_record: BaseRecord,
    pub stages: Vec<ChainStage>,
    pub bounds: ActionBounds,
}

impl PolicyChain {
    pub fn new(base: Arc<BaseActions>, base_record: BaseRecord, bounds: ActionBounds) -> Self {
        PolicyChain {
            base,
            base_record,
            stages: Vec::new(),
            bounds,
        }
    }

    pub fn push(&mut self, space: ResidualSpace, policy: PolicySnapshot) -> Result<()> {
        if self.stages.len() == MAX_STAGES {
            return Err(Error::Config(format!("chains are limited to {MAX_STAGES} stages")));
        }
        if space.dim() != self.bounds.dim() || policy.act_dim() != self.bounds.dim() {
            return Err(Error::Shape {
                expected: self.bounds.dim(),
                got: space.dim().min(policy.act_dim()),
            });
        }
        self.stages.push(ChainStage {
            index: self.stages.len() + 1,
            space,
            policy,
        });
        Ok(())
    }

    /// Frozen stages applied deterministically to the base action, then an
    /// optional extra residual (from a stage in training) on top.
    pub fn compose(
        &self,
        s: &[f64],
        a_m: &[f64],
        extra: Option<(&ResidualSpace, &[f64])>,
    ) -> Result<Composition> {
        let mut running = Vec::with_capacity(self.stages.len() + 1);
        let mut residuals = Vec::with_capacity(self.stages.len() + 1);
        let mut a = self.bounds.clip(a_m);
        for stage in &self.stages {
            let pre = stage.policy.act(s, &a)?;
            let r = map_residual(&stage.space, &pre);
            a = self.bounds.clip(&add(&a, &r));
            residuals.push(r);
            running.push(a.clone());
        }
        if let Some((space, pre)) = extra {
            let r = map_residual(space, pre);
            a = self.bounds.clip(&add(&a, &r));
            residuals.push(r);
            running.push(a.clone());
        }
        Ok(Composition {
            a_m: a_m.to_vec(),
            residuals,
            running,
            a_exec: a,
        })
    }

    /// Input action for a new stage on top of this chain.
    pub fn stage_input(&self, s: &[f64], day: usize, step: usize) -> Result<Vec<f64>> {
        Ok(self.compose(s, self.base.get(day, step), None)?.a_exec)
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

/// Daily sums of one phase of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub day: usize,
    pub phase: Phase,
    pub reward: f64,
    pub power_loss: f64,
    pub violation: f64,
    /// Mean over the day's updates; NaN when nothing was learned.
    pub critic_loss_p: f64,
    pub critic_loss_v: f64,
}

impl DayMetrics {
    fn empty(day: usize, phase: Phase) -> Self {
        DayMetrics {
            day,
            phase,
            reward: 0.0,
            power_loss: 0.0,
            violation: 0.0,
            critic_loss_p: f64::NAN,
            critic_loss_v: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub lambda: f64,
    pub n_days: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainedStage {
    pub stage: ChainStage,
    pub agent: Agent,
    pub metrics: Vec<DayMetrics>,
}

/// Deterministic pass of the whole chain (plus an optional policy for the
/// stage in training) over one day.
pub fn test_day(
    chain: &PolicyChain,
    env: &mut VvcEnv,
    day: usize,
    top: Option<(&ResidualSpace, &PolicySnapshot)>,
) -> Result<DayMetrics> {
    let mut m = DayMetrics::empty(day, Phase::Test);
    let mut obs = env.reset(day, 0)?.to_vec();
    for step in 0..env.profile().steps_per_day {
        let a_prev = chain.stage_input(&obs, day, step)?;
        let a = match top {
            Some((space, policy)) => {
                let pre = policy.act(&obs, &a_prev)?;
                chain.bounds.clip(&add(&a_prev, &map_residual(space, &pre)))
            }
            None => a_prev,
        };
        let res = env.step(&a)?;
        m.reward += res.r;
        m.power_loss += res.power_loss();
        m.violation += res.violation();
        obs = res.next_obs.to_vec();
    }
    Ok(m)
}

/// Run a day, keeping partial sums if the power flow fails mid-way.
fn guarded(day: usize, phase: Phase, run: impl FnOnce(&mut DayMetrics) -> Result<()>) -> Result<DayMetrics> {
    let mut m = DayMetrics::empty(day, phase);
    match run(&mut m) {
        Ok(()) => Ok(m),
        Err(e @ Error::EnvFault { .. }) => {
            log::warn!("{phase} day {day} aborted: {e}");
            Ok(m)
        }
        Err(e) => Err(e),
    }
}

/// Train a new residual stage on top of `chain` for `schedule.n_days` days,
/// testing the deterministic policy after each day.
pub fn train_stage(
    chain: &PolicyChain,
    env: &mut VvcEnv,
    agent_cfg: &AgentConfig,
    schedule: &StageSchedule,
) -> Result<TrainedStage> {
    if chain.stages.len() == MAX_STAGES {
        return Err(Error::Config(format!("chains are limited to {MAX_STAGES} stages")));
    }
    if schedule.n_days > chain.base.n_days {
        return Err(Error::Config(format!(
            "{} training days but only {} days of base actions",
            schedule.n_days, chain.base.n_days
        )));
    }
    let space = ResidualSpace::new(schedule.lambda, &chain.bounds)?;
    let mut agent = Agent::new(
        agent_cfg.clone(),
        env.observation_dim(),
        chain.bounds.dim(),
        schedule.seed,
    )?;
    let spd = env.profile().steps_per_day;
    let mut metrics = Vec::with_capacity(2 * schedule.n_days);

    for day in 0..schedule.n_days {
        let mut losses = (0.0, 0.0, 0usize);
        let mut train = guarded(day, Phase::Train, |m| {
            let mut obs = env.reset(day, 0)?.to_vec();
            for step in 0..spd {
                let a_prev = chain.stage_input(&obs, day, step)?;
                let pre = agent.act(&obs, &a_prev, ActMode::Stochastic)?;
                let a = chain.bounds.clip(&add(&a_prev, &map_residual(&space, &pre)));
                let res = env.step(&a)?;
                m.reward += res.r;
                m.power_loss += res.power_loss();
                m.violation += res.violation();
                let s_next = res.next_obs.to_vec();
                agent.store(Transition {
                    s: obs,
                    a_m: a_prev,
                    a_r_pre: pre,
                    r_p: res.r_p,
                    r_v: res.r_v,
                    s_next: s_next.clone(),
                })?;
                if let Some(u) = agent.train_step()? {
                    losses.0 += u.critic_loss_p;
                    losses.1 += u.critic_loss_v;
                    losses.2 += 1;
                }
                obs = s_next;
            }
            Ok(())
        })?;
        if losses.2 > 0 {
            train.critic_loss_p = losses.0 / losses.2 as f64;
            train.critic_loss_v = losses.1 / losses.2 as f64;
        }
        let snapshot = agent.snapshot();
        let test = guarded(day, Phase::Test, |m| {
            *m = test_day(chain, env, day, Some((&space, &snapshot)))?;
            Ok(())
        })?;
        log::debug!(
            "stage {} day {day}: train {:.4} test {:.4} alpha {:.4}",
            chain.stages.len() + 1,
            train.reward,
            test.reward,
            agent.alpha()
        );
        metrics.push(train);
        metrics.push(test);
    }

    Ok(TrainedStage {
        stage: ChainStage {
            index: chain.stages.len() + 1,
            space,
            policy: agent.snapshot(),
        },
        agent,
        metrics,
    })
}

/// Base-only daily metrics (train and test rows coincide).
pub fn base_only_metrics(chain: &PolicyChain, env: &mut VvcEnv, n_days: usize) -> Result<Vec<DayMetrics>> {
    let mut out = Vec::with_capacity(2 * n_days);
    for day in 0..n_days {
        let test = guarded(day, Phase::Test, |m| {
            *m = test_day(chain, env, day, None)?;
            Ok(())
        })?;
        let mut train = test.clone();
        train.phase = Phase::Train;
        out.push(train);
        out.push(test);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaseRecord {
    Mbo { perturb_factor: f64, cfg: MboConfig },
    Constant { action: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub lambda: f64,
    pub perturb_factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub format: String,
    pub version: u32,
    pub case_name: String,
    pub base: BaseRecord,
    pub stages: Vec<StageRecord>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl PolicyChain {
    /// Write each stage checkpoint and a manifest listing them into `dir`.
    pub fn save(&self, dir: &Path, case_name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let perturb = match &self.base_record {
            BaseRecord::Mbo { perturb_factor, .. } => Some(*perturb_factor),
            BaseRecord::Constant { .. } => None,
        };
        let mut stages = Vec::new();
        for stage in &self.stages {
            let name = PathBuf::from(format!("stage{}.json", stage.index));
            let path = dir.join(&name);
            // Existing stage files are left untouched so frozen bytes never
            // change.
            if !path.exists() {
                write_json(&path, &stage.policy.to_checkpoint())?;
            }
            stages.push(StageRecord {
                checkpoint: name,
                lambda: stage.space.lambda,
                perturb_factor: perturb,
            });
        }
        let manifest = ChainManifest {
            format: CHAIN_FORMAT.into(),
            version: CHAIN_VERSION,
            case_name: case_name.into(),
            base: self.base_record.clone(),
            stages,
        };
        let path = dir.join("chain.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Rebuild a chain from its manifest; base actions are supplied by the
    /// caller since they depend on the scenario profile.
    pub fn load(manifest_path: &Path, base: Arc<BaseActions>, bounds: ActionBounds) -> Result<Self> {
        let manifest: ChainManifest = read_json(manifest_path)?;
        if manifest.format != CHAIN_FORMAT || manifest.version != CHAIN_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported chain manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut chain = PolicyChain::new(base, manifest.base.clone(), bounds.clone());
        for rec in &manifest.stages {
            let ck: PolicyCheckpoint = read_json(&dir.join(&rec.checkpoint))?;
            chain.push(
                ResidualSpace::new(rec.lambda, &bounds)?,
                PolicySnapshot::from_checkpoint(&ck)?,
            )?;
        }
        Ok(chain)
    }
}
