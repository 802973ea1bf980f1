//! Two-critic single-period soft actor-critic.
//!
//! Each critic regresses one reward component on `(s, a_m, a_r_pre)`; there
//! is no bootstrapped target, so `s_next` is stored but never read. The
//! actor maps `(s, a_m)` to a tanh-squashed Gaussian over the residual
//! pre-action and is trained on `Q_p + Q_v - alpha * log pi`.

use std::collections::VecDeque;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    deterministic_action, sample_squashed_gaussian, squashed_gaussian_backward, Adam, Mlp,
    MlpCheckpoint, LOG_STD_MAX, LOG_STD_MIN,
};

pub const DEFAULT_CAPACITY: usize = 30_000;
/// Final actor layer starts uniform in `±ACTOR_INIT_BOUND`.
pub const ACTOR_INIT_BOUND: f64 = 1e-3;
const AGENT_FORMAT: &str = "rdrl-agent";
const POLICY_FORMAT: &str = "rdrl-policy";
const CHECKPOINT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub batch: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
    pub updates_per_step: usize,
    pub t_start: usize,
    /// Defaults to minus the action dimension.
    pub entropy_target: Option<f64>,
    pub alpha_init: f64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    /// Weight of the voltage critic in the actor objective; matches the
    /// environment's penalty so the actor maximizes `r_p + c_v * r_v`.
    pub violation_weight: f64,
    /// Initial log standard deviation of the exploration noise.
    pub init_log_std: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            batch: 128,
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            alpha_lr: 3e-4,
            updates_per_step: 4,
            t_start: 960,
            entropy_target: None,
            alpha_init: 0.2,
            hidden: vec![256, 256],
            buffer_capacity: DEFAULT_CAPACITY,
            violation_weight: crate::env::DEFAULT_PENALTY,
            init_log_std: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.critic_lr, self.actor_lr, self.alpha_lr, self.alpha_init];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("non-positive rate in {self:?}")));
        }
        if !(self.violation_weight >= 0.0 && self.violation_weight.is_finite()) {
            return Err(Error::Config("violation weight must be finite and >= 0".into()));
        }
        if self.batch == 0 || self.updates_per_step == 0 || self.buffer_capacity < self.batch {
            return Err(Error::Config(format!("bad batch/buffer sizes in {self:?}")));
        }
        if self.t_start < 5 * self.batch || self.t_start > 20 * self.batch {
            return Err(Error::Config(format!(
                "t_start {} must lie within 5..=20 batches of {}",
                self.t_start, self.batch
            )));
        }
        if self.hidden.iter().any(|&h| h == 0 || h > 512) {
            return Err(Error::Config(format!("hidden sizes {:?}", self.hidden)));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return Err(Error::Config(format!(
                "init_log_std {} outside [{LOG_STD_MIN}, {LOG_STD_MAX}]",
                self.init_log_std
            )));
        }
        if self.entropy_target.is_some_and(|h| !h.is_finite()) {
            return Err(Error::Config("non-finite entropy target".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a_m: Vec<f64>,
    pub a_r_pre: Vec<f64>,
    pub r_p: f64,
    pub r_v: f64,
    pub s_next: Vec<f64>,
}

impl Transition {
    fn check(&self) -> Result<()> {
        let finite = self
            .s
            .iter()
            .chain(&self.a_m)
            .chain(&self.a_r_pre)
            .chain(&self.s_next)
            .chain([&self.r_p, &self.r_v])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("non-finite transition field".into()));
        }
        if self.a_r_pre.iter().any(|a| a.abs() >= 1.0) {
            return Err(Error::Data(format!(
                "pre-action {:?} outside (-1, 1)",
                self.a_r_pre
            )));
        }
        Ok(())
    }
}

/// FIFO ring with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn store(&mut self, t: Transition) -> Result<()> {
        t.check()?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Running mean and standard deviation (Welford), frozen once learning
/// starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    pub frozen: bool,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Normalizer {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: false,
        }
    }

    pub fn observe(&mut self, x: &[f64]) {
        if self.frozen {
            return;
        }
        self.count += 1;
        let n = self.count as f64;
        for i in 0..self.mean.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Population standard deviation; dimensions that never varied get 1.
    pub fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|&m| {
                let sd = if self.count > 0 {
                    (m / self.count as f64).sqrt()
                } else {
                    0.0
                };
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let std = self.std();
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / std[i];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Mean squared error of `net` on `(inputs, targets)` and its parameter
/// gradient.
pub fn critic_loss_and_grad(
    net: &Mlp,
    inputs: ArrayView2<'_, f64>,
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (q, cache) = net.forward_batch(inputs)?;
    let b = targets.len() as f64;
    let mut loss = 0.0;
    let mut dq = Array2::zeros((targets.len(), 1));
    for (i, &t) in targets.iter().enumerate() {
        let e = q[[i, 0]] - t;
        loss += e * e / b;
        dq[[i, 0]] = 2.0 * e / b;
    }
    Ok((loss, net.backward(&cache, dq.view()).params))
}

/// Actor objective `mean(Q_p + w * Q_v - alpha * log pi)` under fixed noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorObjective {
    pub objective: f64,
    /// Gradient of the objective (ascent direction) w.r.t. actor parameters.
    pub grad: Vec<f64>,
    pub mean_log_prob: f64,
}

/// `states` holds normalized `(s, a_m)` rows; `noise` one standard-normal row
/// per state.
pub fn actor_objective_and_grad(
    actor: &Mlp,
    q_p: &Mlp,
    q_v: &Mlp,
    violation_weight: f64,
    alpha: f64,
    states: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
) -> Result<ActorObjective> {
    let n = states.nrows();
    let dim = noise.ncols();
    let bf = n as f64;
    let (head, cache) = actor.forward_batch(states)?;
    let mut critic_in = Array2::zeros((n, states.ncols() + dim));
    critic_in.slice_mut(s![.., ..states.ncols()]).assign(&states);
    let mut log_probs = Vec::with_capacity(n);
    for i in 0..n {
        let row = head.row(i);
        let row = row.as_slice().expect("contiguous rows");
        let sample = sample_squashed_gaussian(
            &row[..dim],
            &row[dim..],
            noise.row(i).as_slice().expect("contiguous rows"),
        );
        for j in 0..dim {
            critic_in[[i, states.ncols() + j]] = sample.pre_action[j];
        }
        log_probs.push(sample.log_prob);
    }
    let (vp, cp) = q_p.forward_batch(critic_in.view())?;
    let (vv, cv) = q_v.forward_batch(critic_in.view())?;
    let objective =
        (vp.sum() + violation_weight * vv.sum() - alpha * log_probs.iter().sum::<f64>()) / bf;

    let dp = q_p.backward(&cp, Array2::from_elem((n, 1), 1.0 / bf).view()).input;
    let dv = q_v
        .backward(&cv, Array2::from_elem((n, 1), violation_weight / bf).view())
        .input;
    let mut d_head = Array2::zeros((n, 2 * dim));
    for i in 0..n {
        let row = head.row(i);
        let row = row.as_slice().expect("contiguous rows");
        let d_action: Vec<f64> = (0..dim)
            .map(|j| dp[[i, states.ncols() + j]] + dv[[i, states.ncols() + j]])
            .collect();
        let (dm, dls) = squashed_gaussian_backward(
            &row[..dim],
            &row[dim..],
            noise.row(i).as_slice().expect("contiguous rows"),
            &d_action,
            -alpha / bf,
        );
        for j in 0..dim {
            d_head[[i, j]] = dm[j];
            d_head[[i, dim + j]] = dls[j];
        }
    }
    Ok(ActorObjective {
        objective,
        grad: actor.backward(&cache, d_head.view()).params,
        mean_log_prob: log_probs.iter().sum::<f64>() / bf,
    })
}

/// Temperature loss `mean(-alpha * (log pi + target))` and its derivative in
/// `log alpha`.
pub fn alpha_loss_and_grad(log_alpha: f64, mean_log_prob: f64, entropy_target: f64) -> (f64, f64) {
    let alpha = log_alpha.exp();
    let loss = -alpha * (mean_log_prob + entropy_target);
    (loss, loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss_p: f64,
    pub critic_loss_v: f64,
    pub actor_objective: f64,
    pub alpha: f64,
}

/// A trained actor plus the input statistics it was trained with; enough
/// to act deterministically as a frozen stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    actor: Mlp,
    norm: Normalizer,
    obs_dim: usize,
    act_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub actor: MlpCheckpoint,
    pub normalizer: Normalizer,
}

fn check_dims(s: &[f64], a_m: &[f64], obs_dim: usize, act_dim: usize) -> Result<()> {
    if s.len() != obs_dim {
        return Err(Error::Shape {
            expected: obs_dim,
            got: s.len(),
        });
    }
    if a_m.len() != act_dim {
        return Err(Error::Shape {
            expected: act_dim,
            got: a_m.len(),
        });
    }
    Ok(())
}

fn state_input(norm: &Normalizer, s: &[f64], a_m: &[f64]) -> Vec<f64> {
    let mut raw = Vec::with_capacity(s.len() + a_m.len());
    raw.extend_from_slice(s);
    raw.extend_from_slice(a_m);
    norm.apply(&raw)
}

impl PolicySnapshot {
    pub fn new(actor: Mlp, norm: Normalizer, obs_dim: usize, act_dim: usize) -> Result<Self> {
        let width = obs_dim + act_dim;
        if actor.input_dim() != width || actor.output_dim() != 2 * act_dim || norm.mean.len() != width
        {
            return Err(Error::Shape {
                expected: width,
                got: actor.input_dim(),
            });
        }
        Ok(PolicySnapshot {
            actor,
            norm,
            obs_dim,
            act_dim,
        })
    }

    pub fn act(&self, s: &[f64], a_m: &[f64]) -> Result<Vec<f64>> {
        check_dims(s, a_m, self.obs_dim, self.act_dim)?;
        let (head, _) = self.actor.forward(&state_input(&self.norm, s, a_m))?;
        Ok(deterministic_action(&head[..self.act_dim]))
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            actor: self.actor.to_checkpoint(),
            normalizer: self.norm.clone(),
        }
    }

    pub fn from_checkpoint(ck: &PolicyCheckpoint) -> Result<Self> {
        if ck.format != POLICY_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported policy checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let actor = Mlp::from_checkpoint(&ck.actor)?;
        let width = ck.obs_dim + ck.act_dim;
        if actor.input_dim() != width
            || actor.output_dim() != 2 * ck.act_dim
            || ck.normalizer.mean.len() != width
        {
            return Err(Error::Checkpoint("policy dimensions disagree".into()));
        }
        Ok(PolicySnapshot {
            actor,
            norm: ck.normalizer.clone(),
            obs_dim: ck.obs_dim,
            act_dim: ck.act_dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: AgentConfig,
    pub policy: PolicyCheckpoint,
    pub q_p: MlpCheckpoint,
    pub q_v: MlpCheckpoint,
    pub log_alpha: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    obs_dim: usize,
    act_dim: usize,
    entropy_target: f64,
    actor: Mlp,
    q_p: Mlp,
    q_v: Mlp,
    actor_opt: Adam,
    q_p_opt: Adam,
    q_v_opt: Adam,
    log_alpha: f64,
    alpha_opt: Adam,
    norm: Normalizer,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Agent {
    pub fn new(cfg: AgentConfig, obs_dim: usize, act_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("agent needs non-empty state and action".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = obs_dim + act_dim;
        let sizes = |n_in: usize, n_out: usize| {
            let mut v = vec![n_in];
            v.extend_from_slice(&cfg.hidden);
            v.push(n_out);
            v
        };
        let mut actor = Mlp::new(&sizes(width, 2 * act_dim), &mut rng)?;
        let last = actor.n_layers() - 1;
        actor.init_layer_uniform(last, ACTOR_INIT_BOUND, &mut rng);
        let n = actor.n_params();
        for b in &mut actor.params_mut()[n - act_dim..] {
            *b += cfg.init_log_std;
        }
        let q_p = Mlp::new(&sizes(width + act_dim, 1), &mut rng)?;
        let q_v = Mlp::new(&sizes(width + act_dim, 1), &mut rng)?;
        Ok(Agent {
            entropy_target: cfg.entropy_target.unwrap_or(-(act_dim as f64)),
            actor_opt: Adam::new(actor.n_params(), cfg.actor_lr),
            q_p_opt: Adam::new(q_p.n_params(), cfg.critic_lr),
            q_v_opt: Adam::new(q_v.n_params(), cfg.critic_lr),
            alpha_opt: Adam::new(1, cfg.alpha_lr),
            log_alpha: cfg.alpha_init.ln(),
            norm: Normalizer::new(width),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            actor,
            q_p,
            q_v,
            rng,
            steps: 0,
            obs_dim,
            act_dim,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn entropy_target(&self) -> f64 {
        self.entropy_target
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.q_p, &self.q_v)
    }

    pub fn critics_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.q_p, &mut self.q_v)
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.log_alpha = alpha.ln();
    }

    pub fn learning_started(&self) -> bool {
        self.steps >= self.cfg.t_start && self.buffer.len() >= self.cfg.batch
    }

    pub fn act(&mut self, s: &[f64], a_m: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        check_dims(s, a_m, self.obs_dim, self.act_dim)?;
        let (head, _) = self.actor.forward(&state_input(&self.norm, s, a_m))?;
        let (mean, log_std) = head.split_at(self.act_dim);
        Ok(match mode {
            ActMode::Deterministic => deterministic_action(mean),
            ActMode::Stochastic => {
                let noise: Vec<f64> = (0..self.act_dim)
                    .map(|_| self.rng.sample(StandardNormal))
                    .collect();
                sample_squashed_gaussian(mean, log_std, &noise).pre_action
            }
        })
    }

    /// Record one environment step. Input statistics track every stored
    /// state until learning starts, then freeze.
    pub fn store(&mut self, t: Transition) -> Result<()> {
        check_dims(&t.s, &t.a_m, self.obs_dim, self.act_dim)?;
        if t.a_r_pre.len() != self.act_dim {
            return Err(Error::Shape {
                expected: self.act_dim,
                got: t.a_r_pre.len(),
            });
        }
        let mut raw = t.s.clone();
        raw.extend_from_slice(&t.a_m);
        self.buffer.store(t)?;
        self.norm.observe(&raw);
        self.steps += 1;
        if self.steps >= self.cfg.t_start {
            self.norm.freeze();
        }
        Ok(())
    }

    fn state_rows(&self, batch: &[&Transition]) -> Array2<f64> {
        let width = self.obs_dim + self.act_dim;
        let mut x = Array2::zeros((batch.len(), width));
        let mut raw = vec![0.0; width];
        for (i, t) in batch.iter().enumerate() {
            raw[..self.obs_dim].copy_from_slice(&t.s);
            raw[self.obs_dim..].copy_from_slice(&t.a_m);
            let mut row = x.row_mut(i);
            self.norm
                .apply_into(&raw, row.as_slice_mut().expect("contiguous rows"));
        }
        x
    }

    /// Critic inputs `(norm(s, a_m), a_r_pre)`.
    pub fn critic_inputs(&self, batch: &[&Transition]) -> Array2<f64> {
        let states = self.state_rows(batch);
        let w = states.ncols();
        let mut x = Array2::zeros((batch.len(), w + self.act_dim));
        x.slice_mut(s![.., ..w]).assign(&states);
        for (i, t) in batch.iter().enumerate() {
            for (j, &a) in t.a_r_pre.iter().enumerate() {
                x[[i, w + j]] = a;
            }
        }
        x
    }

    pub fn update_critics(&mut self, batch: &[&Transition]) -> Result<(f64, f64)> {
        let x = self.critic_inputs(batch);
        let r_p: Vec<f64> = batch.iter().map(|t| t.r_p).collect();
        let r_v: Vec<f64> = batch.iter().map(|t| t.r_v).collect();
        let (lp, gp) = critic_loss_and_grad(&self.q_p, x.view(), &r_p)?;
        self.q_p_opt.step(self.q_p.params_mut(), &gp)?;
        let (lv, gv) = critic_loss_and_grad(&self.q_v, x.view(), &r_v)?;
        self.q_v_opt.step(self.q_v.params_mut(), &gv)?;
        Ok((lp, lv))
    }

    fn noise(&mut self, rows: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, self.act_dim), || self.rng.sample(StandardNormal))
    }

    /// One ascent step on the actor; returns the objective before the step.
    pub fn update_actor(&mut self, batch: &[&Transition]) -> Result<f64> {
        let x = self.state_rows(batch);
        let noise = self.noise(batch.len());
        let out = actor_objective_and_grad(
            &self.actor,
            &self.q_p,
            &self.q_v,
            self.cfg.violation_weight,
            self.alpha(),
            x.view(),
            noise.view(),
        )?;
        let descent: Vec<f64> = out.grad.iter().map(|g| -g).collect();
        self.actor_opt.step(self.actor.params_mut(), &descent)?;
        Ok(out.objective)
    }

    /// Mean log-probability of fresh policy samples at the batch states.
    pub fn mean_log_prob(&mut self, batch: &[&Transition]) -> Result<f64> {
        let x = self.state_rows(batch);
        let noise = self.noise(batch.len());
        let head = self.actor.predict(x.view())?;
        let d = self.act_dim;
        let mut total = 0.0;
        for i in 0..batch.len() {
            let row = head.row(i);
            let row = row.as_slice().expect("contiguous rows");
            let xi = noise.row(i);
            total += sample_squashed_gaussian(&row[..d], &row[d..], xi.as_slice().unwrap())
                .log_prob;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn update_alpha(&mut self, batch: &[&Transition]) -> Result<f64> {
        let lp = self.mean_log_prob(batch)?;
        let (_, g) = alpha_loss_and_grad(self.log_alpha, lp, self.entropy_target);
        let mut p = [self.log_alpha];
        self.alpha_opt.step(&mut p, &[g])?;
        self.log_alpha = p[0];
        Ok(self.alpha())
    }

    /// The configured number of updates if learning has started.
    pub fn train_step(&mut self) -> Result<Option<UpdateStats>> {
        if !self.learning_started() {
            return Ok(None);
        }
        let k = self.cfg.updates_per_step;
        let mut acc = UpdateStats {
            critic_loss_p: 0.0,
            critic_loss_v: 0.0,
            actor_objective: 0.0,
            alpha: 0.0,
        };
        for _ in 0..k {
            let owned: Vec<Transition> = self
                .buffer
                .sample(self.cfg.batch, &mut self.rng)
                .into_iter()
                .cloned()
                .collect();
            let batch: Vec<&Transition> = owned.iter().collect();
            let (lp, lv) = self.update_critics(&batch)?;
            acc.critic_loss_p += lp / k as f64;
            acc.critic_loss_v += lv / k as f64;
            acc.actor_objective += self.update_actor(&batch)? / k as f64;
            self.update_alpha(&batch)?;
        }
        acc.alpha = self.alpha();
        Ok(Some(acc))
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            actor: self.actor.clone(),
            norm: self.norm.clone(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
        }
    }

    pub fn to_checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            format: AGENT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            policy: self.snapshot().to_checkpoint(),
            q_p: self.q_p.to_checkpoint(),
            q_v: self.q_v.to_checkpoint(),
            log_alpha: self.log_alpha,
            steps: self.steps,
        }
    }

    /// Restore networks, temperature and statistics. Optimizer moments and
    /// the replay buffer start empty; `seed` drives further sampling.
    pub fn from_checkpoint(ck: &AgentCheckpoint, seed: u64) -> Result<Self> {
        if ck.format != AGENT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported agent checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let policy = PolicySnapshot::from_checkpoint(&ck.policy)?;
        let mut agent = Agent::new(ck.config.clone(), policy.obs_dim, policy.act_dim, seed)?;
        let q_p = Mlp::from_checkpoint(&ck.q_p)?;
        let q_v = Mlp::from_checkpoint(&ck.q_v)?;
        if q_p.sizes() != agent.q_p.sizes() || q_v.sizes() != agent.q_v.sizes() {
            return Err(Error::Checkpoint("critic shapes disagree with config".into()));
        }
        if policy.actor.sizes() != agent.actor.sizes() {
            return Err(Error::Checkpoint("actor shape disagrees with config".into()));
        }
        agent.actor = policy.actor;
        agent.norm = policy.norm;
        agent.q_p = q_p;
        agent.q_v = q_v;
        agent.log_alpha = ck.log_alpha;
        agent.steps = ck.steps;
        Ok(agent)
    }
}
