//! Experiment runs, result files and cross-run comparison.
//!
//! A run directory holds `manifest.json` (config, config hash, status,
//! checkpoint hashes), `metrics.csv` (one row per seed, stage, day and
//! phase) and, for learning methods, one `seed_<n>/` chain per seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{
    action_bounds, build_scenarios_with_noise, RewardConfig, ScenarioProfile, VvcEnv,
    DEFAULT_NOISE_WIDTH, DEFAULT_PENALTY,
};
use crate::error::{Error, Result};
use crate::grid::CaseName;
use crate::mbo::MboConfig;
use crate::residual::{
    base_only_metrics, read_json, train_stage, write_json, BaseActions, BasePolicy, DayMetrics,
    Phase, PolicyChain, StageSchedule, MAX_STAGES,
};
use crate::sac::AgentConfig;

pub const METRICS_HEADER: &str = "# rdrl-metrics v1";
pub const DEFAULT_WINDOW: usize = 50;
pub const FULL_SCHEDULE_DAYS: usize = 300;
const MANIFEST_FORMAT: &str = "rdrl-run";
const MANIFEST_VERSION: u32 = 1;
/// Offset between the agent seeds of consecutive boosting stages.
const STAGE_SEED_STRIDE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mbo,
    Ambo,
    Drl,
    Rdrl,
    Brdrl,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mbo => "mbo",
            Method::Ambo => "ambo",
            Method::Drl => "drl",
            Method::Rdrl => "rdrl",
            Method::Brdrl => "brdrl",
        }
    }

    pub fn learns(&self) -> bool {
        matches!(self, Method::Drl | Method::Rdrl | Method::Brdrl)
    }
}

fn default_days() -> usize {
    60
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_noise() -> f64 {
    DEFAULT_NOISE_WIDTH
}
fn default_c_v() -> f64 {
    DEFAULT_PENALTY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case_name: CaseName,
    pub method: Method,
    /// One scale for `rdrl`, one per stage for `brdrl`; `drl` runs at 1.
    #[serde(default)]
    pub lambda_schedule: Vec<f64>,
    /// Model error of the base dispatch; defaults per case.
    #[serde(default)]
    pub perturb_factor: Option<f64>,
    #[serde(default = "default_days")]
    pub n_days: usize,
    /// Use the long schedule instead of `n_days`.
    #[serde(default)]
    pub full_schedule: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scenario_seed: u64,
    #[serde(default = "default_noise")]
    pub noise_width: f64,
    #[serde(default = "default_c_v")]
    pub c_v: f64,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub mbo: MboConfig,
    pub output_dir: PathBuf,
    /// Shared store of base-action tables, keyed by content.
    #[serde(default)]
    pub base_cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        if let Some(c) = &cfg.base_cache_dir {
            if c.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.base_cache_dir = Some(dir.join(c));
                }
            }
        }
        Ok(cfg)
    }

    pub fn days(&self) -> usize {
        if self.full_schedule {
            FULL_SCHEDULE_DAYS
        } else {
            self.n_days
        }
    }

    pub fn perturbation(&self) -> f64 {
        self.perturb_factor
            .unwrap_or_else(|| self.case_name.default_perturbation())
    }

    pub fn stage_lambdas(&self) -> Vec<f64> {
        match self.method {
            Method::Drl => vec![1.0],
            Method::Rdrl | Method::Brdrl => self.lambda_schedule.clone(),
            Method::Mbo | Method::Ambo => Vec::new(),
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            c_v: self.c_v,
            ..RewardConfig::default()
        }
    }

    /// Agent settings with the voltage weight tied to the run's penalty.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            violation_weight: self.c_v,
            ..self.agent.clone()
        }
    }

    pub fn mbo_config(&self) -> MboConfig {
        MboConfig {
            penalty: self.c_v,
            ..self.mbo.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.days() == 0 {
            return bad("n_days must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.c_v > 0.0) || !self.c_v.is_finite() {
            return bad(format!("c_v {} must be positive", self.c_v));
        }
        if !(self.perturbation() > 0.0) || !self.perturbation().is_finite() {
            return bad(format!("perturb_factor {} must be positive", self.perturbation()));
        }
        if !(0.0..1.0).contains(&self.noise_width) {
            return bad(format!("noise_width {} outside [0, 1)", self.noise_width));
        }
        if self
            .lambda_schedule
            .iter()
            .any(|l| !(*l > 0.0 && *l <= 1.0))
        {
            return bad(format!("lambda_schedule {:?} outside (0, 1]", self.lambda_schedule));
        }
        match self.method {
            Method::Rdrl if self.lambda_schedule.len() != 1 => {
                bad("rdrl takes exactly one lambda".into())
            }
            Method::Brdrl if !(2..=MAX_STAGES).contains(&self.lambda_schedule.len()) => {
                bad(format!("brdrl takes 2 to {MAX_STAGES} lambdas"))
            }
            Method::Drl if !matches!(self.lambda_schedule.as_slice(), [] | [1.0]) => {
                bad("drl always uses the full action space".into())
            }
            _ => Ok(()),
        }?;
        if self.method.learns() {
            self.agent_config().validate()?;
        }
        if matches!(self.method, Method::Mbo | Method::Ambo | Method::Rdrl | Method::Brdrl) {
            self.mbo_config().validate()?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; identifies a run for resume checks.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn label(&self) -> String {
        match self.method {
            Method::Rdrl | Method::Brdrl => {
                let l: Vec<String> = self.lambda_schedule.iter().map(|l| l.to_string()).collect();
                format!("{}({})", self.method.as_str(), l.join(","))
            }
            m => m.as_str().to_string(),
        }
    }

    pub fn scenarios(&self) -> Result<ScenarioProfile> {
        build_scenarios_with_noise(self.scenario_seed, self.days(), self.noise_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub stage: usize,
    pub day: usize,
    pub phase: Phase,
    pub reward: f64,
    pub power_loss: f64,
    pub violation: f64,
    pub critic_loss_p: f64,
    pub critic_loss_v: f64,
}

impl MetricsRow {
    fn from_day(seed: u64, stage: usize, m: &DayMetrics) -> Self {
        MetricsRow {
            seed,
            stage,
            day: m.day,
            phase: m.phase,
            reward: m.reward,
            power_loss: m.power_loss,
            violation: m.violation,
            critic_loss_p: m.critic_loss_p,
            critic_loss_v: m.critic_loss_v,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().next() != Some(METRICS_HEADER) {
        return Err(Error::Data(format!(
            "{} does not start with {METRICS_HEADER:?}",
            path.display()
        )));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub label: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub seeds: Vec<u64>,
    pub scenario_hash: String,
    pub checkpoints: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// A complete run with the same config was already present.
    pub reused: bool,
    pub rows: Vec<MetricsRow>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn base_key(
    case: CaseName,
    perturb: f64,
    cfg: &MboConfig,
    profile: &ScenarioProfile,
    n_days: usize,
) -> String {
    let text = serde_json::json!({
        "case": case.as_str(),
        "perturb": perturb,
        "mbo": cfg,
        "profile": profile.content_hash(),
        "days": n_days,
    })
    .to_string();
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Base actions of a dispatch model, via the on-disk cache when configured.
pub fn dispatch_table(
    cfg: &ExperimentConfig,
    profile: &ScenarioProfile,
    perturb: f64,
) -> Result<(BasePolicy, Arc<BaseActions>)> {
    let case = cfg.case_name.with_devices();
    let bounds = action_bounds(&case);
    let mbo_cfg = cfg.mbo_config();
    let policy = BasePolicy::Mbo {
        model: case.perturb_impedances(perturb)?,
        perturb_factor: perturb,
        cfg: mbo_cfg.clone(),
    };
    let key = base_key(cfg.case_name, perturb, &mbo_cfg, profile, cfg.days());
    let cache_path = cfg
        .base_cache_dir
        .as_ref()
        .map(|d| d.join(format!("base_{key}.json")));
    if let Some(p) = &cache_path {
        if p.exists() {
            let table: BaseActions = read_json(p)?;
            return Ok((policy, Arc::new(table)));
        }
    }
    log::info!(
        "dispatching {} x {} steps on the {perturb}x model",
        cfg.days(),
        profile.steps_per_day
    );
    let table = BaseActions::compute(&policy, &bounds, profile, cfg.days())?;
    if let Some(p) = &cache_path {
        let dir = p.parent().expect("cache file has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = p.with_extension("tmp");
        write_json(&tmp, &table)?;
        fs::rename(&tmp, p).map_err(|e| Error::io(p, e))?;
    }
    Ok((policy, Arc::new(table)))
}

struct RunState {
    rows: Vec<MetricsRow>,
    checkpoints: Vec<PathBuf>,
}

fn execute(cfg: &ExperimentConfig, profile: &Arc<ScenarioProfile>, state: &mut RunState) -> Result<()> {
    let dir = &cfg.output_dir;
    let case = Arc::new(cfg.case_name.with_devices());
    let bounds = action_bounds(&case);
    let mut env = VvcEnv::new(case.clone(), profile.clone(), cfg.reward())?;
    let (policy, table) = match cfg.method {
        Method::Mbo => dispatch_table(cfg, profile, 1.0)?,
        Method::Ambo | Method::Rdrl | Method::Brdrl => {
            dispatch_table(cfg, profile, cfg.perturbation())?
        }
        Method::Drl => {
            let p = BasePolicy::Constant(bounds.center());
            let t = BaseActions::compute(&p, &bounds, profile, cfg.days())?;
            (p, Arc::new(t))
        }
    };
    let root = PolicyChain::new(table, policy.describe(), bounds.clone());

    if !cfg.method.learns() {
        let days = base_only_metrics(&root, &mut env, cfg.days())?;
        for &seed in &cfg.seeds {
            state
                .rows
                .extend(days.iter().map(|m| MetricsRow::from_day(seed, 0, m)));
        }
        return Ok(());
    }

    let agent_cfg = cfg.agent_config();
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(format!("seed_{seed}"));
        let mut chain = root.clone();
        for (k, &lambda) in cfg.stage_lambdas().iter().enumerate() {
            log::info!("{} seed {seed}: training stage {} (lambda {lambda})", cfg.label(), k + 1);
            let schedule = StageSchedule {
                lambda,
                n_days: cfg.days(),
                seed: seed + STAGE_SEED_STRIDE * k as u64,
            };
            let trained = train_stage(&chain, &mut env, &agent_cfg, &schedule)?;
            state.rows.extend(
                trained
                    .metrics
                    .iter()
                    .map(|m| MetricsRow::from_day(seed, k + 1, m)),
            );
            chain.push(trained.stage.space.clone(), trained.stage.policy.clone())?;
            let manifest = chain.save(&seed_dir, cfg.case_name.as_str())?;
            let agent_path = seed_dir.join(format!("agent_stage{}.json", k + 1));
            write_json(&agent_path, &trained.agent.to_checkpoint())?;
            for p in [
                manifest,
                seed_dir.join(format!("stage{}.json", k + 1)),
                agent_path,
            ] {
                if !state.checkpoints.contains(&p) {
                    state.checkpoints.push(p);
                }
            }
            write_metrics(&dir.join("metrics.csv"), &state.rows)?;
        }
    }
    Ok(())
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Run one experiment into `cfg.output_dir`. Re-running a completed run
/// with an identical config returns its stored metrics without work.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let hash = cfg.hash();
    let mpath = manifest_path(&dir);
    if mpath.exists() {
        let old: RunManifest = read_json(&mpath)?;
        if old.config_hash == hash && old.status == RunStatus::Complete {
            log::info!("{} already complete in {}", cfg.label(), dir.display());
            return Ok(RunOutcome {
                rows: read_metrics(&dir.join("metrics.csv"))?,
                dir,
                reused: true,
            });
        }
        if old.config_hash != hash {
            return Err(Error::Config(format!(
                "{} holds a run with a different config",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let profile = Arc::new(cfg.scenarios()?);
    profile.write_csv(&dir.join("scenario.csv"))?;
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config_hash: hash,
        config: cfg.clone(),
        label: cfg.label(),
        status: RunStatus::Running,
        error: None,
        seeds: cfg.seeds.clone(),
        scenario_hash: profile.content_hash(),
        checkpoints: Vec::new(),
    };
    write_json(&mpath, &manifest)?;

    let mut state = RunState {
        rows: Vec::new(),
        checkpoints: Vec::new(),
    };
    let result = execute(cfg, &profile, &mut state);
    write_metrics(&dir.join("metrics.csv"), &state.rows)?;
    for p in &state.checkpoints {
        manifest.checkpoints.push(FileHash {
            path: p.strip_prefix(&dir).unwrap_or(p).to_path_buf(),
            sha256: sha256_file(p)?,
        });
    }
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            write_json(&mpath, &manifest)?;
            Ok(RunOutcome {
                dir,
                reused: false,
                rows: state.rows,
            })
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            write_json(&mpath, &manifest)?;
            Err(e)
        }
    }
}

/// Write the scenario profile a config would use.
pub fn export_fixtures(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join(format!(
        "scenario_seed{}_{}d.csv",
        cfg.scenario_seed,
        cfg.days()
    ));
    cfg.scenarios()?.write_csv(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub method: Method,
    pub run_dir: String,
    pub window: usize,
    pub mean_reward: f64,
    pub reward_error: f64,
    pub power_loss: f64,
    pub violation: f64,
    pub critic_loss_p: f64,
    pub critic_loss_v: f64,
}

/// Window statistics of one run: seed-mean of per-seed window means (last
/// stage only), plus loss and violation sums over the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub per_seed_reward: BTreeMap<u64, f64>,
    pub mean_reward: f64,
    pub power_loss: f64,
    pub violation: f64,
    pub critic_loss_p: f64,
    pub critic_loss_v: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Final-window statistics from metrics rows. Test rows give rewards, loss
/// and violation; train rows give critic losses.
pub fn window_stats(rows: &[MetricsRow], window: usize) -> Result<WindowStats> {
    let last_stage = rows.iter().map(|r| r.stage).max().unwrap_or(0);
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    if seeds.is_empty() {
        return Err(Error::Comparison("run has no metrics".into()));
    }
    let mut per_seed_reward = BTreeMap::new();
    let (mut loss, mut viol, mut clp, mut clv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &seed in &seeds {
        let pick = |phase: Phase| -> Vec<&MetricsRow> {
            let mut v: Vec<&MetricsRow> = rows
                .iter()
                .filter(|r| r.seed == seed && r.stage == last_stage && r.phase == phase)
                .collect();
            v.sort_by_key(|r| r.day);
            let k = v.len().min(window);
            v.split_off(v.len() - k)
        };
        let test = pick(Phase::Test);
        let train = pick(Phase::Train);
        per_seed_reward.insert(seed, mean(test.iter().map(|r| r.reward)));
        loss.push(test.iter().map(|r| r.power_loss).sum::<f64>());
        viol.push(test.iter().map(|r| r.violation).sum::<f64>());
        clp.push(mean(train.iter().map(|r| r.critic_loss_p)));
        clv.push(mean(train.iter().map(|r| r.critic_loss_v)));
    }
    Ok(WindowStats {
        mean_reward: mean(per_seed_reward.values().copied()),
        per_seed_reward,
        power_loss: mean(loss),
        violation: mean(viol),
        critic_loss_p: mean(clp),
        critic_loss_v: mean(clv),
    })
}

pub fn load_run(dir: &Path) -> Result<(RunManifest, Vec<MetricsRow>)> {
    let manifest: RunManifest = read_json(&manifest_path(dir))?;
    let rows = read_metrics(&dir.join("metrics.csv"))?;
    Ok((manifest, rows))
}

pub fn compare(run_dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    compare_window(run_dirs, DEFAULT_WINDOW)
}

/// Compare runs over their last `window` test days (fewer if the runs are
/// shorter). Reward error is the MBO run's mean reward minus each run's.
pub fn compare_window(run_dirs: &[PathBuf], window: usize) -> Result<Vec<ComparisonRow>> {
    if run_dirs.is_empty() {
        return Err(Error::Comparison("no runs given".into()));
    }
    let runs: Vec<(RunManifest, Vec<MetricsRow>)> =
        run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let first = &runs[0].0;
    for (m, _) in &runs {
        if m.status != RunStatus::Complete {
            return Err(Error::Comparison(format!("{} did not complete", m.label)));
        }
        if m.config.case_name != first.config.case_name
            || m.scenario_hash != first.scenario_hash
            || m.config.days() != first.config.days()
        {
            return Err(Error::Comparison(format!(
                "{} and {} were run on different scenarios",
                first.label, m.label
            )));
        }
    }
    let window = window.min(first.config.days());
    let stats: Vec<WindowStats> = runs
        .iter()
        .map(|(_, rows)| window_stats(rows, window))
        .collect::<Result<_>>()?;
    let reference = runs
        .iter()
        .zip(&stats)
        .find(|((m, _), _)| m.config.method == Method::Mbo)
        .map(|(_, s)| s.mean_reward)
        .ok_or_else(|| Error::Comparison("no mbo run to measure reward error against".into()))?;
    Ok(runs
        .iter()
        .zip(&stats)
        .zip(run_dirs)
        .map(|(((m, _), s), dir)| ComparisonRow {
            label: m.label.clone(),
            method: m.config.method,
            run_dir: dir.display().to_string(),
            window,
            mean_reward: s.mean_reward,
            reward_error: reference - s.mean_reward,
            power_loss: s.power_loss,
            violation: s.violation,
            critic_loss_p: s.critic_loss_p,
            critic_loss_v: s.critic_loss_v,
        })
        .collect())
}

pub fn write_comparison(out: impl std::io::Write, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing comparison: {e}")))?;
    Ok(())
}
