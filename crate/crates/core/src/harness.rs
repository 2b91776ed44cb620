//! Seeded experiment runs with exact regret.
//!
//! Each episode the learner's policy is frozen over every `(h, s)`, its exact
//! value is computed by backward induction, and the regret increment is
//! `V*_1(s_1) - V^pi_1(s_1)` at the realized start state. The episode is then
//! executed with the same frozen decisions.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{Agent, BanditAgent, OptimalAgent, UniformRandomAgent};
use crate::bandit::{Expl3, LinUcb, LinUcbParams, SupLinUcbVar, Takemura};
use crate::config::{AlgorithmConfig, LinUcbMode, RunConfig};
use crate::env::{expected_next, initial_state, optimal_values, step, validate_spec, MlmdpSpec, SpecViolationKind, ValidationReport};
use crate::error::{Error, Result};
use crate::invariants::{InvariantKind, InvariantMode, InvariantViolation};
use crate::mdp::{AlgoConfig, LsviUcb, LsviUcbParams, SupLsviUcb};

/// Caps the worker pool used across seeds.
pub const THREADS_ENV: &str = "MISSPEC_RL_THREADS";
const REGRET_SLACK: f64 = 1e-9;
const MAX_VIOLATION_SAMPLES: usize = 20;

/// `values[h][s]` of a fixed deterministic policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValue {
    pub values: Vec<Vec<f64>>,
}

/// Exact value of `policy[h][s]` by backward induction.
pub fn policy_value(spec: &MlmdpSpec, policy: &[Vec<usize>]) -> Result<PolicyValue> {
    if policy.len() != spec.horizon || policy.iter().any(|p| p.len() != spec.n_states) {
        return Err(Error::logic("policy must assign an action to every (h, s)"));
    }
    let mut values = vec![vec![0.0; spec.n_states]; spec.horizon];
    let mut next = vec![0.0; spec.n_states];
    for h in (0..spec.horizon).rev() {
        for s in 0..spec.n_states {
            let a = policy[h][s];
            if a >= spec.n_actions {
                return Err(Error::logic(format!("action {a} out of range at (h={h}, s={s})")));
            }
            values[h][s] = spec.reward_mean[h][s][a] + expected_next(spec, h, s, a, &next);
        }
        next.clone_from(&values[h]);
    }
    Ok(PolicyValue { values })
}

/// Independent stream seed: SHA-256 of `(master, seed, label)`.
pub fn derive_seed(master_seed: u64, seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub k: usize,
    pub regret_inc: f64,
    pub cum_regret: f64,
    /// Stored rows after the episode, `(h, l)` row-major.
    pub psi: Vec<usize>,
    pub calls: usize,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSeries {
    /// `(steps, levels)` of the `psi` columns.
    pub psi_shape: (usize, usize),
    pub episodes: Vec<EpisodeRecord>,
}

impl RegretSeries {
    /// Cumulative regret after episode `k` (1-based).
    pub fn cum_regret_at(&self, k: usize) -> Option<f64> {
        self.episodes.get(k.checked_sub(1)?).map(|e| e.cum_regret)
    }

    /// Stored rows for step `h` (0-based) and level `l` (1-based) after
    /// episode `k`.
    pub fn psi_at(&self, k: usize, h: usize, l: usize) -> Option<usize> {
        let (_, levels) = self.psi_shape;
        self.episodes
            .get(k.checked_sub(1)?)
            .map(|e| e.psi[h * levels + (l - 1)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ViolationSummary {
    pub total: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub samples: Vec<String>,
}

impl ViolationSummary {
    fn record(&mut self, v: &InvariantViolation) {
        self.total += 1;
        *self.by_kind.entry(v.kind.label().to_string()).or_default() += 1;
        if self.samples.len() < MAX_VIOLATION_SAMPLES {
            self.samples.push(v.to_string());
        }
    }

    pub fn count(&self, kind: InvariantKind) -> usize {
        self.by_kind.get(kind.label()).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub series: RegretSeries,
    pub violations: ViolationSummary,
    /// Per-level count of executed steps that explored, index `l - 1`;
    /// the final slot counts exploitation steps.
    pub level_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub spec: MlmdpSpec,
    pub validation: ValidationReport,
    pub runs: Vec<SeedRun>,
}

impl RunResult {
    pub fn mean_cum_regret_at(&self, k: usize) -> Option<f64> {
        let total: Option<f64> = self.runs.iter().map(|r| r.series.cum_regret_at(k)).sum();
        total.map(|t| t / self.runs.len() as f64)
    }
}

/// Derived algorithm constants, reported alongside results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DerivedParams {
    pub levels: Option<usize>,
    pub alpha: Option<f64>,
    pub eps_rnd: Option<f64>,
    pub lambda: Option<f64>,
}

pub fn derived_params(config: &RunConfig, spec: &MlmdpSpec) -> Result<DerivedParams> {
    Ok(match &config.algorithm {
        AlgorithmConfig::SupLsviUcb { eps_tol, delta, alpha_scale } => {
            let c = AlgoConfig::new(*eps_tol, *delta, *alpha_scale, config.episodes, spec.dim, spec.horizon)?;
            DerivedParams { levels: Some(c.levels()), alpha: Some(c.alpha()), eps_rnd: Some(c.eps_rnd()), lambda: Some(16.0) }
        }
        AlgorithmConfig::LinUcb { .. } => {
            let p = lin_ucb_params(&config.algorithm, config.episodes, spec)?;
            DerivedParams { alpha: Some(p.alpha), lambda: Some(p.lambda), ..Default::default() }
        }
        AlgorithmConfig::LsviUcb { alpha, lambda } => {
            DerivedParams { alpha: Some(*alpha), lambda: Some(*lambda), ..Default::default() }
        }
        AlgorithmConfig::SupLinUcbVar { levels, alpha_b } => {
            DerivedParams { levels: Some(*levels), alpha: Some(*alpha_b), lambda: Some(1.0), ..Default::default() }
        }
        AlgorithmConfig::Takemura { levels, alpha_b } => DerivedParams {
            levels: Some(levels.unwrap_or_else(|| crate::bandit::takemura_levels(spec.dim, config.episodes))),
            alpha: Some(*alpha_b),
            lambda: Some(1.0),
            ..Default::default()
        },
        _ => DerivedParams::default(),
    })
}

fn lin_ucb_params(algo: &AlgorithmConfig, episodes: usize, spec: &MlmdpSpec) -> Result<LinUcbParams> {
    let AlgorithmConfig::LinUcb { mode, eps_mis, delta, lambda, alpha } = algo else {
        return Err(Error::logic("not a lin_ucb config"));
    };
    let eps = eps_mis.unwrap_or(spec.eps_mis_realized);
    match mode {
        LinUcbMode::Inflated => LinUcbParams::inflated(spec.dim, episodes, eps, *delta),
        LinUcbMode::Standard => LinUcbParams::standard(spec.dim, episodes, eps, *delta),
        LinUcbMode::Custom => {
            let (Some(lambda), Some(alpha)) = (lambda, alpha) else {
                return Err(Error::config("lin_ucb custom mode needs both lambda and alpha"));
            };
            LinUcbParams::custom(*lambda, *alpha)
        }
    }
}

/// Instantiates the configured learner for one seed.
pub fn build_agent(config: &RunConfig, spec: &MlmdpSpec, algo_seed: u64) -> Result<Box<dyn Agent>> {
    let mode = config.invariant_mode;
    Ok(match &config.algorithm {
        AlgorithmConfig::SupLsviUcb { eps_tol, delta, alpha_scale } => {
            let c = AlgoConfig::new(*eps_tol, *delta, *alpha_scale, config.episodes, spec.dim, spec.horizon)?;
            let mut agent = SupLsviUcb::new(spec, c, mode)?;
            agent.set_dataset_bound_override(config.test_hooks.psi_bound_override);
            Box::new(agent)
        }
        AlgorithmConfig::LsviUcb { alpha, lambda } => {
            Box::new(LsviUcb::new(spec, LsviUcbParams { alpha: *alpha, lambda: *lambda }, mode)?)
        }
        AlgorithmConfig::Expl3 { thres } => Box::new(BanditAgent::new(Expl3::new(spec.dim, *thres)?, spec)?),
        AlgorithmConfig::SupLinUcbVar { levels, alpha_b } => {
            Box::new(BanditAgent::new(SupLinUcbVar::new(spec.dim, *levels, *alpha_b)?, spec)?)
        }
        AlgorithmConfig::Takemura { levels, alpha_b } => {
            Box::new(BanditAgent::new(Takemura::new(spec.dim, config.episodes, *levels, *alpha_b)?, spec)?)
        }
        AlgorithmConfig::LinUcb { .. } => {
            let params = lin_ucb_params(&config.algorithm, config.episodes, spec)?;
            Box::new(BanditAgent::new(LinUcb::new(spec.dim, params)?, spec)?)
        }
        AlgorithmConfig::Optimal => Box::new(OptimalAgent::new(spec)),
        AlgorithmConfig::UniformRandom => Box::new(UniformRandomAgent::new(spec, algo_seed)),
    })
}

/// Turns spec validation failures into invariant violations.
pub fn spec_violations(report: &ValidationReport) -> Vec<InvariantViolation> {
    report
        .violations
        .iter()
        .map(|v| {
            let kind = if v.kind == SpecViolationKind::FeatureNorm {
                InvariantKind::FeatureNorm
            } else {
                InvariantKind::Validation
            };
            InvariantViolation::new(kind, 0, v.message.clone())
        })
        .collect()
}

/// Runs one seed of `config` on `spec`.
pub fn run_seed(config: &RunConfig, spec: &MlmdpSpec, seed: u64) -> Result<SeedRun> {
    let mut env_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, seed, "env"));
    let mut agent = build_agent(config, spec, derive_seed(config.master_seed, seed, "algo"))?;
    run_agent(agent.as_mut(), spec, config.episodes, &mut env_rng, config.invariant_mode, config.record_wall_time)
        .map(|(series, violations, level_histogram)| SeedRun { seed, series, violations, level_histogram })
}

type AgentOutcome = (RegretSeries, ViolationSummary, Vec<usize>);

/// Drives `agent` for `episodes` episodes against `spec` with environment
/// noise from `env_rng`.
pub fn run_agent(
    agent: &mut dyn Agent,
    spec: &MlmdpSpec,
    episodes: usize,
    env_rng: &mut ChaCha8Rng,
    mode: InvariantMode,
    record_wall_time: bool,
) -> Result<AgentOutcome> {
    let opt = optimal_values(spec);
    let (hz, n_s) = (spec.horizon, spec.n_states);
    let psi_shape = {
        let sizes = agent.psi_sizes();
        (sizes.len(), sizes.first().map_or(0, Vec::len))
    };
    let mut records = Vec::with_capacity(episodes);
    let mut summary = ViolationSummary::default();
    let mut histogram: Vec<usize> = Vec::new();
    let mut cum = 0.0;
    let mut policy = vec![vec![0usize; n_s]; hz];
    for k in 1..=episodes {
        let started = record_wall_time.then(Instant::now);
        agent.begin_episode(k)?;
        for (h, row) in policy.iter_mut().enumerate() {
            for (s, action) in row.iter_mut().enumerate() {
                *action = agent.decide(h, s)?.action;
            }
        }
        let value = policy_value(spec, &policy)?;
        let s1 = initial_state(spec, k, env_rng);
        let regret_inc = opt.v_star[0][s1] - value.values[0][s1];
        let mut found = agent_violations(agent, mode);
        if mode.checks_enabled() && !(-REGRET_SLACK..=hz as f64 + REGRET_SLACK).contains(&regret_inc) {
            found.push(InvariantViolation::new(
                InvariantKind::ValueRange,
                k,
                format!("regret increment {regret_inc} outside [0, {hz}]"),
            ));
        }

        let mut s = s1;
        for h in 0..hz {
            let decision = agent.decide(h, s)?;
            let slot = decision.level.saturating_sub(1);
            let slot = if decision.explored { slot } else { usize::MAX };
            bump_histogram(&mut histogram, slot, psi_shape.1);
            let outcome = step(spec, h, s, decision.action, env_rng)?;
            agent.observe(h, s, &decision, outcome.reward, outcome.next_state)?;
            if let Some(next) = outcome.next_state {
                s = next;
            }
        }
        let stats = agent.end_episode()?;
        found.extend(agent_violations(agent, mode));
        if !found.is_empty() {
            if mode == InvariantMode::PaperExactAssert {
                return Err(Error::Invariant(found));
            }
            found.iter().for_each(|v| summary.record(v));
        }

        cum += regret_inc;
        records.push(EpisodeRecord {
            k,
            regret_inc,
            cum_regret: cum,
            psi: agent.psi_sizes().into_iter().flatten().collect(),
            calls: stats.calls,
            wall_ns: started.map_or(0, |t| t.elapsed().as_nanos() as u64),
        });
    }
    Ok((RegretSeries { psi_shape, episodes: records }, summary, histogram))
}

fn agent_violations(agent: &mut dyn Agent, mode: InvariantMode) -> Vec<InvariantViolation> {
    let drained = agent.drain_violations();
    if mode.checks_enabled() {
        drained
    } else {
        Vec::new()
    }
}

/// Levels occupy slots `0..levels`; exploitation uses slot `levels`.
fn bump_histogram(histogram: &mut Vec<usize>, slot: usize, levels: usize) {
    let idx = if slot == usize::MAX { levels } else { slot };
    if histogram.len() <= idx.max(levels) {
        histogram.resize(idx.max(levels) + 1, 0);
    }
    histogram[idx] += 1;
}

/// Worker count from [`THREADS_ENV`], defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every seed of `config`, in parallel, returning results in seed order.
pub fn run(config: &RunConfig, base_dir: Option<&Path>) -> Result<RunResult> {
    config.validate()?;
    let spec = config.load_spec(base_dir)?;
    run_with_spec(config, spec)
}

pub fn run_with_spec(config: &RunConfig, spec: MlmdpSpec) -> Result<RunResult> {
    let validation = validate_spec(&spec);
    if !validation.is_valid() {
        return Err(Error::Invariant(spec_violations(&validation)));
    }
    // Surface configuration errors once rather than per seed.
    derived_params(config, &spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::logic(format!("cannot build worker pool: {e}")))?;
    let runs: Vec<Result<SeedRun>> =
        pool.install(|| config.seeds.par_iter().map(|&seed| run_seed(config, &spec, seed)).collect());
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RunResult { config: config.clone(), spec, validation, runs })
}
