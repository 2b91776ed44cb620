//! Self-check suite for the runtime-checkable claims.
//!
//! Every check is seeded and returns a [`CheckResult`]. A configuration
//! problem is an `Err`; a claim that fails is a result with `passed == false`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bandit::{ensemble_deviation, run_sup_lin_ucb_var_traced, Context};
use crate::config::{AlgorithmConfig, EnvSource, RunConfig, CONFIG_VERSION};
use crate::env::{make_instance, optimal_values, validate_spec, InitialStateMode, InstanceKind, InstanceParams, MlmdpSpec};
use crate::error::{Error, Result};
use crate::harness::{policy_value, run_with_spec, spec_violations, RunResult};
use crate::invariants::{dataset_bound, InvariantKind, InvariantMode, InvariantViolation, FLOAT_SLACK, NORM_EQUIVALENCE_TOL};
use crate::linalg::{direct_inverse, induced_norm, round_up, rounded_induced_norm, GramState, RoundedInverse};
use crate::mdp::{level_count, PHASE_REGULARIZER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error or ratio, in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, cases: usize, failures: usize, worst: f64, tolerance: f64, detail: impl Into<String>, started: Instant) -> Self {
        CheckResult {
            name: name.into(),
            passed: failures == 0,
            cases,
            failures,
            worst,
            tolerance,
            detail: detail.into(),
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Suite parameters. Field names are the keys accepted by `--set`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random draws for the rounding and norm-equivalence checks.
    pub draws: usize,
    /// Random instances for the DP oracle check.
    pub instances: usize,
    /// Episodes per reference run with the exact constants.
    pub episodes: usize,
    /// Seeds per reference run.
    pub seeds: Vec<u64>,
    /// Overrides the rounding width of the rounding check.
    pub eps_rnd: Option<f64>,
    /// Extra spec checked alongside the built-in references.
    pub spec: Option<PathBuf>,
    /// Tolerance input used for the extra spec.
    pub eps_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            draws: 10_000,
            instances: 50,
            episodes: 1000,
            seeds: vec![0],
            eps_rnd: None,
            spec: None,
            eps_tol: 0.25,
        }
    }
}

impl VerifyConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::config(format!("invalid verify config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(eps) = self.eps_rnd {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::config(format!("eps_rnd must be positive and finite, got {eps}")));
            }
        }
        if self.draws == 0 || self.instances == 0 || self.episodes == 0 || self.seeds.is_empty() {
            return Err(Error::config("draws, instances, episodes and seeds must be nonempty"));
        }
        if !(self.eps_tol.is_finite() && self.eps_tol > 0.0) {
            return Err(Error::config(format!("eps_tol must be positive, got {}", self.eps_tol)));
        }
        Ok(())
    }
}

fn unit_ball(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    let x = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    let norm = x.norm();
    let radius: f64 = rng.gen_range(0.0..=1.0);
    if norm == 0.0 { x } else { x * (radius / norm) }
}

fn random_phase_state(rng: &mut impl Rng, dim: usize, max_rows: usize) -> Result<GramState> {
    let mut gram = GramState::new(dim, PHASE_REGULARIZER)?;
    for _ in 0..rng.gen_range(0..=max_rows) {
        gram.rank_one_update(&unit_ball(rng, dim))?;
    }
    Ok(gram)
}

/// Both rounding inequalities on random `(w, Lambda, phi)`:
/// `|phi.(w - w~)| <= sqrt(d) eps` and `| ||phi|| - ||phi||~ | <= sqrt(d eps)`.
/// The reported ratio is the largest gap over its bound.
pub fn check_rounding(draws: usize, seed: u64, eps_override: Option<f64>) -> Result<CheckResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..draws {
        let dim = rng.gen_range(1..=8usize);
        let levels = rng.gen_range(1..=4i32);
        let eps = eps_override.unwrap_or_else(|| 2f64.powi(-4 * levels) / dim as f64);
        let gram = random_phase_state(&mut rng, dim, 60)?;
        let w = DVector::from_fn(dim, |_, _| rng.gen_range(-10.0..10.0));
        let w_rounded = DVector::from_vec(round_up(w.as_slice(), eps)?);
        let rinv = RoundedInverse::from_inverse(gram.inv(), eps)?;
        let phi = unit_ball(&mut rng, dim);
        let score_bound = (dim as f64).sqrt() * eps;
        let norm_bound = (dim as f64 * eps).sqrt();
        let score_gap = phi.dot(&(&w - &w_rounded)).abs();
        let norm_gap = (induced_norm(gram.inv(), &phi)? - rounded_induced_norm(&rinv, &phi)).abs();
        if score_gap > score_bound + FLOAT_SLACK || norm_gap > norm_bound + FLOAT_SLACK {
            failures += 1;
        }
        worst = worst.max(score_gap / score_bound).max(norm_gap / norm_bound);
    }
    Ok(CheckResult::new("rounding-error", draws, failures, worst, 1.0, "max gap / bound", started))
}

/// `||x||_{Lambda^-1} <= ||x||_2 / 4` for states regularized by `16 I`.
pub fn check_norm_equivalence(draws: usize, seed: u64) -> Result<CheckResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst_excess, mut worst_ratio) = (0, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..draws {
        let dim = rng.gen_range(1..=8usize);
        let gram = random_phase_state(&mut rng, dim, 200)?;
        let scale = rng.gen_range(0.0..4.0);
        let x = unit_ball(&mut rng, dim) * scale;
        let norm = induced_norm(gram.inv(), &x)?;
        let excess = norm - x.norm() / 4.0;
        if excess > NORM_EQUIVALENCE_TOL {
            failures += 1;
        }
        worst_excess = worst_excess.max(excess);
        if x.norm() > 0.0 {
            worst_ratio = worst_ratio.max(4.0 * norm / x.norm());
        }
    }
    let detail = format!("max ||x|| / (||x||_2/4) = {worst_ratio:.12}");
    Ok(CheckResult::new("norm-equivalence", draws, failures, worst_excess, NORM_EQUIVALENCE_TOL, detail, started))
}

/// Largest entrywise gap between the incrementally maintained inverse and a
/// direct inversion, checked after every update.
pub fn check_incremental_inverse(dim: usize, updates: usize, interval: u64, seed: u64, tol: f64) -> Result<CheckResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gram = GramState::with_recompute_interval(dim, 1.0, interval)?;
    let (mut failures, mut worst) = (0, 0.0f64);
    for _ in 0..updates {
        gram.rank_one_update(&unit_ball(&mut rng, dim))?;
        let direct = direct_inverse(gram.gram())?;
        let gap = (gram.inv() - direct).abs().max();
        if gap > tol {
            failures += 1;
        }
        worst = worst.max(gap);
    }
    Ok(CheckResult::new("incremental-inverse", updates, failures, worst, tol, format!("d={dim}, recompute every {interval}"), started))
}

fn for_each_policy(n_states: usize, n_actions: usize, horizon: usize, mut f: impl FnMut(&[Vec<usize>]) -> Result<()>) -> Result<()> {
    let cells = n_states * horizon;
    let total = n_actions.checked_pow(cells as u32).ok_or_else(|| Error::config("policy space too large"))?;
    let mut policy = vec![vec![0usize; n_states]; horizon];
    for code in 0..total {
        let mut rest = code;
        for cell in 0..cells {
            policy[cell / n_states][cell % n_states] = rest % n_actions;
            rest /= n_actions;
        }
        f(&policy)?;
    }
    Ok(())
}

/// Backward induction against exhaustive enumeration of every deterministic
/// policy on random 3-state, 3-action, 3-step instances.
pub fn check_dp_oracle(instances: usize, seed: u64, tol: f64) -> Result<CheckResult> {
    let started = Instant::now();
    let (mut failures, mut worst) = (0, 0.0f64);
    for i in 0..instances {
        let spec = make_instance(&InstanceParams {
            kind: InstanceKind::SimplexMixture,
            n_states: 3,
            n_actions: 3,
            horizon: 3,
            dim: 3,
            eps_mis_target: if i % 2 == 0 { 0.0 } else { 0.2 },
            seed: seed.wrapping_add(i as u64),
            initial_state: InitialStateMode::SeededUniform,
        })?;
        let opt = optimal_values(&spec);
        let mut best = vec![f64::NEG_INFINITY; spec.n_states];
        for_each_policy(spec.n_states, spec.n_actions, spec.horizon, |policy| {
            let v = policy_value(&spec, policy)?;
            for (b, &x) in best.iter_mut().zip(&v.values[0]) {
                *b = b.max(x);
            }
            Ok(())
        })?;
        let gap = best.iter().zip(&opt.v_star[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > tol {
            failures += 1;
        }
        worst = worst.max(gap);
    }
    Ok(CheckResult::new("dp-oracle", instances, failures, worst, tol, "3 states, 3 actions, H=3", started))
}

/// Random context stream: simplex features and a fixed linear mean, plus one
/// shared noise uniform per round.
pub fn random_context_stream(seed: u64, rounds: usize, n_actions: usize, dim: usize) -> (Vec<Context>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = DVector::from_fn(dim, |_, _| rng.gen_range(0.0..1.0));
    let contexts = (0..rounds)
        .map(|_| {
            let features: Vec<DVector<f64>> = (0..n_actions)
                .map(|_| {
                    let raw = DVector::from_fn(dim, |_, _| -(1.0 - rng.gen::<f64>()).ln());
                    let total = raw.sum();
                    raw / total
                })
                .collect();
            let means = features.iter().map(|x| x.dot(&theta)).collect();
            Context { features, means }
        })
        .collect();
    let uniforms = (0..rounds).map(|_| rng.gen()).collect();
    (contexts, uniforms)
}

/// Replays every phase of phased elimination as a single-threshold learner
/// and reports the largest entrywise gap in `(w, Lambda)`.
pub fn check_ensemble(seeds: &[u64], rounds: usize, n_actions: usize, dim: usize, levels: usize, tol: f64) -> Result<CheckResult> {
    let started = Instant::now();
    let (mut failures, mut worst, mut explored) = (0, 0.0f64, 0usize);
    for &seed in seeds {
        let (contexts, uniforms) = random_context_stream(seed, rounds, n_actions, dim);
        let trace = run_sup_lin_ucb_var_traced(&contexts, &uniforms, levels, 1.0)?;
        explored += trace.rounds.iter().filter(|r| r.explored_level().is_some()).count();
        for l in 1..=levels {
            let gap = ensemble_deviation(&trace, l)?;
            if gap > tol {
                failures += 1;
            }
            worst = worst.max(gap);
        }
    }
    let detail = format!("d={dim}, {n_actions} actions, L={levels}, {rounds} rounds, {explored} exploratory rounds");
    Ok(CheckResult::new("ensemble-equivalence", seeds.len() * levels, failures, worst, tol, detail, started))
}

/// A spec run by the learner with the exact constants.
#[derive(Debug, Clone)]
pub struct ReferenceCase {
    pub name: String,
    pub spec: MlmdpSpec,
    pub eps_tol: f64,
}

/// Built-in reference specs covering `d <= 8` and `H <= 4`.
pub fn reference_cases() -> Result<Vec<ReferenceCase>> {
    let case = |name: &str, kind, n_states, n_actions, horizon, dim, eps, eps_tol| -> Result<ReferenceCase> {
        Ok(ReferenceCase {
            name: name.into(),
            spec: make_instance(&InstanceParams {
                kind,
                n_states,
                n_actions,
                horizon,
                dim,
                eps_mis_target: eps,
                seed: 1,
                initial_state: InitialStateMode::SeededUniform,
            })?,
            eps_tol,
        })
    };
    Ok(vec![
        case("simplex-d4-h3", InstanceKind::SimplexMixture, 8, 5, 3, 4, 0.0, 0.25)?,
        case("simplex-d8-h4", InstanceKind::SimplexMixture, 6, 4, 4, 8, 0.1, 0.5)?,
        case("one-hot-d8-h2", InstanceKind::OneHot, 2, 4, 2, 8, 0.05, 0.25)?,
        case("bandit-d5", InstanceKind::BanditBasis, 1, 5, 1, 5, 0.1, 0.25)?,
    ])
}

fn exact_config(case: &ReferenceCase, episodes: usize, seeds: &[u64]) -> RunConfig {
    let params = InstanceParams {
        kind: InstanceKind::SimplexMixture,
        n_states: case.spec.n_states,
        n_actions: case.spec.n_actions,
        horizon: case.spec.horizon,
        dim: case.spec.dim,
        eps_mis_target: 0.0,
        seed: 0,
        initial_state: case.spec.initial_state,
    };
    RunConfig {
        config_version: CONFIG_VERSION,
        run_id: format!("verify-{}", case.name),
        episodes,
        master_seed: 0,
        seeds: seeds.to_vec(),
        invariant_mode: InvariantMode::PaperExactAssert,
        record_wall_time: false,
        initial_state: None,
        env: EnvSource::Generate(params),
        algorithm: AlgorithmConfig::SupLsviUcb { eps_tol: case.eps_tol, delta: 0.1, alpha_scale: 1.0 },
        test_hooks: Default::default(),
    }
}

/// Outcome of one reference run with the exact constants.
#[derive(Debug, Clone)]
pub struct ExactRun {
    pub case: String,
    pub violations: Vec<InvariantViolation>,
    pub result: Option<RunResult>,
}

/// Runs `case` in paper-exact-assert mode; an aborted run keeps the violations
/// that stopped it.
pub fn run_exact(case: &ReferenceCase, episodes: usize, seeds: &[u64]) -> Result<ExactRun> {
    let config = exact_config(case, episodes, seeds);
    match run_with_spec(&config, case.spec.clone()) {
        Ok(result) => Ok(ExactRun { case: case.name.clone(), violations: Vec::new(), result: Some(result) }),
        Err(Error::Invariant(violations)) => Ok(ExactRun { case: case.name.clone(), violations, result: None }),
        Err(e) => Err(e),
    }
}

/// Dataset-bound and level >= 2 results over a set of exact runs. Both are
/// checked twice: by the learner's own assertions and from the recorded
/// series and level histogram.
pub fn summarize_exact(runs: &[ExactRun], started: Instant) -> Vec<CheckResult> {
    let count = |kind: InvariantKind| -> usize { runs.iter().map(|r| r.violations.iter().filter(|v| v.kind == kind).count()).sum() };
    let first = |kind: InvariantKind| -> String {
        runs.iter()
            .flat_map(|r| r.violations.iter().filter(move |v| v.kind == kind).map(move |v| format!("{}: {v}", r.case)))
            .next()
            .unwrap_or_default()
    };
    let (mut ratio, mut over, mut level_one, mut explored, mut aborted) = (0.0f64, 0usize, 0usize, 0usize, 0usize);
    for run in runs {
        let Some(result) = &run.result else {
            aborted += 1;
            continue;
        };
        let d = result.spec.dim;
        for seed_run in &result.runs {
            let (hz, levels) = seed_run.series.psi_shape;
            for e in &seed_run.series.episodes {
                for h in 0..hz {
                    for l in 0..levels {
                        let r = e.psi[h * levels + l] as f64 / dataset_bound(l + 1, d);
                        ratio = ratio.max(r);
                        over += usize::from(r > 1.0);
                    }
                }
            }
            let hist = &seed_run.level_histogram;
            level_one += hist.first().copied().unwrap_or(0);
            explored += hist.iter().take(hist.len().saturating_sub(1)).sum::<usize>();
        }
    }
    let cases = runs.len();
    let other: Vec<String> = runs
        .iter()
        .flat_map(|r| {
            r.violations
                .iter()
                .filter(|v| !matches!(v.kind, InvariantKind::DatasetBound | InvariantKind::PhaseOneExploration))
                .map(move |v| format!("{}: {v}", r.case))
        })
        .collect();
    let dataset_failures = count(InvariantKind::DatasetBound) + over;
    let mut dataset_detail = format!("max |psi| / bound = {ratio:.3e}");
    if dataset_failures > 0 {
        dataset_detail = format!("{dataset_detail}; {}", first(InvariantKind::DatasetBound));
    }
    let level_failures = count(InvariantKind::PhaseOneExploration) + level_one;
    let mut level_detail = format!("{explored} exploratory steps, {level_one} at level 1");
    if level_failures > 0 {
        level_detail = format!("{level_detail}; {}", first(InvariantKind::PhaseOneExploration));
    }
    let mut out = vec![
        CheckResult::new("dataset-bound", cases, dataset_failures, ratio, 1.0, dataset_detail, started),
        CheckResult::new("level>=2", cases, level_failures, level_one as f64, 0.0, level_detail, started),
    ];
    let other_detail = if other.is_empty() {
        format!("{aborted} aborted runs")
    } else {
        other[0].clone()
    };
    out.push(CheckResult::new("exact-mode-claims", cases, other.len(), other.len() as f64, 0.0, other_detail, started));
    out
}

/// Validation of a user-supplied spec, naming the first violation.
pub fn check_spec(name: &str, spec: &MlmdpSpec) -> CheckResult {
    let started = Instant::now();
    let report = validate_spec(spec);
    let violations = spec_violations(&report);
    let detail = match violations.first() {
        Some(v) => format!("{name}: {v}"),
        None => format!("{name}: valid, eps_mis = {:.3e}", report.eps_mis_realized),
    };
    CheckResult::new("spec-validation", 1, violations.len(), report.max_feature_norm, 1.0, detail, started)
}

/// Runs the whole suite. `base_dir` resolves a relative `spec` path.
pub fn run_suite(config: &VerifyConfig, base_dir: Option<&Path>) -> Result<Vec<CheckResult>> {
    config.validate()?;
    let mut cases = reference_cases()?;
    let mut results = Vec::new();
    if let Some(path) = &config.spec {
        let full = match base_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.clone(),
        };
        let spec = MlmdpSpec::load(&full).map_err(|e| Error::config(format!("cannot load spec {}: {e}", full.display())))?;
        let check = check_spec(&full.display().to_string(), &spec);
        let valid = check.passed;
        results.push(check);
        if valid {
            if level_count(spec.dim, config.eps_tol) <= 0 {
                return Err(Error::config(format!("eps_tol yields L ≤ 0 for d = {}", spec.dim)));
            }
            cases.push(ReferenceCase { name: "supplied".into(), spec, eps_tol: config.eps_tol });
        }
    }
    results.push(check_rounding(config.draws, config.seed, config.eps_rnd)?);
    results.push(check_norm_equivalence(config.draws, config.seed.wrapping_add(1))?);
    results.push(check_incremental_inverse(8, 1000, 64, config.seed.wrapping_add(2), 1e-8)?);
    results.push(check_dp_oracle(config.instances, config.seed.wrapping_add(3), 1e-12)?);
    let ensemble_seeds: Vec<u64> = (0..5).map(|i| config.seed.wrapping_add(i)).collect();
    results.push(check_ensemble(&ensemble_seeds, 200, 4, 3, 3, 1e-9)?);
    let started = Instant::now();
    let runs = cases
        .iter()
        .map(|c| run_exact(c, config.episodes, &config.seeds))
        .collect::<Result<Vec<_>>>()?;
    results.extend(summarize_exact(&runs, started));
    Ok(results)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:<6}  {:>7}  {:>8}  {:>10}  {:>8}  detail\n", "check", "result", "cases", "failures", "worst", "seconds");
    for r in results {
        let _ = writeln!(
            out,
            "{:<width$}  {:<6}  {:>7}  {:>8}  {:>10.3e}  {:>8.2}  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.cases,
            r.failures,
            r.worst,
            r.seconds,
            r.detail
        );
    }
    out
}
