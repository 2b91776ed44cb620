//! Finite tabular environments whose rewards and transitions are linear in a
//! known feature map up to a measured misspecification, together with an
//! exact backward-induction oracle.
//!
//! Steps `h` are 0-based throughout the API. Transition kernels exist for
//! `h < horizon - 1` only; the last step terminates.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEC_VERSION: u32 = 1;
const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitialStateMode {
    Fixed {
        state: usize,
    },
    /// Episode `k` (1-based) starts in state `(k - 1) mod n_states`.
    Cyclic,
    #[default]
    SeededUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmdpSpec {
    pub spec_version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub dim: usize,
    /// `phi[s][a]` has `dim` entries.
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `theta[h]` has `dim` entries.
    pub theta: Vec<Vec<f64>>,
    /// `mu[h][i][s']` for `h < horizon - 1`.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// `reward_mean[h][s][a]` in `[0, 1]`.
    pub reward_mean: Vec<Vec<Vec<f64>>>,
    /// `transition[h][s][a][s']` for `h < horizon - 1`.
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    pub eps_mis_target: f64,
    pub eps_mis_realized: f64,
    pub initial_state: InitialStateMode,
}

impl MlmdpSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: MlmdpSpec = serde_json::from_str(&text)?;
        if spec.spec_version != SPEC_VERSION {
            return Err(Error::config(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                spec.spec_version
            )));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn feature(&self, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.phi[s][a])
    }

    pub fn feature_table(&self) -> FeatureTable {
        FeatureTable {
            rows: self
                .phi
                .iter()
                .map(|actions| actions.iter().map(|x| DVector::from_column_slice(x)).collect())
                .collect(),
        }
    }

    fn check_indices(&self, h: usize, s: usize, a: usize) -> Result<()> {
        if h >= self.horizon || s >= self.n_states || a >= self.n_actions {
            return Err(Error::logic(format!(
                "index (h={h}, s={s}, a={a}) outside horizon {} / {} states / {} actions",
                self.horizon, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// The known feature map, materialized as vectors: `rows[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    rows: Vec<Vec<DVector<f64>>>,
}

impl FeatureTable {
    pub fn new(rows: Vec<Vec<DVector<f64>>>) -> Self {
        FeatureTable { rows }
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn n_actions(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn dim(&self) -> usize {
        self.rows
            .first()
            .and_then(|r| r.first())
            .map_or(0, |x| x.len())
    }

    pub fn state(&self, s: usize) -> &[DVector<f64>] {
        &self.rows[s]
    }

    pub fn get(&self, s: usize, a: usize) -> &DVector<f64> {
        &self.rows[s][a]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `phi^T theta`.
pub fn linear_reward(phi: &[f64], theta: &[f64]) -> f64 {
    dot(phi, theta)
}

/// `phi^T mu`, one entry per next state.
pub fn linear_transition(phi: &[f64], mu: &[Vec<f64>]) -> Vec<f64> {
    let n_next = mu.first().map_or(0, Vec::len);
    (0..n_next)
        .map(|sp| phi.iter().zip(mu).map(|(p, m)| p * m[sp]).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecViolationKind {
    Shape,
    FeatureNorm,
    ThetaNorm,
    MuNorm,
    TransitionNotDistribution,
    RewardOutOfRange,
    MisspecExceedsTarget,
    MisspecMismatch,
    InitialState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecViolation {
    pub kind: SpecViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<SpecViolation>,
    /// Exact `max_{h,s,a} max(|r - phi^T theta|, ||P - phi^T mu||_1)`.
    pub eps_mis_realized: f64,
    pub reward_misspec: f64,
    pub transition_misspec: f64,
    pub max_feature_norm: f64,
    pub max_theta_norm: f64,
    /// Max over steps of `|| (sum_s' |mu_i(s')|)_i ||_2`, the checked measure bound.
    pub max_mu_total_measure_norm: f64,
    /// Max over steps of `sum_s' ||mu(s')||_2`; reported only.
    pub max_mu_sum_of_norms: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn shape_violations(spec: &MlmdpSpec) -> Vec<String> {
    let mut out = Vec::new();
    let (n_s, n_a, hz, d) = (spec.n_states, spec.n_actions, spec.horizon, spec.dim);
    if n_s == 0 || n_a == 0 || hz == 0 || d == 0 {
        out.push("n_states, n_actions, horizon and dim must all be at least 1".to_string());
        return out;
    }
    let n_trans = hz - 1;
    if spec.phi.len() != n_s || spec.phi.iter().any(|r| r.len() != n_a || r.iter().any(|x| x.len() != d)) {
        out.push(format!("phi must be [{n_s}][{n_a}][{d}]"));
    }
    if spec.theta.len() != hz || spec.theta.iter().any(|t| t.len() != d) {
        out.push(format!("theta must be [{hz}][{d}]"));
    }
    if spec.mu.len() != n_trans || spec.mu.iter().any(|m| m.len() != d || m.iter().any(|c| c.len() != n_s)) {
        out.push(format!("mu must be [{n_trans}][{d}][{n_s}]"));
    }
    if spec.reward_mean.len() != hz
        || spec.reward_mean.iter().any(|r| r.len() != n_s || r.iter().any(|x| x.len() != n_a))
    {
        out.push(format!("reward_mean must be [{hz}][{n_s}][{n_a}]"));
    }
    if spec.transition.len() != n_trans
        || spec.transition.iter().any(|t| {
            t.len() != n_s || t.iter().any(|r| r.len() != n_a || r.iter().any(|p| p.len() != n_s))
        })
    {
        out.push(format!("transition must be [{n_trans}][{n_s}][{n_a}][{n_s}]"));
    }
    let all_finite = spec.phi.iter().flatten().flatten()
        .chain(spec.theta.iter().flatten())
        .chain(spec.mu.iter().flatten().flatten())
        .chain(spec.reward_mean.iter().flatten().flatten())
        .chain(spec.transition.iter().flatten().flatten().flatten())
        .all(|v| v.is_finite());
    if !all_finite {
        out.push("spec contains non-finite entries".to_string());
    }
    out
}

/// Checks every structural bound and recomputes the misspecification by full
/// enumeration over `(h, s, a)`.
pub fn validate_spec(spec: &MlmdpSpec) -> ValidationReport {
    let mut report = ValidationReport {
        violations: Vec::new(),
        eps_mis_realized: 0.0,
        reward_misspec: 0.0,
        transition_misspec: 0.0,
        max_feature_norm: 0.0,
        max_theta_norm: 0.0,
        max_mu_total_measure_norm: 0.0,
        max_mu_sum_of_norms: 0.0,
    };
    let mut push = |kind, message: String| report.violations.push(SpecViolation { kind, message });

    let shape = shape_violations(spec);
    if !shape.is_empty() {
        for message in shape {
            push(SpecViolationKind::Shape, message);
        }
        return report;
    }

    let sqrt_d = (spec.dim as f64).sqrt();
    let mut max_feature_norm: f64 = 0.0;
    let mut worst_feature = (0, 0);
    for (s, actions) in spec.phi.iter().enumerate() {
        for (a, x) in actions.iter().enumerate() {
            let n = l2(x);
            if n > max_feature_norm {
                max_feature_norm = n;
                worst_feature = (s, a);
            }
        }
    }
    if max_feature_norm > 1.0 + NORM_SLACK {
        push(
            SpecViolationKind::FeatureNorm,
            format!(
                "feature norm exceeds 1: ||phi({}, {})||_2 = {max_feature_norm}",
                worst_feature.0, worst_feature.1
            ),
        );
    }

    let mut max_theta_norm: f64 = 0.0;
    for (h, t) in spec.theta.iter().enumerate() {
        let n = l2(t);
        max_theta_norm = max_theta_norm.max(n);
        if n > sqrt_d + NORM_SLACK {
            push(SpecViolationKind::ThetaNorm, format!("theta norm exceeds sqrt(d) at step {h}: {n}"));
        }
    }

    let mut max_total = 0.0f64;
    let mut max_sum_norms = 0.0f64;
    for (h, m) in spec.mu.iter().enumerate() {
        let totals: Vec<f64> = m.iter().map(|col| col.iter().map(|v| v.abs()).sum()).collect();
        let total_norm = l2(&totals);
        let sum_norms: f64 = (0..spec.n_states)
            .map(|sp| m.iter().map(|col| col[sp] * col[sp]).sum::<f64>().sqrt())
            .sum();
        max_total = max_total.max(total_norm);
        max_sum_norms = max_sum_norms.max(sum_norms);
        if total_norm > sqrt_d + NORM_SLACK {
            push(
                SpecViolationKind::MuNorm,
                format!("measure norm exceeds sqrt(d) at step {h}: {total_norm}"),
            );
        }
    }

    let mut reward_mis = 0.0f64;
    for (h, per_state) in spec.reward_mean.iter().enumerate() {
        for (s, per_action) in per_state.iter().enumerate() {
            for (a, &r) in per_action.iter().enumerate() {
                if !(0.0..=1.0).contains(&r) {
                    push(
                        SpecViolationKind::RewardOutOfRange,
                        format!("reward mean {r} outside [0,1] at (h={h}, s={s}, a={a})"),
                    );
                }
                let gap = (r - linear_reward(&spec.phi[s][a], &spec.theta[h])).abs();
                reward_mis = reward_mis.max(gap);
            }
        }
    }

    let mut trans_mis = 0.0f64;
    for (h, per_state) in spec.transition.iter().enumerate() {
        for (s, per_action) in per_state.iter().enumerate() {
            for (a, row) in per_action.iter().enumerate() {
                let total: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > NORM_SLACK {
                    push(
                        SpecViolationKind::TransitionNotDistribution,
                        format!("transition row (h={h}, s={s}, a={a}) is not a distribution (sum {total})"),
                    );
                }
                let lin = linear_transition(&spec.phi[s][a], &spec.mu[h]);
                let gap: f64 = row.iter().zip(&lin).map(|(p, q)| (p - q).abs()).sum();
                trans_mis = trans_mis.max(gap);
            }
        }
    }

    let realized = reward_mis.max(trans_mis);
    if realized > spec.eps_mis_target + NORM_SLACK {
        push(
            SpecViolationKind::MisspecExceedsTarget,
            format!(
                "realized misspecification {realized} exceeds target {}",
                spec.eps_mis_target
            ),
        );
    }
    if (realized - spec.eps_mis_realized).abs() > NORM_SLACK {
        push(
            SpecViolationKind::MisspecMismatch,
            format!(
                "stored eps_mis_realized {} differs from recomputed {realized}",
                spec.eps_mis_realized
            ),
        );
    }
    if let InitialStateMode::Fixed { state } = spec.initial_state {
        if state >= spec.n_states {
            push(
                SpecViolationKind::InitialState,
                format!("fixed initial state {state} out of range"),
            );
        }
    }

    report.eps_mis_realized = realized;
    report.reward_misspec = reward_mis;
    report.transition_misspec = trans_mis;
    report.max_feature_norm = max_feature_norm;
    report.max_theta_norm = max_theta_norm;
    report.max_mu_total_measure_norm = max_total;
    report.max_mu_sum_of_norms = max_sum_norms;
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalValues {
    /// `v_star[h][s]`.
    pub v_star: Vec<Vec<f64>>,
    /// `q_star[h][s][a]`.
    pub q_star: Vec<Vec<Vec<f64>>>,
    /// Greedy action, lowest index on ties.
    pub pi_star: Vec<Vec<usize>>,
}

/// Expected next-step value `sum_s' P_h(s'|s,a) next[s']`, zero at the last step.
pub(crate) fn expected_next(spec: &MlmdpSpec, h: usize, s: usize, a: usize, next: &[f64]) -> f64 {
    if h + 1 >= spec.horizon {
        0.0
    } else {
        dot(&spec.transition[h][s][a], next)
    }
}

pub fn optimal_values(spec: &MlmdpSpec) -> OptimalValues {
    let (hz, n_s, n_a) = (spec.horizon, spec.n_states, spec.n_actions);
    let mut v_star = vec![vec![0.0; n_s]; hz];
    let mut q_star = vec![vec![vec![0.0; n_a]; n_s]; hz];
    let mut pi_star = vec![vec![0usize; n_s]; hz];
    let mut next = vec![0.0; n_s];
    for h in (0..hz).rev() {
        for s in 0..n_s {
            let mut best = 0usize;
            for a in 0..n_a {
                let q = spec.reward_mean[h][s][a] + expected_next(spec, h, s, a, &next);
                q_star[h][s][a] = q;
                if q > q_star[h][s][best] {
                    best = a;
                }
            }
            pi_star[h][s] = best;
            v_star[h][s] = q_star[h][s][best];
        }
        next.clone_from(&v_star[h]);
    }
    OptimalValues { v_star, q_star, pi_star }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// `None` after the last step.
    pub next_state: Option<usize>,
}

/// Realized Bernoulli reward driven by a shared uniform draw `u in [0, 1)`.
pub fn bernoulli_reward(mean: f64, u: f64) -> f64 {
    if u < mean {
        1.0
    } else {
        0.0
    }
}

/// Inverse-CDF draw from a distribution row.
pub fn sample_index(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave the cumulative sum just below 1; fall back to the
    // last state with positive mass.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Simulates one step. Consumes one uniform for the reward and, before the
/// last step, one for the transition.
pub fn step<R: Rng + ?Sized>(
    spec: &MlmdpSpec,
    h: usize,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    spec.check_indices(h, s, a)?;
    let reward = bernoulli_reward(spec.reward_mean[h][s][a], rng.gen::<f64>());
    let next_state = if h + 1 < spec.horizon {
        Some(sample_index(&spec.transition[h][s][a], rng.gen::<f64>()))
    } else {
        None
    };
    Ok(StepOutcome { reward, next_state })
}

/// Initial state of 1-based episode `k`.
pub fn initial_state<R: Rng + ?Sized>(spec: &MlmdpSpec, k: usize, rng: &mut R) -> usize {
    match spec.initial_state {
        InitialStateMode::Fixed { state } => state,
        InitialStateMode::Cyclic => (k.max(1) - 1) % spec.n_states,
        InitialStateMode::SeededUniform => rng.gen_range(0..spec.n_states),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    /// `phi(s, a) = e_{s * n_actions + a}`; requires `dim = n_states * n_actions`.
    OneHot,
    /// Features on the probability simplex, transitions as mixtures of `dim`
    /// base distributions.
    SimplexMixture,
    /// Single state, `phi(0, i) = e_i`, horizon 1, `dim = n_actions`.
    BanditBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceParams {
    pub kind: InstanceKind,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub dim: usize,
    pub eps_mis_target: f64,
    pub seed: u64,
    #[serde(default)]
    pub initial_state: InitialStateMode,
}

fn random_simplex_point(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Normalized exponentials are uniform on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        cumsum += x;
        let candidate = (cumsum - 1.0) / (i as f64 + 1.0);
        if x - candidate > 0.0 {
            tau = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - tau).max(0.0)).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Moves a distribution by at most `eps` in l1 along a random zero-sum
/// direction, staying on the simplex.
fn perturb_distribution(rng: &mut impl Rng, row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len();
    if eps == 0.0 || n < 2 {
        return row.to_vec();
    }
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let dir: Vec<f64> = raw.iter().map(|x| x - mean).collect();
    let l1: f64 = dir.iter().map(|x| x.abs()).sum();
    if l1 == 0.0 {
        return row.to_vec();
    }
    let shifted: Vec<f64> = row.iter().zip(&dir).map(|(p, z)| p + z * eps / l1).collect();
    let projected = project_to_simplex(&shifted);
    let moved: f64 = projected.iter().zip(row).map(|(p, q)| (p - q).abs()).sum();
    if moved <= eps {
        return projected;
    }
    // Shrink toward the original row; convex combinations stay on the simplex.
    let t = eps / moved * (1.0 - 1e-12);
    row.iter().zip(&projected).map(|(q, p)| q + t * (p - q)).collect()
}

/// Builds a seeded instance, measures its realized misspecification and
/// returns it only if it validates.
pub fn make_instance(params: &InstanceParams) -> Result<MlmdpSpec> {
    let InstanceParams { kind, n_states, n_actions, horizon, dim, eps_mis_target, seed, initial_state } =
        params.clone();
    if n_states == 0 || n_actions == 0 || horizon == 0 || dim == 0 {
        return Err(Error::config("n_states, n_actions, horizon and dim must all be at least 1"));
    }
    if !(eps_mis_target.is_finite() && (0.0..0.5).contains(&eps_mis_target)) {
        return Err(Error::config(format!(
            "eps_mis_target must lie in [0, 0.5), got {eps_mis_target}"
        )));
    }
    match kind {
        InstanceKind::OneHot if dim != n_states * n_actions => {
            return Err(Error::config(format!(
                "one_hot instances need dim = n_states * n_actions = {}, got {dim}",
                n_states * n_actions
            )));
        }
        InstanceKind::BanditBasis if horizon != 1 || dim != n_actions || n_states != 1 => {
            return Err(Error::config(
                "bandit_basis instances need horizon = 1, n_states = 1 and dim = n_actions",
            ));
        }
        _ => {}
    }
    if let InitialStateMode::Fixed { state } = initial_state {
        if state >= n_states {
            return Err(Error::config(format!("fixed initial state {state} out of range")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi: Vec<Vec<Vec<f64>>> = (0..n_states)
        .map(|s| {
            (0..n_actions)
                .map(|a| match kind {
                    InstanceKind::OneHot => {
                        let mut e = vec![0.0; dim];
                        e[s * n_actions + a] = 1.0;
                        e
                    }
                    InstanceKind::BanditBasis => {
                        let mut e = vec![0.0; dim];
                        e[a] = 1.0;
                        e
                    }
                    InstanceKind::SimplexMixture => random_simplex_point(&mut rng, dim),
                })
                .collect()
        })
        .collect();

    // Keep linear rewards inside [eps, 1 - eps] so a perturbation of size eps
    // never needs clipping.
    let margin = eps_mis_target;
    let theta: Vec<Vec<f64>> = (0..horizon)
        .map(|_| (0..dim).map(|_| rng.gen_range(margin..=1.0 - margin)).collect())
        .collect();
    let mu: Vec<Vec<Vec<f64>>> = (0..horizon.saturating_sub(1))
        .map(|_| (0..dim).map(|_| random_simplex_point(&mut rng, n_states)).collect())
        .collect();

    let mut perturb = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let reward_mean: Vec<Vec<Vec<f64>>> = theta
        .iter()
        .map(|t| {
            phi.iter()
                .map(|actions| {
                    actions
                        .iter()
                        .map(|x| {
                            let base = linear_reward(x, t);
                            let sign = if perturb.gen::<bool>() { 1.0 } else { -1.0 };
                            (base + sign * eps_mis_target).clamp(0.0, 1.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let transition: Vec<Vec<Vec<Vec<f64>>>> = mu
        .iter()
        .map(|m| {
            phi.iter()
                .map(|actions| {
                    actions
                        .iter()
                        .map(|x| {
                            let base = linear_transition(x, m);
                            perturb_distribution(&mut perturb, &base, eps_mis_target)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut spec = MlmdpSpec {
        spec_version: SPEC_VERSION,
        n_states,
        n_actions,
        horizon,
        dim,
        phi,
        theta,
        mu,
        reward_mean,
        transition,
        eps_mis_target,
        eps_mis_realized: 0.0,
        initial_state,
    };
    let report = validate_spec(&spec);
    spec.eps_mis_realized = report.eps_mis_realized;
    let report = validate_spec(&spec);
    if !report.is_valid() {
        return Err(Error::logic(format!(
            "generated instance failed validation: {:?}",
            report.violations
        )));
    }
    Ok(spec)
}
