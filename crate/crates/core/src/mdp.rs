//! Episodic learners for linear MDPs: phased-elimination value iteration
//! ([`SupLsviUcb`]) and the single-regressor optimistic baseline
//! ([`LsviUcb`]).
//!
//! Steps are 0-based and levels 1-based. Dataset rows gathered during
//! episode `k` only become visible to the regressors in episode `k + 1`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Decision, EpisodeStats};
use crate::bandit::argmax_by;
use crate::env::{FeatureTable, MlmdpSpec};
use crate::error::{Error, Result};
use crate::invariants::{
    call_count_bound, dataset_bound, weight_norm_bound, InvariantKind, InvariantMode, InvariantViolation,
    FLOAT_SLACK, NORM_EQUIVALENCE_TOL,
};
use crate::linalg::{induced_norm, rounded_induced_norm, GramState, RoundedInverse, WeightVector};

/// Regularizer of every phase regressor.
pub const PHASE_REGULARIZER: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgoConfig {
    pub eps_tol: f64,
    pub delta: f64,
    pub alpha_scale: f64,
    pub episodes: usize,
    pub dim: usize,
    pub horizon: usize,
    levels: usize,
    alpha: f64,
    eps_rnd: f64,
}

/// `ceil(log2(sqrt(d) / eps_tol))`, snapping values within float noise of an
/// integer so exact powers of two are not pushed up a level.
pub fn level_count(dim: usize, eps_tol: f64) -> i64 {
    let x = ((dim as f64).sqrt() / eps_tol).log2();
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-12 {
        nearest as i64
    } else {
        x.ceil() as i64
    }
}

impl AlgoConfig {
    pub fn new(eps_tol: f64, delta: f64, alpha_scale: f64, episodes: usize, dim: usize, horizon: usize) -> Result<Self> {
        if !(eps_tol.is_finite() && eps_tol > 0.0) {
            return Err(Error::config(format!("eps_tol must be positive, got {eps_tol}")));
        }
        if dim == 0 || horizon == 0 {
            return Err(Error::config("dim and horizon must be at least 1"));
        }
        let levels = level_count(dim, eps_tol);
        if levels <= 0 {
            return Err(Error::config(format!(
                "eps_tol yields L ≤ 0 (eps_tol = {eps_tol}, sqrt(d) = {})",
                (dim as f64).sqrt()
            )));
        }
        if eps_tol >= 1.0 {
            return Err(Error::config(format!("eps_tol must lie in (0, 1), got {eps_tol}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(alpha_scale.is_finite() && alpha_scale > 0.0) {
            return Err(Error::config(format!("alpha_scale must be positive, got {alpha_scale}")));
        }
        if episodes == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let levels = levels as usize;
        let (d, h, l) = (dim as f64, horizon as f64, levels as f64);
        let alpha = alpha_scale * 42.0 * d * h * l * (3.0 * d * h * l / delta).ln().sqrt();
        let eps_rnd = 2f64.powi(-4 * levels as i32) / d;
        Ok(AlgoConfig { eps_tol, delta, alpha_scale, episodes, dim, horizon, levels, alpha, eps_rnd })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps_rnd(&self) -> f64 {
        self.eps_rnd
    }
}

/// Rounded quantities the subroutine reads at one level.
#[derive(Debug, Clone, Copy)]
pub struct PhaseView<'a> {
    pub rounded_weights: &'a DVector<f64>,
    pub rounded_inverse: &'a RoundedInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubroutineOutput {
    pub action: usize,
    pub value: f64,
    /// `1..=L` when exploring, `L + 1` when exploiting.
    pub level: usize,
    /// `surviving[l - 1]` is the action set entering phase `l`.
    pub surviving: Vec<Vec<usize>>,
    /// Rounded norm of the played feature when exploring.
    pub explore_norm: Option<f64>,
}

/// Phased elimination at one state: explore at the first phase with an
/// action more uncertain than `2^-l`, else narrow the action set to within
/// `2^(1-l) alpha` of the phase leader and, after the last phase, exploit.
pub fn subroutine_eval(
    features: &[DVector<f64>],
    phases: &[PhaseView<'_>],
    alpha: f64,
    horizon: usize,
) -> Result<SubroutineOutput> {
    if features.is_empty() {
        return Err(Error::logic("empty action set"));
    }
    if phases.is_empty() {
        return Err(Error::logic("no phases"));
    }
    let h_max = horizon as f64;
    let n_levels = phases.len();
    let mut active: Vec<usize> = (0..features.len()).collect();
    let mut surviving = Vec::with_capacity(n_levels);
    let mut prev_value = h_max;
    for (idx, phase) in phases.iter().enumerate() {
        let l = idx + 1;
        surviving.push(active.clone());
        let (a_norm, max_norm) =
            argmax_by(&active, |a| Ok(rounded_induced_norm(phase.rounded_inverse, &features[a])))?;
        let thres = 0.5f64.powi(l as i32);
        if max_norm > thres {
            return Ok(SubroutineOutput {
                action: a_norm,
                value: (prev_value + 2.0 * thres * alpha).clamp(0.0, h_max),
                level: l,
                surviving,
                explore_norm: Some(max_norm),
            });
        }
        let (leader, best) = argmax_by(&active, |a| Ok(features[a].dot(phase.rounded_weights)))?;
        if l == n_levels {
            return Ok(SubroutineOutput {
                action: leader,
                value: best.clamp(0.0, h_max),
                level: n_levels + 1,
                surviving,
                explore_norm: None,
            });
        }
        let cut = best - 2.0 * thres * alpha;
        active.retain(|&a| features[a].dot(phase.rounded_weights) >= cut);
        if active.is_empty() {
            return Err(Error::logic("all actions eliminated"));
        }
        prev_value = best;
    }
    unreachable!("loop returns at the last phase")
}

/// One stored exploratory transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiRow {
    pub episode: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<usize>,
}

/// Regression state for one `(h, l)` pair. Targets change every episode, so
/// the right-hand side is kept split into a reward part and one feature sum
/// per next state; weights are then `Lambda^{-1} (b_r + sum_s' V(s') b_s')`.
#[derive(Debug, Clone)]
struct TargetRegressor {
    gram: GramState,
    reward_rhs: DVector<f64>,
    next_sums: BTreeMap<usize, DVector<f64>>,
}

impl TargetRegressor {
    fn new(dim: usize, lambda: f64) -> Result<Self> {
        Ok(TargetRegressor {
            gram: GramState::new(dim, lambda)?,
            reward_rhs: DVector::zeros(dim),
            next_sums: BTreeMap::new(),
        })
    }

    fn absorb(&mut self, x: &DVector<f64>, reward: f64, next_state: Option<usize>) -> Result<()> {
        self.gram.rank_one_update(x)?;
        self.reward_rhs.axpy(reward, x, 1.0);
        if let Some(sp) = next_state {
            self.next_sums
                .entry(sp)
                .or_insert_with(|| DVector::zeros(x.len()))
                .axpy(1.0, x, 1.0);
        }
        Ok(())
    }

    fn weights(&self, next_value: impl Fn(usize) -> f64) -> Result<DVector<f64>> {
        let mut rhs = self.reward_rhs.clone();
        for (&sp, sum) in &self.next_sums {
            rhs.axpy(next_value(sp), sum, 1.0);
        }
        self.gram.solve(&rhs)
    }
}

#[derive(Debug, Clone)]
struct PhaseRegressor {
    target: TargetRegressor,
    weights: WeightVector,
    rounded_inverse: RoundedInverse,
    rows: Vec<PsiRow>,
}

/// Sup-LSVI-UCB driven through the [`Agent`] protocol.
pub struct SupLsviUcb {
    config: AlgoConfig,
    features: FeatureTable,
    n_states: usize,
    mode: InvariantMode,
    dataset_bound_override: Option<f64>,
    /// `phases[h][l - 1]`.
    phases: Vec<Vec<PhaseRegressor>>,
    /// Per-episode memo of subroutine outputs, `cache[h][s]`.
    cache: Vec<Vec<Option<SubroutineOutput>>>,
    episode: usize,
    target_evals: usize,
    pending: Vec<(usize, usize, PsiRow)>,
    violations: Vec<InvariantViolation>,
}

impl SupLsviUcb {
    pub fn new(spec: &MlmdpSpec, config: AlgoConfig, mode: InvariantMode) -> Result<Self> {
        if config.dim != spec.dim || config.horizon != spec.horizon {
            return Err(Error::config(format!(
                "algorithm configured for dim {} / horizon {} but environment has dim {} / horizon {}",
                config.dim, config.horizon, spec.dim, spec.horizon
            )));
        }
        let eps = config.eps_rnd();
        let phases = (0..spec.horizon)
            .map(|_| {
                (0..config.levels())
                    .map(|_| {
                        let target = TargetRegressor::new(spec.dim, PHASE_REGULARIZER)?;
                        Ok(PhaseRegressor {
                            weights: WeightVector::zeros(spec.dim, eps)?,
                            rounded_inverse: RoundedInverse::from_inverse(target.gram.inv(), eps)?,
                            target,
                            rows: Vec::new(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SupLsviUcb {
            config,
            features: spec.feature_table(),
            n_states: spec.n_states,
            mode,
            dataset_bound_override: None,
            phases,
            cache: vec![vec![None; spec.n_states]; spec.horizon],
            episode: 0,
            target_evals: 0,
            pending: Vec::new(),
            violations: Vec::new(),
        })
    }

    /// Replaces the stored-row ceiling used by the dataset check; a fault
    /// injection hook for exercising the violation path.
    pub fn set_dataset_bound_override(&mut self, bound: Option<f64>) {
        self.dataset_bound_override = bound;
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.config
    }

    /// Stored rows of `(h, l)`, in episode order.
    pub fn rows(&self, h: usize, l: usize) -> &[PsiRow] {
        &self.phases[h][l - 1].rows
    }

    pub fn weights(&self, h: usize, l: usize) -> &WeightVector {
        &self.phases[h][l - 1].weights
    }

    pub fn rounded_inverse(&self, h: usize, l: usize) -> &RoundedInverse {
        &self.phases[h][l - 1].rounded_inverse
    }

    pub fn gram(&self, h: usize, l: usize) -> &GramState {
        &self.phases[h][l - 1].target.gram
    }

    fn checks(&self) -> bool {
        self.mode.checks_enabled()
    }

    fn violation(&mut self, kind: InvariantKind, detail: String) {
        self.violations.push(InvariantViolation::new(kind, self.episode, detail));
    }

    /// Subroutine output at `(h, s)` for the current episode, memoized.
    fn eval(&mut self, h: usize, s: usize) -> Result<SubroutineOutput> {
        if let Some(out) = &self.cache[h][s] {
            return Ok(out.clone());
        }
        let views: Vec<PhaseView<'_>> = self.phases[h]
            .iter()
            .map(|p| PhaseView { rounded_weights: p.weights.rounded(), rounded_inverse: &p.rounded_inverse })
            .collect();
        let out = subroutine_eval(self.features.state(s), &views, self.config.alpha(), self.config.horizon)?;
        if self.checks() {
            if out.level == 1 {
                self.violation(
                    InvariantKind::PhaseOneExploration,
                    format!("subroutine explored at level 1 at (h={}, s={s})", h + 1),
                );
            }
            if !(0.0..=self.config.horizon as f64).contains(&out.value) {
                self.violation(
                    InvariantKind::ValueRange,
                    format!("value {} outside [0, {}] at (h={}, s={s})", out.value, self.config.horizon, h + 1),
                );
            }
        }
        self.cache[h][s] = Some(out.clone());
        Ok(out)
    }

    fn refresh_weights(&mut self, h: usize) -> Result<()> {
        let next_values: BTreeMap<usize, f64> = if h + 1 < self.config.horizon {
            let needed: Vec<usize> = {
                let mut keys: Vec<usize> = self.phases[h]
                    .iter()
                    .flat_map(|p| p.target.next_sums.keys().copied())
                    .collect();
                keys.sort_unstable();
                keys.dedup();
                keys
            };
            let mut out = BTreeMap::new();
            for sp in needed {
                if self.cache[h + 1][sp].is_none() {
                    self.target_evals += 1;
                }
                out.insert(sp, self.eval(h + 1, sp)?.value);
            }
            out
        } else {
            BTreeMap::new()
        };
        let eps = self.config.eps_rnd();
        for idx in 0..self.phases[h].len() {
            let phase = &mut self.phases[h][idx];
            let w = phase.target.weights(|sp| next_values[&sp])?;
            phase.weights = WeightVector::new(w, eps)?;
        }
        if self.checks() {
            self.check_phase_claims(h)?;
        }
        Ok(())
    }

    fn check_phase_claims(&mut self, h: usize) -> Result<()> {
        let d = self.config.dim;
        let eps = self.config.eps_rnd();
        let weight_slack = (d as f64).sqrt() * eps + FLOAT_SLACK;
        let norm_slack = (d as f64 * eps).sqrt() + FLOAT_SLACK;
        let mut found = Vec::new();
        for (idx, phase) in self.phases[h].iter().enumerate() {
            let l = idx + 1;
            let w_norm = phase.weights.entries().norm();
            let bound = weight_norm_bound(l, d, self.config.horizon);
            if w_norm > bound {
                found.push((
                    InvariantKind::WeightBound,
                    format!("||w_(h={},l={l})|| = {w_norm} exceeds {bound}", h + 1),
                ));
            }
            let diff = phase.weights.entries() - phase.weights.rounded();
            for s in 0..self.n_states {
                for (a, x) in self.features.state(s).iter().enumerate() {
                    let score_gap = x.dot(&diff).abs();
                    if score_gap > weight_slack {
                        found.push((
                            InvariantKind::RoundingError,
                            format!("score rounding gap {score_gap:e} at (h={}, l={l}, s={s}, a={a})", h + 1),
                        ));
                    }
                    let exact = induced_norm(phase.target.gram.inv(), x)?;
                    let rounded = rounded_induced_norm(&phase.rounded_inverse, x);
                    if (exact - rounded).abs() > norm_slack {
                        found.push((
                            InvariantKind::RoundingError,
                            format!("norm rounding gap {:e} at (h={}, l={l}, s={s}, a={a})", (exact - rounded).abs(), h + 1),
                        ));
                    }
                    if exact > x.norm() / 4.0 + NORM_EQUIVALENCE_TOL {
                        found.push((
                            InvariantKind::NormEquivalence,
                            format!("induced norm {exact} exceeds ||x||/4 = {} at (h={}, l={l}, s={s}, a={a})", x.norm() / 4.0, h + 1),
                        ));
                    }
                }
            }
        }
        for (kind, detail) in found {
            self.violation(kind, detail);
        }
        Ok(())
    }

    fn check_dataset_claims(&mut self, calls: usize, sizes_before: &[Vec<usize>]) {
        let d = self.config.dim;
        let k = self.episode;
        let mut found = Vec::new();
        for (h, phases) in self.phases.iter().enumerate() {
            for (idx, phase) in phases.iter().enumerate() {
                let l = idx + 1;
                let n = phase.rows.len();
                let bound = self.dataset_bound_override.unwrap_or_else(|| dataset_bound(l, d));
                if n as f64 > bound {
                    found.push((
                        InvariantKind::DatasetBound,
                        format!("|Psi_(h={},l={l})| = {n} exceeds {bound}", h + 1),
                    ));
                }
                let storage = dataset_bound(l, d).min(self.config.episodes as f64).min(k as f64);
                if n as f64 > storage {
                    found.push((
                        InvariantKind::StorageBound,
                        format!("(h={},l={l}) stores {n} rows, more than {storage}", h + 1),
                    ));
                }
            }
        }
        let bound = call_count_bound(sizes_before, self.config.horizon, k);
        if calls > bound {
            found.push((InvariantKind::CallCount, format!("{calls} subroutine calls exceed {bound}")));
        }
        for (kind, detail) in found {
            self.violation(kind, detail);
        }
    }
}

impl Agent for SupLsviUcb {
    fn name(&self) -> &'static str {
        "sup_lsvi_ucb"
    }

    fn begin_episode(&mut self, k: usize) -> Result<()> {
        self.episode = k;
        self.target_evals = 0;
        self.pending.clear();
        self.cache.iter_mut().flatten().for_each(|c| *c = None);
        for h in (0..self.config.horizon).rev() {
            self.refresh_weights(h)?;
        }
        Ok(())
    }

    fn decide(&mut self, h: usize, s: usize) -> Result<Decision> {
        let out = self.eval(h, s)?;
        Ok(Decision {
            action: out.action,
            level: out.level,
            explored: out.level <= self.config.levels(),
            value: Some(out.value),
        })
    }

    fn observe(&mut self, h: usize, s: usize, decision: &Decision, reward: f64, next_state: Option<usize>) -> Result<()> {
        if !decision.explored {
            return Ok(());
        }
        let l = decision.level;
        if self.checks() {
            let norm = self.cache[h][s].as_ref().and_then(|o| o.explore_norm);
            let thres = 0.5f64.powi(l as i32);
            if !norm.is_some_and(|n| n > thres) {
                self.violation(
                    InvariantKind::ExplorationTrigger,
                    format!("row added to (h={}, l={l}) without a recorded norm above {thres}", h + 1),
                );
            }
        }
        let row = PsiRow { episode: self.episode, state: s, action: decision.action, reward, next_state };
        self.pending.push((h, l, row));
        Ok(())
    }

    fn end_episode(&mut self) -> Result<EpisodeStats> {
        let sizes_before = self.psi_sizes();
        let eps = self.config.eps_rnd();
        for (h, l, row) in std::mem::take(&mut self.pending) {
            let x = self.features.get(row.state, row.action).clone();
            let phase = &mut self.phases[h][l - 1];
            phase.target.absorb(&x, row.reward, row.next_state)?;
            phase.rounded_inverse = RoundedInverse::from_inverse(phase.target.gram.inv(), eps)?;
            phase.rows.push(row);
        }
        let calls = self.target_evals + self.config.horizon;
        if self.checks() {
            self.check_dataset_claims(calls, &sizes_before);
        }
        Ok(EpisodeStats { calls })
    }

    fn psi_sizes(&self) -> Vec<Vec<usize>> {
        self.phases
            .iter()
            .map(|levels| levels.iter().map(|p| p.rows.len()).collect())
            .collect()
    }

    fn drain_violations(&mut self) -> Vec<InvariantViolation> {
        std::mem::take(&mut self.violations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsviUcbParams {
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

/// Optimistic value iteration with one ridge regressor per step over every
/// past episode.
pub struct LsviUcb {
    params: LsviUcbParams,
    horizon: usize,
    features: FeatureTable,
    mode: InvariantMode,
    regs: Vec<TargetRegressor>,
    weights: Vec<DVector<f64>>,
    /// `value_cache[h][s]` for the current episode.
    value_cache: Vec<Vec<Option<f64>>>,
    episode: usize,
    target_evals: usize,
    pending: Vec<(usize, usize, usize, f64, Option<usize>)>,
    violations: Vec<InvariantViolation>,
}

impl LsviUcb {
    pub fn new(spec: &MlmdpSpec, params: LsviUcbParams, mode: InvariantMode) -> Result<Self> {
        if !(params.alpha.is_finite() && params.alpha > 0.0) {
            return Err(Error::config(format!("alpha must be positive, got {}", params.alpha)));
        }
        let regs = (0..spec.horizon)
            .map(|_| TargetRegressor::new(spec.dim, params.lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(LsviUcb {
            params,
            horizon: spec.horizon,
            features: spec.feature_table(),
            mode,
            regs,
            weights: vec![DVector::zeros(spec.dim); spec.horizon],
            value_cache: vec![vec![None; spec.n_states]; spec.horizon],
            episode: 0,
            target_evals: 0,
            pending: Vec::new(),
            violations: Vec::new(),
        })
    }

    fn scores(&self, h: usize, s: usize) -> Result<Vec<f64>> {
        let inv = self.regs[h].gram.inv();
        self.features
            .state(s)
            .iter()
            .map(|x| Ok(x.dot(&self.weights[h]) + self.params.alpha * induced_norm(inv, x)?))
            .collect()
    }

    fn value(&mut self, h: usize, s: usize) -> Result<f64> {
        if let Some(v) = self.value_cache[h][s] {
            return Ok(v);
        }
        let best = self.scores(h, s)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
        let v = best.clamp(0.0, self.horizon as f64);
        self.value_cache[h][s] = Some(v);
        Ok(v)
    }
}

impl Agent for LsviUcb {
    fn name(&self) -> &'static str {
        "lsvi_ucb"
    }

    fn begin_episode(&mut self, k: usize) -> Result<()> {
        self.episode = k;
        self.target_evals = 0;
        self.pending.clear();
        self.value_cache.iter_mut().flatten().for_each(|c| *c = None);
        for h in (0..self.horizon).rev() {
            let mut next_values = BTreeMap::new();
            if h + 1 < self.horizon {
                let keys: Vec<usize> = self.regs[h].next_sums.keys().copied().collect();
                for sp in keys {
                    if self.value_cache[h + 1][sp].is_none() {
                        self.target_evals += 1;
                    }
                    next_values.insert(sp, self.value(h + 1, sp)?);
                }
            }
            self.weights[h] = self.regs[h].weights(|sp| next_values[&sp])?;
        }
        Ok(())
    }

    fn decide(&mut self, h: usize, s: usize) -> Result<Decision> {
        let scores = self.scores(h, s)?;
        let all: Vec<usize> = (0..scores.len()).collect();
        let (action, best) = argmax_by(&all, |a| Ok(scores[a]))?;
        let value = best.clamp(0.0, self.horizon as f64);
        if self.mode.checks_enabled() && !value.is_finite() {
            self.violations.push(InvariantViolation::new(
                InvariantKind::ValueRange,
                self.episode,
                format!("non-finite value at (h={}, s={s})", h + 1),
            ));
        }
        Ok(Decision { action, level: 1, explored: false, value: Some(value) })
    }

    fn observe(&mut self, h: usize, s: usize, decision: &Decision, reward: f64, next_state: Option<usize>) -> Result<()> {
        self.pending.push((h, s, decision.action, reward, next_state));
        Ok(())
    }

    fn end_episode(&mut self) -> Result<EpisodeStats> {
        for (h, s, a, reward, next) in std::mem::take(&mut self.pending) {
            let x = self.features.get(s, a).clone();
            self.regs[h].absorb(&x, reward, next)?;
        }
        Ok(EpisodeStats { calls: self.target_evals + self.horizon })
    }

    fn psi_sizes(&self) -> Vec<Vec<usize>> {
        self.regs.iter().map(|r| vec![r.gram.n_updates() as usize]).collect()
    }

    fn drain_violations(&mut self) -> Vec<InvariantViolation> {
        std::mem::take(&mut self.violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::round_up_scalar;
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn fresh_views(dim: usize, levels: usize, eps: f64) -> (Vec<DVector<f64>>, Vec<RoundedInverse>) {
        let inv = DMatrix::identity(dim, dim) / PHASE_REGULARIZER;
        (
            vec![DVector::zeros(dim); levels],
            (0..levels).map(|_| RoundedInverse::from_inverse(&inv, eps).unwrap()).collect(),
        )
    }

    fn views<'a>(w: &'a [DVector<f64>], r: &'a [RoundedInverse]) -> Vec<PhaseView<'a>> {
        w.iter()
            .zip(r)
            .map(|(w, r)| PhaseView { rounded_weights: w, rounded_inverse: r })
            .collect()
    }

    #[test]
    fn derived_constants() {
        let c = AlgoConfig::new(0.25, 0.1, 1.0, 10, 4, 3).unwrap();
        assert_eq!(c.levels(), 3);
        assert_eq!(c.eps_rnd(), 2f64.powi(-12) / 4.0);
        let by_hand = 42.0 * 4.0 * 3.0 * 3.0 * (108.0f64 / 0.1).ln().sqrt();
        assert!((c.alpha() - by_hand).abs() < 1e-9);
        assert_eq!(AlgoConfig::new(0.5, 0.1, 1.0, 10, 4, 3).unwrap().levels(), 2);
        assert_eq!(level_count(8, 0.25), 4);
    }

    #[test]
    fn degenerate_tolerance_is_rejected() {
        let err = AlgoConfig::new(2.0, 0.1, 1.0, 10, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("eps_tol yields L ≤ 0"));
        assert!(AlgoConfig::new(1.5, 0.1, 1.0, 10, 4, 1).is_err());
        assert!(AlgoConfig::new(0.25, 0.0, 1.0, 10, 4, 1).is_err());
        assert!(AlgoConfig::new(0.25, 0.1, 0.0, 10, 4, 1).is_err());
    }

    #[test]
    fn zero_features_exploit_with_zero_value() {
        let (w, r) = fresh_views(3, 4, 1e-6);
        let feats = vec![DVector::zeros(3); 5];
        let out = subroutine_eval(&feats, &views(&w, &r), 100.0, 3).unwrap();
        assert_eq!((out.action, out.level, out.value), (0, 5, 0.0));
        assert!(out.surviving.iter().all(|s| s.len() == 5));
    }

    #[test]
    fn first_episode_skips_level_two_for_unit_features() {
        // 1/16 is a multiple of eps_rnd = 2^(-4L) / d, so rounding leaves the
        // first-episode inverse untouched and a unit feature sits exactly on
        // the level-2 threshold 1/4, which is not strictly exceeded.
        let dim = 3;
        let c = AlgoConfig::new(0.2, 0.1, 1.0, 10, dim, 2).unwrap();
        assert_eq!(c.levels(), 4);
        let eps = c.eps_rnd();
        assert_eq!(round_up_scalar(1.0 / 16.0, eps), 1.0 / 16.0);
        let (w, r) = fresh_views(dim, c.levels(), eps);
        let feats = vec![v(&[0.6, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])];
        let out = subroutine_eval(&feats, &views(&w, &r), c.alpha(), c.horizon).unwrap();
        assert_eq!((out.level, out.action), (3, 1));
        assert_eq!(out.explore_norm, Some(0.25));
        // Phases 1 and 2 scored everything 0, so the value is clamp(0 + alpha / 4).
        assert_eq!(out.value, 2.0);

        let desk = AlgoConfig::new(0.2, 0.1, 0.001, 10, dim, 2).unwrap();
        let out = subroutine_eval(&feats, &views(&w, &r), desk.alpha(), 2).unwrap();
        assert_eq!(out.value, desk.alpha() / 4.0);
    }

    #[test]
    fn scalar_exploration_threshold() {
        let eps = 2f64.powi(-12);
        for n in [0usize, 1, 5, 20, 48, 100, 300, 1000] {
            let lam = 16.0 + n as f64;
            let r = RoundedInverse::from_inverse(&DMatrix::from_element(1, 1, 1.0 / lam), eps).unwrap();
            let w = DVector::zeros(1);
            let rs = vec![r.clone(), r.clone(), r.clone(), r];
            let ws = vec![w.clone(), w.clone(), w.clone(), w];
            let out = subroutine_eval(&[v(&[1.0])], &views(&ws, &rs), 1.0, 1).unwrap();
            let rounded = round_up_scalar(1.0 / lam, eps).sqrt();
            let expected = (1..=4).find(|&l| rounded > 0.5f64.powi(l as i32)).unwrap_or(5);
            assert_eq!(out.level, expected, "n = {n}");
        }
    }

    #[test]
    fn elimination_uses_the_phase_gap() {
        let dim = 2;
        let eps = 1e-9;
        let (mut w, r) = fresh_views(dim, 3, eps);
        // Make norms tiny by inflating the Gram; only scores matter here.
        let small = RoundedInverse::from_inverse(&(DMatrix::identity(2, 2) * 1e-4), eps).unwrap();
        let r: Vec<RoundedInverse> = r.iter().map(|_| small.clone()).collect();
        w[0] = v(&[1.0, 0.0]);
        let feats = vec![v(&[0.2, 0.0]), v(&[1.0, 0.0]), v(&[0.95, 0.0])];
        let out = subroutine_eval(&feats, &views(&w, &r), 0.1, 3).unwrap();
        // Phase 1 keeps scores within 2^0 * 0.1 of the leader 1.0.
        assert_eq!(out.surviving[1], vec![1, 2]);
        assert_eq!(out.level, 4);
    }

    #[test]
    fn single_scalar_sample_gives_one_seventeenth() {
        let mut reg = TargetRegressor::new(1, PHASE_REGULARIZER).unwrap();
        reg.absorb(&v(&[1.0]), 1.0, Some(0)).unwrap();
        let w = reg.weights(|_| 0.0).unwrap();
        assert!((w[0] - 1.0 / 17.0).abs() < 1e-15);
        let w = reg.weights(|_| 2.0).unwrap();
        assert!((w[0] - 3.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn grouped_targets_match_row_by_row_least_squares() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut reg = TargetRegressor::new(3, PHASE_REGULARIZER).unwrap();
        let mut rows = Vec::new();
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(0.0..0.6));
            let r: f64 = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            let sp = rng.gen_range(0..4usize);
            reg.absorb(&x, r, Some(sp)).unwrap();
            rows.push((x, r, sp));
        }
        let values = [0.3, 1.7, 2.0, 0.0];
        let grouped = reg.weights(|sp| values[sp]).unwrap();
        let mut gram = DMatrix::identity(3, 3) * PHASE_REGULARIZER;
        let mut rhs = DVector::zeros(3);
        for (x, r, sp) in &rows {
            gram += x * x.transpose();
            rhs += x * (r + values[*sp]);
        }
        let direct = gram.cholesky().unwrap().solve(&rhs);
        assert!((grouped - direct).amax() < 1e-10);
    }
}
