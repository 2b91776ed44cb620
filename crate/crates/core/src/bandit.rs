//! Single-step (contextual bandit) learners.
//!
//! Every learner splits a round into [`BanditAlgorithm::choose`], which is a
//! pure function of the current state and context, and
//! [`BanditAlgorithm::update`], which absorbs the realized reward. Episodes
//! are 1-based. Ties are broken toward the lowest action index.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::env::bernoulli_reward;
use crate::error::{Error, Result};
use crate::linalg::{induced_norm, GramState};

/// Ridge regressor `Lambda = lambda I + sum x x^T`, `w = Lambda^{-1} sum x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditRegressor {
    gram: GramState,
    rhs: DVector<f64>,
    weights: DVector<f64>,
    psi: Vec<usize>,
}

impl BanditRegressor {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        Ok(BanditRegressor {
            gram: GramState::new(dim, lambda)?,
            rhs: DVector::zeros(dim),
            weights: DVector::zeros(dim),
            psi: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.dim()
    }

    pub fn gram(&self) -> &GramState {
        &self.gram
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Episodes absorbed so far, in order.
    pub fn psi(&self) -> &[usize] {
        &self.psi
    }

    pub fn norm(&self, x: &DVector<f64>) -> Result<f64> {
        induced_norm(self.gram.inv(), x)
    }

    pub fn score(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.weights)
    }

    pub fn add(&mut self, episode: usize, x: &DVector<f64>, reward: f64) -> Result<()> {
        self.gram.rank_one_update(x)?;
        self.rhs.axpy(reward, x, 1.0);
        self.weights = self.gram.solve(&self.rhs)?;
        self.psi.push(episode);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Explore,
    Exploit,
    Optimistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub action: usize,
    pub branch: Branch,
    /// 1-based phase at which the round ended.
    pub level: usize,
    /// `surviving[l - 1]` is the action set entering phase `l`.
    pub surviving: Vec<Vec<usize>>,
}

impl Choice {
    pub fn explored(&self) -> bool {
        self.branch == Branch::Explore
    }
}

pub trait BanditAlgorithm: Send {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn choose(&self, features: &[DVector<f64>]) -> Result<Choice>;
    fn update(&mut self, episode: usize, features: &[DVector<f64>], choice: &Choice, reward: f64) -> Result<()>;
    /// Stored regression rows per level.
    fn psi_sizes(&self) -> Vec<usize>;
}

fn check_context(features: &[DVector<f64>], dim: usize) -> Result<()> {
    if features.is_empty() {
        return Err(Error::logic("empty action set"));
    }
    if let Some(x) = features.iter().find(|x| x.len() != dim) {
        return Err(Error::config(format!(
            "feature of length {} for a {dim}-dimensional learner",
            x.len()
        )));
    }
    Ok(())
}

/// First index attaining the maximum of `value` over `candidates`.
pub(crate) fn argmax_by<F>(candidates: &[usize], mut value: F) -> Result<(usize, f64)>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for &a in candidates {
        let v = value(a)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.ok_or_else(|| Error::logic("all actions eliminated"))
}

fn check_level(choice: &Choice, n_levels: usize) -> Result<usize> {
    if choice.level == 0 || choice.level > n_levels {
        return Err(Error::logic(format!(
            "explored level {} outside 1..={n_levels}",
            choice.level
        )));
    }
    Ok(choice.level - 1)
}

/// Explores while some action is more uncertain than `thres`, otherwise
/// plays greedily. Learns only from explored rounds.
#[derive(Debug, Clone)]
pub struct Expl3 {
    thres: f64,
    reg: BanditRegressor,
}

impl Expl3 {
    pub fn new(dim: usize, thres: f64) -> Result<Self> {
        if !(thres.is_finite() && thres > 0.0) {
            return Err(Error::config(format!("thres must be positive, got {thres}")));
        }
        Ok(Expl3 { thres, reg: BanditRegressor::new(dim, 1.0)? })
    }

    pub fn regressor(&self) -> &BanditRegressor {
        &self.reg
    }
}

impl BanditAlgorithm for Expl3 {
    fn name(&self) -> &'static str {
        "expl3"
    }

    fn dim(&self) -> usize {
        self.reg.dim()
    }

    fn choose(&self, features: &[DVector<f64>]) -> Result<Choice> {
        check_context(features, self.dim())?;
        let all: Vec<usize> = (0..features.len()).collect();
        let (a_norm, max_norm) = argmax_by(&all, |a| self.reg.norm(&features[a]))?;
        let (action, branch) = if max_norm > self.thres {
            (a_norm, Branch::Explore)
        } else {
            (argmax_by(&all, |a| Ok(self.reg.score(&features[a])))?.0, Branch::Exploit)
        };
        Ok(Choice { action, branch, level: 1, surviving: vec![all] })
    }

    fn update(&mut self, episode: usize, features: &[DVector<f64>], choice: &Choice, reward: f64) -> Result<()> {
        if choice.explored() {
            self.reg.add(episode, &features[choice.action], reward)?;
        }
        Ok(())
    }

    fn psi_sizes(&self) -> Vec<usize> {
        vec![self.reg.psi().len()]
    }
}

fn level_regressors(dim: usize, levels: usize) -> Result<Vec<BanditRegressor>> {
    if levels == 0 {
        return Err(Error::config("number of levels L must be at least 1"));
    }
    (0..levels).map(|_| BanditRegressor::new(dim, 1.0)).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config(format!("bonus scale must be positive, got {alpha}")));
    }
    Ok(())
}

/// Phased elimination: phase `l` explores above uncertainty `2^-l`, otherwise
/// drops actions more than `2^(1-l) alpha_b` below the phase leader.
#[derive(Debug, Clone)]
pub struct SupLinUcbVar {
    alpha_b: f64,
    levels: Vec<BanditRegressor>,
}

impl SupLinUcbVar {
    pub fn new(dim: usize, n_levels: usize, alpha_b: f64) -> Result<Self> {
        check_alpha(alpha_b)?;
        Ok(SupLinUcbVar { alpha_b, levels: level_regressors(dim, n_levels)? })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &BanditRegressor {
        &self.levels[l - 1]
    }
}

impl BanditAlgorithm for SupLinUcbVar {
    fn name(&self) -> &'static str {
        "sup_lin_ucb_var"
    }

    fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    fn choose(&self, features: &[DVector<f64>]) -> Result<Choice> {
        check_context(features, self.dim())?;
        let n_levels = self.levels.len();
        let mut active: Vec<usize> = (0..features.len()).collect();
        let mut surviving = Vec::with_capacity(n_levels);
        for l in 1..=n_levels {
            let reg = &self.levels[l - 1];
            surviving.push(active.clone());
            let (a_norm, max_norm) = argmax_by(&active, |a| reg.norm(&features[a]))?;
            if max_norm > 0.5f64.powi(l as i32) {
                return Ok(Choice { action: a_norm, branch: Branch::Explore, level: l, surviving });
            }
            let (leader, best) = argmax_by(&active, |a| Ok(reg.score(&features[a])))?;
            if l == n_levels {
                return Ok(Choice { action: leader, branch: Branch::Exploit, level: l, surviving });
            }
            let gap = 2.0 * 0.5f64.powi(l as i32) * self.alpha_b;
            active.retain(|&a| reg.score(&features[a]) >= best - gap);
            if active.is_empty() {
                return Err(Error::logic("all actions eliminated"));
            }
        }
        unreachable!("loop returns at the last level")
    }

    fn update(&mut self, episode: usize, features: &[DVector<f64>], choice: &Choice, reward: f64) -> Result<()> {
        if choice.explored() {
            let idx = check_level(choice, self.levels.len())?;
            self.levels[idx].add(episode, &features[choice.action], reward)?;
        }
        Ok(())
    }

    fn psi_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|r| r.psi().len()).collect()
    }
}

/// Number of phases after which the optimistic threshold `sqrt(d / K)` is
/// at least `2^-l`, so the phase loop always terminates.
pub fn takemura_levels(dim: usize, horizon_k: usize) -> usize {
    if horizon_k <= dim {
        return 1;
    }
    let l = (0.5 * (horizon_k as f64 / dim as f64).log2()).ceil() as usize;
    l.max(1)
}

/// Phased elimination with optimistic bonuses: plays the UCB leader once the
/// surviving uncertainty falls below `sqrt(d / K)`.
#[derive(Debug, Clone)]
pub struct Takemura {
    alpha_b: f64,
    optimistic_thres: f64,
    levels: Vec<BanditRegressor>,
}

impl Takemura {
    /// `n_levels = None` picks [`takemura_levels`].
    pub fn new(dim: usize, horizon_k: usize, n_levels: Option<usize>, alpha_b: f64) -> Result<Self> {
        check_alpha(alpha_b)?;
        if horizon_k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let n_levels = n_levels.unwrap_or_else(|| takemura_levels(dim, horizon_k));
        Ok(Takemura {
            alpha_b,
            optimistic_thres: (dim as f64 / horizon_k as f64).sqrt(),
            levels: level_regressors(dim, n_levels)?,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    fn ucb(&self, reg: &BanditRegressor, x: &DVector<f64>) -> Result<f64> {
        Ok(reg.score(x) + self.alpha_b * reg.norm(x)?)
    }
}

impl BanditAlgorithm for Takemura {
    fn name(&self) -> &'static str {
        "takemura"
    }

    fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    fn choose(&self, features: &[DVector<f64>]) -> Result<Choice> {
        check_context(features, self.dim())?;
        let n_levels = self.levels.len();
        let mut active: Vec<usize> = (0..features.len()).collect();
        let mut surviving = Vec::with_capacity(n_levels);
        for l in 1..=n_levels {
            let reg = &self.levels[l - 1];
            surviving.push(active.clone());
            let (a_norm, max_norm) = argmax_by(&active, |a| reg.norm(&features[a]))?;
            let thres = 0.5f64.powi(l as i32);
            // Past the last level the optimistic choice is the only safe one.
            if max_norm <= self.optimistic_thres || (l == n_levels && max_norm <= thres) {
                let (action, _) = argmax_by(&active, |a| self.ucb(reg, &features[a]))?;
                return Ok(Choice { action, branch: Branch::Optimistic, level: l, surviving });
            }
            if max_norm > thres {
                return Ok(Choice { action: a_norm, branch: Branch::Explore, level: l, surviving });
            }
            let (_, best) = argmax_by(&active, |a| self.ucb(reg, &features[a]))?;
            let gap = 2.0 * thres * self.alpha_b;
            let mut kept = Vec::with_capacity(active.len());
            for &a in &active {
                if self.ucb(reg, &features[a])? >= best - gap {
                    kept.push(a);
                }
            }
            active = kept;
        }
        unreachable!("loop returns at the last level")
    }

    fn update(&mut self, episode: usize, features: &[DVector<f64>], choice: &Choice, reward: f64) -> Result<()> {
        if choice.explored() {
            let idx = check_level(choice, self.levels.len())?;
            self.levels[idx].add(episode, &features[choice.action], reward)?;
        }
        Ok(())
    }

    fn psi_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|r| r.psi().len()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinUcbParams {
    pub lambda: f64,
    pub alpha: f64,
    pub eps_mis_input: f64,
    #[serde(rename = "K")]
    pub horizon_k: usize,
    pub delta: f64,
}

impl LinUcbParams {
    /// `1 + sqrt(2 d ln((lambda + K) / (lambda delta))) + 2 sqrt(K) eps`.
    pub fn bonus_scale(dim: usize, lambda: f64, horizon_k: usize, delta: f64, eps: f64) -> f64 {
        let k = horizon_k as f64;
        1.0 + (2.0 * dim as f64 * ((lambda + k) / (lambda * delta)).ln()).sqrt() + 2.0 * k.sqrt() * eps
    }

    /// Regularizer grown with the known misspecification: `lambda = 1 + K eps^2`.
    pub fn inflated(dim: usize, horizon_k: usize, eps_mis: f64, delta: f64) -> Result<Self> {
        let lambda = 1.0 + horizon_k as f64 * eps_mis * eps_mis;
        Self::with_lambda(dim, lambda, horizon_k, eps_mis, delta)
    }

    /// Unit regularizer with the same bonus formula.
    pub fn standard(dim: usize, horizon_k: usize, eps_mis: f64, delta: f64) -> Result<Self> {
        Self::with_lambda(dim, 1.0, horizon_k, eps_mis, delta)
    }

    pub fn custom(lambda: f64, alpha: f64) -> Result<Self> {
        let params = LinUcbParams { lambda, alpha, eps_mis_input: 0.0, horizon_k: 1, delta: 0.5 };
        params.validate()?;
        Ok(params)
    }

    fn with_lambda(dim: usize, lambda: f64, horizon_k: usize, eps_mis: f64, delta: f64) -> Result<Self> {
        if !(eps_mis.is_finite() && eps_mis >= 0.0) {
            return Err(Error::config(format!("eps_mis must be nonnegative, got {eps_mis}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {delta}")));
        }
        if horizon_k == 0 || dim == 0 {
            return Err(Error::config("K and dim must be at least 1"));
        }
        let params = LinUcbParams {
            lambda,
            alpha: Self::bonus_scale(dim, lambda, horizon_k, delta, eps_mis),
            eps_mis_input: eps_mis,
            horizon_k,
            delta,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(format!("lambda must be positive, got {}", self.lambda)));
        }
        check_alpha(self.alpha)
    }

    /// Squared exploration bonus of a unit basis feature before any data.
    pub fn initial_squared_bonus(&self) -> f64 {
        self.alpha * self.alpha / self.lambda
    }
}

/// Optimism over every past round: `argmax phi^T w + alpha ||phi||`.
#[derive(Debug, Clone)]
pub struct LinUcb {
    params: LinUcbParams,
    reg: BanditRegressor,
}

impl LinUcb {
    pub fn new(dim: usize, params: LinUcbParams) -> Result<Self> {
        params.validate()?;
        Ok(LinUcb { params, reg: BanditRegressor::new(dim, params.lambda)? })
    }

    pub fn params(&self) -> &LinUcbParams {
        &self.params
    }

    pub fn regressor(&self) -> &BanditRegressor {
        &self.reg
    }
}

impl BanditAlgorithm for LinUcb {
    fn name(&self) -> &'static str {
        "lin_ucb"
    }

    fn dim(&self) -> usize {
        self.reg.dim()
    }

    fn choose(&self, features: &[DVector<f64>]) -> Result<Choice> {
        check_context(features, self.dim())?;
        let all: Vec<usize> = (0..features.len()).collect();
        let alpha = self.params.alpha;
        let (action, _) = argmax_by(&all, |a| {
            Ok(self.reg.score(&features[a]) + alpha * self.reg.norm(&features[a])?)
        })?;
        Ok(Choice { action, branch: Branch::Optimistic, level: 1, surviving: vec![all] })
    }

    fn update(&mut self, episode: usize, features: &[DVector<f64>], choice: &Choice, reward: f64) -> Result<()> {
        self.reg.add(episode, &features[choice.action], reward)
    }

    fn psi_sizes(&self) -> Vec<usize> {
        vec![self.reg.psi().len()]
    }
}

/// One round of a synthetic or recorded contextual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub features: Vec<DVector<f64>>,
    /// Mean reward of each action; realized rewards are Bernoulli.
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSnapshot {
    pub weights: DVector<f64>,
    pub gram: DMatrix<f64>,
}

impl RegressorSnapshot {
    fn of(reg: &BanditRegressor) -> Self {
        RegressorSnapshot { weights: reg.weights().clone(), gram: reg.gram().gram().clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRound {
    pub context: Context,
    pub choice: Choice,
    pub uniform: f64,
    pub reward: f64,
    /// Per-level `(w_l^k, Lambda_l^k)` in effect when the round was chosen.
    pub snapshots: Vec<RegressorSnapshot>,
}

impl TraceRound {
    /// Phase whose dataset absorbed this round, if any.
    pub fn explored_level(&self) -> Option<usize> {
        self.choice.explored().then_some(self.choice.level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupLinUcbVarTrace {
    pub n_levels: usize,
    pub rounds: Vec<TraceRound>,
}

fn check_stream(contexts: &[Context], uniforms: &[f64]) -> Result<()> {
    if contexts.len() != uniforms.len() {
        return Err(Error::config(format!(
            "{} contexts but {} noise draws",
            contexts.len(),
            uniforms.len()
        )));
    }
    if let Some(c) = contexts.iter().find(|c| c.features.len() != c.means.len()) {
        return Err(Error::config(format!(
            "context with {} features but {} means",
            c.features.len(),
            c.means.len()
        )));
    }
    Ok(())
}

/// Runs phased elimination over a fixed context stream, realizing round `k`'s
/// reward as `1{uniforms[k] < mean}`, and records everything the ensemble
/// replay needs.
pub fn run_sup_lin_ucb_var_traced(
    contexts: &[Context],
    uniforms: &[f64],
    n_levels: usize,
    alpha_b: f64,
) -> Result<SupLinUcbVarTrace> {
    check_stream(contexts, uniforms)?;
    let dim = contexts
        .first()
        .and_then(|c| c.features.first())
        .map_or(1, |x| x.len());
    let mut algo = SupLinUcbVar::new(dim, n_levels, alpha_b)?;
    let mut rounds = Vec::with_capacity(contexts.len());
    for (i, (context, &u)) in contexts.iter().zip(uniforms).enumerate() {
        let snapshots = algo.levels.iter().map(RegressorSnapshot::of).collect();
        let choice = algo.choose(&context.features)?;
        let reward = bernoulli_reward(context.means[choice.action], u);
        algo.update(i + 1, &context.features, &choice, reward)?;
        rounds.push(TraceRound { context: context.clone(), choice, uniform: u, reward, snapshots });
    }
    Ok(SupLinUcbVarTrace { n_levels, rounds })
}

/// Contexts on which a single uncertainty-threshold learner at `2^-l` sees
/// exactly what phase `l` saw: the surviving features in rounds that phase
/// explored, and all-zero features elsewhere. Eliminated actions get zero
/// features; means are copied.
pub fn construct_tilde_contexts(trace: &SupLinUcbVarTrace, level: usize) -> Result<Vec<Context>> {
    if level == 0 || level > trace.n_levels {
        return Err(Error::config(format!("level {level} outside 1..={}", trace.n_levels)));
    }
    trace
        .rounds
        .iter()
        .enumerate()
        .map(|(i, round)| {
            let ctx = &round.context;
            let dim = ctx.features.first().map_or(0, |x| x.len());
            let mut features = vec![DVector::zeros(dim); ctx.features.len()];
            if round.explored_level() == Some(level) {
                let kept = round.choice.surviving.get(level - 1).ok_or_else(|| {
                    Error::logic(format!("round {} has no recorded action set for level {level}", i + 1))
                })?;
                for &a in kept {
                    features[a] = ctx.features[a].clone();
                }
            }
            Ok(Context { features, means: ctx.means.clone() })
        })
        .collect()
}

/// Runs the single-threshold learner on `contexts` with the shared noise and
/// returns the `(w^k, Lambda^k)` in effect at each round.
pub fn replay_expl3(contexts: &[Context], uniforms: &[f64], thres: f64) -> Result<Vec<RegressorSnapshot>> {
    check_stream(contexts, uniforms)?;
    let dim = contexts
        .first()
        .and_then(|c| c.features.first())
        .map_or(1, |x| x.len());
    let mut algo = Expl3::new(dim, thres)?;
    let mut out = Vec::with_capacity(contexts.len());
    for (i, (context, &u)) in contexts.iter().zip(uniforms).enumerate() {
        out.push(RegressorSnapshot::of(&algo.reg));
        let choice = algo.choose(&context.features)?;
        let reward = bernoulli_reward(context.means[choice.action], u);
        algo.update(i + 1, &context.features, &choice, reward)?;
    }
    Ok(out)
}

/// Largest entrywise gap between the replayed single-threshold learner and
/// phase `level` of the traced run, over all rounds and both `w` and `Lambda`.
pub fn ensemble_deviation(trace: &SupLinUcbVarTrace, level: usize) -> Result<f64> {
    let contexts = construct_tilde_contexts(trace, level)?;
    let uniforms: Vec<f64> = trace.rounds.iter().map(|r| r.uniform).collect();
    let replay = replay_expl3(&contexts, &uniforms, 0.5f64.powi(level as i32))?;
    let mut worst: f64 = 0.0;
    for (round, snap) in trace.rounds.iter().zip(&replay) {
        let phase = &round.snapshots[level - 1];
        worst = phase
            .weights
            .iter()
            .zip(snap.weights.iter())
            .chain(phase.gram.iter().zip(snap.gram.iter()))
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    Ok(worst)
}
