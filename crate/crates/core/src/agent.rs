//! The episode protocol every learner follows under the harness, plus
//! adapters for single-step learners and two reference policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bandit::{BanditAlgorithm, Choice};
use crate::env::{optimal_values, FeatureTable, MlmdpSpec};
use crate::error::{Error, Result};
use crate::invariants::InvariantViolation;

/// What a learner does at `(h, s)` under its current policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: usize,
    /// 1-based phase; `n_levels + 1` means a pure exploitation step.
    pub level: usize,
    pub explored: bool,
    /// Learner's own value estimate at `(h, s)`, if it keeps one.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EpisodeStats {
    /// Subroutine evaluations charged to this episode.
    pub calls: usize,
}

/// Protocol per 1-based episode `k`: `begin_episode(k)`, any number of
/// `decide` calls (which must be deterministic within the episode), one
/// `observe` per executed step, then `end_episode`.
pub trait Agent: Send {
    fn name(&self) -> &'static str;
    fn begin_episode(&mut self, k: usize) -> Result<()>;
    fn decide(&mut self, h: usize, s: usize) -> Result<Decision>;
    fn observe(&mut self, h: usize, s: usize, decision: &Decision, reward: f64, next_state: Option<usize>) -> Result<()>;
    fn end_episode(&mut self) -> Result<EpisodeStats>;
    /// `psi_sizes()[h][l]`: stored regression rows per 0-based step and level.
    fn psi_sizes(&self) -> Vec<Vec<usize>>;
    fn drain_violations(&mut self) -> Vec<InvariantViolation> {
        Vec::new()
    }
}

/// Runs a single-step learner on a horizon-1 environment; each state is a
/// context.
pub struct BanditAgent<B: BanditAlgorithm> {
    algo: B,
    features: FeatureTable,
    episode: usize,
    choices: Vec<Option<Choice>>,
}

impl<B: BanditAlgorithm> BanditAgent<B> {
    pub fn new(algo: B, spec: &MlmdpSpec) -> Result<Self> {
        if spec.horizon != 1 {
            return Err(Error::config(format!(
                "{} is a single-step learner but the environment has horizon {}",
                algo.name(),
                spec.horizon
            )));
        }
        if algo.dim() != spec.dim {
            return Err(Error::config(format!(
                "learner dimension {} does not match environment dimension {}",
                algo.dim(),
                spec.dim
            )));
        }
        Ok(BanditAgent {
            algo,
            features: spec.feature_table(),
            episode: 0,
            choices: vec![None; spec.n_states],
        })
    }

    pub fn algorithm(&self) -> &B {
        &self.algo
    }
}

impl<B: BanditAlgorithm> Agent for BanditAgent<B> {
    fn name(&self) -> &'static str {
        self.algo.name()
    }

    fn begin_episode(&mut self, k: usize) -> Result<()> {
        self.episode = k;
        self.choices.iter_mut().for_each(|c| *c = None);
        Ok(())
    }

    fn decide(&mut self, h: usize, s: usize) -> Result<Decision> {
        if h != 0 {
            return Err(Error::logic(format!("single-step learner asked for step {h}")));
        }
        let choice = match &self.choices[s] {
            Some(c) => c.clone(),
            None => {
                let c = self.algo.choose(self.features.state(s))?;
                self.choices[s] = Some(c.clone());
                c
            }
        };
        Ok(Decision { action: choice.action, level: choice.level, explored: choice.explored(), value: None })
    }

    fn observe(&mut self, _h: usize, s: usize, _decision: &Decision, reward: f64, _next: Option<usize>) -> Result<()> {
        let choice = self.choices[s]
            .clone()
            .ok_or_else(|| Error::logic("observe called before decide"))?;
        self.algo.update(self.episode, self.features.state(s), &choice, reward)
    }

    fn end_episode(&mut self) -> Result<EpisodeStats> {
        Ok(EpisodeStats { calls: 1 })
    }

    fn psi_sizes(&self) -> Vec<Vec<usize>> {
        vec![self.algo.psi_sizes()]
    }
}

/// Plays the exact optimal policy; its regret is identically zero.
pub struct OptimalAgent {
    pi_star: Vec<Vec<usize>>,
}

impl OptimalAgent {
    pub fn new(spec: &MlmdpSpec) -> Self {
        OptimalAgent { pi_star: optimal_values(spec).pi_star }
    }
}

impl Agent for OptimalAgent {
    fn name(&self) -> &'static str {
        "optimal"
    }

    fn begin_episode(&mut self, _k: usize) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, h: usize, s: usize) -> Result<Decision> {
        Ok(Decision { action: self.pi_star[h][s], level: 1, explored: false, value: None })
    }

    fn observe(&mut self, _: usize, _: usize, _: &Decision, _: f64, _: Option<usize>) -> Result<()> {
        Ok(())
    }

    fn end_episode(&mut self) -> Result<EpisodeStats> {
        Ok(EpisodeStats::default())
    }

    fn psi_sizes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

/// Draws a fresh uniformly random deterministic policy every episode.
pub struct UniformRandomAgent {
    rng: ChaCha8Rng,
    n_actions: usize,
    policy: Vec<Vec<usize>>,
}

impl UniformRandomAgent {
    pub fn new(spec: &MlmdpSpec, seed: u64) -> Self {
        UniformRandomAgent {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n_actions: spec.n_actions,
            policy: vec![vec![0; spec.n_states]; spec.horizon],
        }
    }
}

impl Agent for UniformRandomAgent {
    fn name(&self) -> &'static str {
        "uniform_random"
    }

    fn begin_episode(&mut self, _k: usize) -> Result<()> {
        for a in self.policy.iter_mut().flatten() {
            *a = self.rng.gen_range(0..self.n_actions);
        }
        Ok(())
    }

    fn decide(&mut self, h: usize, s: usize) -> Result<Decision> {
        Ok(Decision { action: self.policy[h][s], level: 1, explored: false, value: None })
    }

    fn observe(&mut self, _: usize, _: usize, _: &Decision, _: f64, _: Option<usize>) -> Result<()> {
        Ok(())
    }

    fn end_episode(&mut self) -> Result<EpisodeStats> {
        Ok(EpisodeStats::default())
    }

    fn psi_sizes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}
