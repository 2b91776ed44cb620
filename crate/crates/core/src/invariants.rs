//! Runtime-checkable properties of the phased-elimination learners.
//!
//! Each check is a pure function of quantities the learners already hold, so
//! the same predicates back the harness assertions, the `verify` suite and the
//! acceptance tests.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Slack for comparisons that are exact in real arithmetic.
pub const FLOAT_SLACK: f64 = 1e-12;
/// Tolerance for the regularizer norm-equivalence check.
pub const NORM_EQUIVALENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InvariantMode {
    /// Check every claim and abort the run on the first violating episode.
    PaperExactAssert,
    /// Check and record violations without aborting.
    #[default]
    Desk,
    /// Skip the checks entirely.
    Off,
}

impl InvariantMode {
    pub fn checks_enabled(self) -> bool {
        !matches!(self, InvariantMode::Off)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantKind {
    DatasetBound,
    StorageBound,
    PhaseOneExploration,
    ValueRange,
    WeightBound,
    RoundingError,
    NormEquivalence,
    ExplorationTrigger,
    CallCount,
    FeatureNorm,
    Validation,
}

impl InvariantKind {
    pub fn label(self) -> &'static str {
        match self {
            InvariantKind::DatasetBound => "dataset-bound",
            InvariantKind::StorageBound => "storage-bound",
            InvariantKind::PhaseOneExploration => "level>=2",
            InvariantKind::ValueRange => "value-range",
            InvariantKind::WeightBound => "weight-bound",
            InvariantKind::RoundingError => "rounding-error",
            InvariantKind::NormEquivalence => "norm-equivalence",
            InvariantKind::ExplorationTrigger => "exploration-trigger",
            InvariantKind::CallCount => "call-count",
            InvariantKind::FeatureNorm => "feature-norm",
            InvariantKind::Validation => "spec-validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantViolation {
    pub kind: InvariantKind,
    /// 1-based episode index, 0 when not tied to an episode.
    pub episode: usize,
    pub detail: String,
}

impl InvariantViolation {
    pub fn new(kind: InvariantKind, episode: usize, detail: impl Into<String>) -> Self {
        InvariantViolation {
            kind,
            episode,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] episode {}: {}", self.kind.label(), self.episode, self.detail)
    }
}

/// Upper bound on the number of exploratory episodes stored at level `level`
/// (1-based): `40 * 4^level * dim * level`.
pub fn dataset_bound(level: usize, dim: usize) -> f64 {
    40.0 * 4f64.powi(level as i32) * dim as f64 * level as f64
}

/// Upper bound on the Euclidean norm of a level-`level` weight vector:
/// `(2^level * dim * horizon)^4`.
pub fn weight_norm_bound(level: usize, dim: usize, horizon: usize) -> f64 {
    (2f64.powi(level as i32) * dim as f64 * horizon as f64).powi(4)
}

/// Per-episode bound on subroutine calls given the dataset sizes entering the
/// episode. `psi_sizes[h][l]` is indexed by 0-based step and level.
pub fn call_count_bound(psi_sizes: &[Vec<usize>], horizon: usize, episode: usize) -> usize {
    let targets: usize = psi_sizes
        .iter()
        .take(horizon.saturating_sub(1))
        .flat_map(|levels| levels.iter())
        .sum();
    (targets + horizon).min(horizon * episode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_match_closed_forms() {
        assert_eq!(dataset_bound(1, 4), 640.0);
        assert_eq!(dataset_bound(3, 4), 40.0 * 64.0 * 4.0 * 3.0);
        assert_eq!(weight_norm_bound(1, 2, 3), 12f64.powi(4));
    }

    #[test]
    fn call_bound_ignores_last_step_and_caps_at_hk() {
        let psi = vec![vec![3, 1], vec![2, 0], vec![100, 100]];
        assert_eq!(call_count_bound(&psi, 3, 10), 3 + 1 + 2 + 3);
        assert_eq!(call_count_bound(&psi, 3, 2), 6);
    }

    #[test]
    fn display_names_the_kind() {
        let v = InvariantViolation::new(InvariantKind::FeatureNorm, 0, "feature norm exceeds 1");
        assert!(v.to_string().contains("feature-norm"));
    }
}
