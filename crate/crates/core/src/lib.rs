pub mod agent;
pub mod bandit;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod invariants;
pub mod linalg;
pub mod mdp;
pub mod report;
pub mod verify;

pub use error::{Error, Result};
