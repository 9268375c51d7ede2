//! Critic-guided controlled generation with a frozen Markov language model.
//!
//! A value function `V(x₁:t) ≈ P(a | x₁:t)` is learned by temporal-difference
//! regression on rollouts of the frozen LM, then used at decode time to
//! reweight the most probable next tokens by `V(x≤t) / V(x<t)`. For DFA
//! attributes an exact dynamic-programming oracle provides ground truth.

pub mod artifact;
pub mod attribute;
pub mod cli;
pub mod config;
pub mod critic;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod remote;
pub mod rollout;
pub mod steer;
pub mod vocab;

pub use attribute::{DfaAttribute, LexiconScorer, RewardModel};
pub use critic::{Critic, FeatureSpec, GaeConfig, OptimizerState};
pub use error::{Error, Result};
pub use lm::{Distribution, MarkovLm};
pub use oracle::OracleTable;
pub use rollout::{RolloutConfig, Trajectory};
pub use steer::{DecodeStrategy, SteerConfig, ValueFn};
pub use vocab::{TokenId, TokenSequence, Vocabulary};
