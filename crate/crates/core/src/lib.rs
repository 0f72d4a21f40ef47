//! Bilevel meta-learning of a shared reward model for preference learning
//! under distribution shift.
//!
//! An inner loop fine-tunes a log-linear policy with reward-weighted SGD; an
//! outer loop updates the reward model through the exact hypergradient of
//! the unrolled inner trajectory. Closed-form optimal policies, baselines,
//! and synthetic task distributions with known rewards come alongside.

pub mod domain;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod synth;
pub mod task;

pub use domain::{Example, HyperParams, PreferencePair, Prompt, Response};
pub use error::{Error, Result};
pub use models::{ConditionalPolicyTable, PolicyParams, RewardParams};
pub use task::{FeatureMap, TaskInstance};
