//! Value types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: usize,
    pub features: Vec<f64>,
    /// Token count `|y|`, used for length-normalized comparisons.
    pub length: u32,
}

/// A fine-tuning sample `z = (x, y)`, stored as indices into its task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: usize,
    pub response: usize,
}

impl Example {
    pub fn new(prompt: usize, response: usize) -> Self {
        Self { prompt, response }
    }
}

/// `(x, y, y')` with `y` preferred over `y'` for prompt `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub preferred: usize,
    pub dispreferred: usize,
}

impl PreferencePair {
    pub fn new(prompt: usize, preferred: usize, dispreferred: usize) -> Self {
        Self { prompt, preferred, dispreferred }
    }

    /// The same comparison with the label reversed.
    pub fn flipped(self) -> Self {
        Self { prompt: self.prompt, preferred: self.dispreferred, dispreferred: self.preferred }
    }
}

/// Step sizes and loop lengths for meta-training and adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Inner (policy) learning rate.
    pub alpha: f64,
    /// Outer (reward model) learning rate.
    pub eta: f64,
    /// Reward controlling factor; rewards enter as `exp(r / beta)`.
    pub beta: f64,
    /// Inner SGD steps per outer iteration.
    pub inner_steps: usize,
    /// Outer iterations.
    pub outer_steps: usize,
    pub seed: u64,
    /// Ridge coefficient on the inner fine-tuning loss.
    pub ridge: f64,
    /// Preference pairs averaged per outer update.
    pub outer_batch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            eta: 0.05,
            beta: 2.0,
            inner_steps: 50,
            outer_steps: 1000,
            seed: 0,
            ridge: 0.0,
            outer_batch: 1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.alpha.is_finite(), Config, "alpha must be > 0, got {}", self.alpha);
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), Config, "eta must be >= 0, got {}", self.eta);
        ensure!(self.beta > 0.0 && self.beta.is_finite(), Config, "beta must be > 0, got {}", self.beta);
        ensure!(self.ridge >= 0.0, Config, "ridge must be >= 0, got {}", self.ridge);
        ensure!(self.outer_batch >= 1, Config, "outer_batch must be >= 1");
        Ok(())
    }
}
