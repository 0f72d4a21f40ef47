//! Log-linear softmax policy and tanh-bounded reward model.
//!
//! The policy is `π_θ(y|x) ∝ exp(θ·ψ(x,y))` over the finite candidate set of
//! `x`. Its score and Hessian have closed forms:
//!
//! ```text
//! ∇_θ log π_θ(y|x)  = ψ(x,y) − E_{y''∼π_θ(·|x)} ψ(x,y'')
//! ∇²_θ log π_θ(y|x) = −Cov_{y''∼π_θ(·|x)} ψ(x,y'')
//! ```
//!
//! The Hessian does not depend on the conditioning response `y`.
//!
//! The reward is `r_φ(x,y) = r_max · tanh(φ·ψ_r(x,y))`, so `exp(r_φ)` always
//! lies in `[exp(−r_max), exp(r_max)]` while staying smooth in `φ`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::numerics::{log_sum_exp, softmax};
use crate::task::TaskInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { theta: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub phi: Vec<f64>,
    pub r_max: f64,
}

impl RewardParams {
    pub fn new(phi: Vec<f64>, r_max: f64) -> Result<Self> {
        ensure!(r_max > 0.0 && r_max.is_finite(), Config, "r_max must be a positive finite bound, got {r_max}");
        ensure!(phi.iter().all(|v| v.is_finite()), Config, "reward parameters must be finite");
        Ok(Self { phi, r_max })
    }

    pub fn zeros(dim: usize, r_max: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], r_max)
    }

    pub fn dim(&self) -> usize {
        self.phi.len()
    }
}

fn check_policy_dim(theta: &PolicyParams, task: &TaskInstance) -> Result<()> {
    ensure!(
        theta.dim() == task.policy_dim(),
        Usage,
        "policy parameters have dim {} but the task's policy features have dim {}",
        theta.dim(),
        task.policy_dim()
    );
    Ok(())
}

fn check_reward_dim(phi: &RewardParams, task: &TaskInstance) -> Result<()> {
    ensure!(
        phi.dim() == task.reward_dim(),
        Usage,
        "reward parameters have dim {} but the task's reward features have dim {}",
        phi.dim(),
        task.reward_dim()
    );
    Ok(())
}

/// Softmax statistics of `π_θ(·|x)` shared by the log-prob, score, and
/// Hessian computations.
#[derive(Debug, Clone)]
pub struct PromptPolicy<'a> {
    task: &'a TaskInstance,
    x: usize,
    scores: Vec<f64>,
    log_norm: f64,
    probs: Vec<f64>,
    mean_features: Vec<f64>,
}

impl<'a> PromptPolicy<'a> {
    pub fn new(theta: &PolicyParams, task: &'a TaskInstance, x: usize) -> Result<Self> {
        task.check_prompt(x)?;
        check_policy_dim(theta, task)?;
        let feats = &task.features.policy[x];
        let scores: Vec<f64> = feats.iter().map(|f| dot(&theta.theta, f)).collect();
        let log_norm = log_sum_exp(&scores)?;
        let probs = softmax(&scores);
        let mut mean_features = vec![0.0; task.policy_dim()];
        for (p, f) in probs.iter().zip(feats) {
            axpy(*p, f, &mut mean_features);
        }
        Ok(Self { task, x, scores, log_norm, probs, mean_features })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob(&self, y: usize) -> Result<f64> {
        self.task.check_pair(self.x, y)?;
        Ok(self.scores[y] - self.log_norm)
    }

    pub fn grad_log_prob(&self, y: usize) -> Result<Vec<f64>> {
        self.task.check_pair(self.x, y)?;
        let f = self.task.policy_features(self.x, y);
        Ok(f.iter().zip(&self.mean_features).map(|(a, m)| a - m).collect())
    }

    /// `−Cov_{π_θ(·|x)}(ψ(x,·))`.
    pub fn hessian(&self) -> Matrix {
        let mut h = Matrix::zeros(self.task.policy_dim());
        for (p, f) in self.probs.iter().zip(&self.task.features.policy[self.x]) {
            if *p == 0.0 {
                continue;
            }
            let centered: Vec<f64> = f.iter().zip(&self.mean_features).map(|(a, m)| a - m).collect();
            h.add_outer(-p, &centered, &centered);
        }
        h
    }
}

/// `log π_θ(y|x)`.
pub fn policy_logprob(theta: &PolicyParams, task: &TaskInstance, x: usize, y: usize) -> Result<f64> {
    task.check_pair(x, y)?;
    PromptPolicy::new(theta, task, x)?.log_prob(y)
}

/// `∇_θ log π_θ(y|x)`.
pub fn policy_grad(theta: &PolicyParams, task: &TaskInstance, x: usize, y: usize) -> Result<Vec<f64>> {
    task.check_pair(x, y)?;
    PromptPolicy::new(theta, task, x)?.grad_log_prob(y)
}

/// `∇²_θ log π_θ(·|x)`; identical for every conditioning response.
pub fn policy_hessian(theta: &PolicyParams, task: &TaskInstance, x: usize) -> Result<Matrix> {
    Ok(PromptPolicy::new(theta, task, x)?.hessian())
}

pub fn reward_value(phi: &RewardParams, task: &TaskInstance, x: usize, y: usize) -> Result<f64> {
    task.check_pair(x, y)?;
    check_reward_dim(phi, task)?;
    Ok(phi.r_max * dot(&phi.phi, task.reward_features(x, y)).tanh())
}

/// `∇_φ r_φ(x,y) = r_max (1 − tanh²(φ·ψ_r)) ψ_r`.
pub fn reward_grad(phi: &RewardParams, task: &TaskInstance, x: usize, y: usize) -> Result<Vec<f64>> {
    task.check_pair(x, y)?;
    check_reward_dim(phi, task)?;
    let f = task.reward_features(x, y);
    let t = dot(&phi.phi, f).tanh();
    let scale = phi.r_max * (1.0 - t * t);
    Ok(f.iter().map(|v| scale * v).collect())
}

/// Explicit conditional distribution over each prompt's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPolicyTable {
    pub rows: Vec<Vec<f64>>,
}

impl ConditionalPolicyTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (x, row) in rows.iter().enumerate() {
            ensure!(row.iter().all(|p| p.is_finite() && *p >= 0.0), Domain, "row {x} has negative or non-finite entries");
            let total: f64 = row.iter().sum();
            ensure!((total - 1.0).abs() <= 1e-12 * row.len() as f64, Domain, "row {x} sums to {total}");
        }
        Ok(Self { rows })
    }

    /// The table induced by `π_θ`.
    pub fn from_policy(theta: &PolicyParams, task: &TaskInstance) -> Result<Self> {
        let rows = (0..task.n_prompts())
            .map(|x| PromptPolicy::new(theta, task, x).map(|p| p.probs))
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// `E_{x∼D_x} KL(self(·|x) ‖ other(·|x))`.
    pub fn expected_kl(&self, other: &Self, prompt_dist: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .zip(prompt_dist)
            .map(|((p, q), w)| if *w == 0.0 { 0.0 } else { w * kl_divergence(p, q) })
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    }
}

/// `KL(p ‖ q)` with `0 log 0 = 0`; `+∞` when `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else if qi == 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum()
}
