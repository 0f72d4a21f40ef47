//! Evaluation: length-normalized preference accuracy, exact expected true
//! reward, and running means of squared hypergradient norms.

use serde::{Deserialize, Serialize};

use crate::domain::PreferencePair;
use crate::error::{ensure, Result};
use crate::models::{PolicyParams, PromptPolicy};
use crate::task::TaskInstance;

/// Fraction of pairs where `log π(y|x)/|y| > log π(y'|x)/|y'|` strictly.
/// Ties count as incorrect.
pub fn pl_accuracy(theta: &PolicyParams, task: &TaskInstance, prefs: &[PreferencePair]) -> Result<f64> {
    ensure!(!prefs.is_empty(), Usage, "PL accuracy over an empty preference set");
    // Cache per-prompt log-probs; preference sets revisit prompts heavily.
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; task.n_prompts()];
    let mut correct = 0usize;
    for nu in prefs {
        task.check_preference(nu)?;
        if cache[nu.prompt].is_none() {
            let policy = PromptPolicy::new(theta, task, nu.prompt)?;
            let lp = (0..task.n_candidates(nu.prompt)).map(|y| policy.log_prob(y)).collect::<Result<Vec<_>>>()?;
            cache[nu.prompt] = Some(lp);
        }
        let lp = cache[nu.prompt].as_ref().expect("filled above");
        let normalized = |y: usize| lp[y] / f64::from(task.response(nu.prompt, y).length);
        if normalized(nu.preferred) > normalized(nu.dispreferred) {
            correct += 1;
        }
    }
    Ok(correct as f64 / prefs.len() as f64)
}

/// Exact `E_{x∼D_x} E_{y∼π_θ(·|x)} r*(x,y)`.
pub fn true_reward_eval(theta: &PolicyParams, task: &TaskInstance) -> Result<f64> {
    ensure!(task.true_reward.is_some(), Usage, "task has no ground-truth reward");
    let mut total = 0.0;
    for x in 0..task.n_prompts() {
        let policy = PromptPolicy::new(theta, task, x)?;
        let mut inner = 0.0;
        for (y, p) in policy.probs().iter().enumerate() {
            inner += p * task.true_reward_of(x, y)?;
        }
        total += task.prompt_dist[x] * inner;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// Number of outer iterations in the prefix.
    pub k: usize,
    /// `(1/k) Σ_{i<k} ‖g_i‖²`
    pub mean_sq_norm: f64,
}

/// Prefix running means of squared hypergradient norms, emitted every
/// `stride` iterations and at the final iteration.
pub fn grad_norm_trace(norms: &[f64], stride: usize) -> Result<Vec<TracePoint>> {
    ensure!(stride >= 1, Usage, "trace stride must be >= 1");
    let mut out = Vec::new();
    let mut sum = 0.0;
    for (i, n) in norms.iter().enumerate() {
        sum += n * n;
        let k = i + 1;
        if k % stride == 0 || k == norms.len() {
            out.push(TracePoint { k, mean_sq_norm: sum / k as f64 });
        }
    }
    Ok(out)
}

/// Running mean of squared norms over the first `k` iterations.
pub fn running_mean_sq_at(norms: &[f64], k: usize) -> Result<f64> {
    ensure!(k >= 1 && k <= norms.len(), Usage, "prefix {k} outside 1..={}", norms.len());
    Ok(norms[..k].iter().map(|n| n * n).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub split: String,
    pub pl_accuracy: f64,
    pub true_reward: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    pub fn mean_accuracy(&self, split: &str) -> Option<f64> {
        mean(self.tasks.iter().filter(|t| t.split == split).map(|t| t.pl_accuracy))
    }

    pub fn mean_true_reward(&self, split: &str) -> Option<f64> {
        mean(self.tasks.iter().filter(|t| t.split == split).map(|t| t.true_reward))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
