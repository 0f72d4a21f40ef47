//! Scalar losses: the reward-weighted fine-tuning loss, the preference loss,
//! the Bradley-Terry probability, reward-model MLE, SFT, and the exact
//! KL-regularized RL objective.

use crate::domain::{Example, PreferencePair};
use crate::error::{ensure, Result};
use crate::linalg::{axpy, dot};
use crate::models::{kl_divergence, reward_grad, reward_value, ConditionalPolicyTable, PolicyParams, PromptPolicy, RewardParams};
use crate::numerics::{log_logistic, logistic};
use crate::task::TaskInstance;

/// A loss value and, when requested, its gradient with respect to the
/// declared parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
}

impl LossValue {
    pub fn grad(&self) -> &[f64] {
        self.grad.as_deref().unwrap_or(&[])
    }
}

/// Reward weight `exp(r_φ(x,y) / β)`.
pub fn reward_weight(phi: &RewardParams, task: &TaskInstance, x: usize, y: usize, beta: f64) -> Result<f64> {
    Ok((reward_value(phi, task, x, y)? / beta).exp())
}

/// `ℓ_FT = −log π_θ(y|x) · exp(r_φ(x,y)/β) + (ridge/2)‖θ‖²`; gradient in θ.
pub fn loss_ft(phi: &RewardParams, theta: &PolicyParams, task: &TaskInstance, z: &Example, beta: f64, ridge: f64) -> Result<LossValue> {
    ensure!(beta > 0.0, Usage, "beta must be positive");
    ensure!(ridge >= 0.0, Usage, "ridge must be nonnegative");
    task.check_example(z)?;
    let weight = reward_weight(phi, task, z.prompt, z.response, beta)?;
    let policy = PromptPolicy::new(theta, task, z.prompt)?;
    let logp = policy.log_prob(z.response)?;
    let mut grad = policy.grad_log_prob(z.response)?;
    grad.iter_mut().zip(&theta.theta).for_each(|(g, t)| *g = -weight * *g + ridge * t);
    let value = -logp * weight + 0.5 * ridge * dot(&theta.theta, &theta.theta);
    Ok(LossValue { value, grad: Some(grad) })
}

/// `ℓ_PL = −log σ(log π_θ(y|x) − log π_θ(y'|x))`; gradient in θ.
///
/// The reward parameters influence this loss only through the θ it is
/// evaluated at, so it takes θ alone.
pub fn loss_pl(theta: &PolicyParams, task: &TaskInstance, nu: &PreferencePair) -> Result<LossValue> {
    task.check_preference(nu)?;
    let policy = PromptPolicy::new(theta, task, nu.prompt)?;
    let margin = policy.log_prob(nu.preferred)? - policy.log_prob(nu.dispreferred)?;
    let gw = policy.grad_log_prob(nu.preferred)?;
    let gl = policy.grad_log_prob(nu.dispreferred)?;
    let scale = -(1.0 - logistic(margin));
    let grad = gw.iter().zip(&gl).map(|(a, b)| scale * (a - b)).collect();
    Ok(LossValue { value: -log_logistic(margin), grad: Some(grad) })
}

/// `A = log π_θ(y|x) − log π_θ(y'|x)` and `∇_θ A` for a preference pair.
pub(crate) fn preference_margin(theta: &PolicyParams, task: &TaskInstance, nu: &PreferencePair) -> Result<(f64, Vec<f64>)> {
    task.check_preference(nu)?;
    let policy = PromptPolicy::new(theta, task, nu.prompt)?;
    let margin = policy.log_prob(nu.preferred)? - policy.log_prob(nu.dispreferred)?;
    // The mean-feature terms cancel: ∇A = ψ(x,y) − ψ(x,y').
    let grad = task
        .policy_features(nu.prompt, nu.preferred)
        .iter()
        .zip(task.policy_features(nu.prompt, nu.dispreferred))
        .map(|(a, b)| a - b)
        .collect();
    Ok((margin, grad))
}

/// Bradley-Terry probability `π(y|x) / (π(y|x) + π(y'|x))`.
pub fn bt_prob(theta: &PolicyParams, task: &TaskInstance, x: usize, y: usize, y_prime: usize) -> Result<f64> {
    let nu = PreferencePair::new(x, y, y_prime);
    task.check_preference(&nu)?;
    let policy = PromptPolicy::new(theta, task, x)?;
    Ok(logistic(policy.log_prob(y)? - policy.log_prob(y_prime)?))
}

/// Mean `−log σ(r_φ(x,y) − r_φ(x,y'))` over a batch; gradient in φ.
pub fn rm_mle_loss(phi: &RewardParams, task: &TaskInstance, batch: &[PreferencePair]) -> Result<LossValue> {
    ensure!(!batch.is_empty(), Usage, "reward-model loss over an empty batch");
    let mut value = 0.0;
    let mut grad = vec![0.0; phi.dim()];
    for nu in batch {
        let (v, g) = rm_pair_loss(phi, task, nu)?;
        value += v;
        axpy(1.0, &g, &mut grad);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossValue { value: value / n, grad: Some(grad) })
}

pub(crate) fn rm_pair_loss(phi: &RewardParams, task: &TaskInstance, nu: &PreferencePair) -> Result<(f64, Vec<f64>)> {
    task.check_preference(nu)?;
    let diff = reward_value(phi, task, nu.prompt, nu.preferred)? - reward_value(phi, task, nu.prompt, nu.dispreferred)?;
    let gw = reward_grad(phi, task, nu.prompt, nu.preferred)?;
    let gl = reward_grad(phi, task, nu.prompt, nu.dispreferred)?;
    let scale = -(1.0 - logistic(diff));
    Ok((-log_logistic(diff), gw.iter().zip(&gl).map(|(a, b)| scale * (a - b)).collect()))
}

/// Mean negative log-likelihood `−log π_θ(y|x)` over a batch; gradient in θ.
pub fn sft_loss(theta: &PolicyParams, task: &TaskInstance, batch: &[Example]) -> Result<LossValue> {
    ensure!(!batch.is_empty(), Usage, "SFT loss over an empty batch");
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.dim()];
    for z in batch {
        task.check_example(z)?;
        let policy = PromptPolicy::new(theta, task, z.prompt)?;
        value -= policy.log_prob(z.response)?;
        axpy(-1.0, &policy.grad_log_prob(z.response)?, &mut grad);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossValue { value: value / n, grad: Some(grad) })
}

/// `E_x[E_{y∼π_θ} r_φ − β KL(π_θ(·|x) ‖ D_{y|x})]`, enumerated exactly.
pub fn rlhf_objective_value(theta: &PolicyParams, phi: &RewardParams, task: &TaskInstance, beta: f64) -> Result<f64> {
    let table = ConditionalPolicyTable::from_policy(theta, task)?;
    rlhf_objective_of_table(&table, phi, task, beta)
}

/// As [`rlhf_objective_value`] for an explicit policy table. Returns `−∞`
/// when the policy puts mass where the reference has none.
pub fn rlhf_objective_of_table(table: &ConditionalPolicyTable, phi: &RewardParams, task: &TaskInstance, beta: f64) -> Result<f64> {
    ensure!(beta > 0.0, Usage, "beta must be positive");
    ensure!(table.rows.len() == task.n_prompts(), Usage, "policy table has {} rows for {} prompts", table.rows.len(), task.n_prompts());
    let mut total = 0.0;
    for (x, (row, wx)) in table.rows.iter().zip(&task.prompt_dist).enumerate() {
        ensure!(row.len() == task.n_candidates(x), Usage, "policy row {x} has the wrong width");
        if *wx == 0.0 {
            continue;
        }
        let mut expected_reward = 0.0;
        for (y, p) in row.iter().enumerate() {
            if *p > 0.0 {
                expected_reward += p * reward_value(phi, task, x, y)?;
            }
        }
        let kl = kl_divergence(row, &task.reference[x]);
        total += wx * (expected_reward - beta * kl);
    }
    Ok(total)
}
