//! Exact solutions of the KL-regularized inner problem.
//!
//! For a reference `D_{y|x}` and reward `r_φ`, the maximizer of
//! `E_x[E_{y∼π} r_φ − β KL(π(·|x) ‖ D_{y|x})]` is the reweighted reference
//! `π*(y|x) = D_{y|x}(y) exp(r_φ(x,y)/β) / Z(x)`. Minimizing the expected
//! fine-tuning loss `E_{(x,y)∼D}[−log π_θ(y|x) exp(r_φ/β)]` recovers `π*`
//! whenever the policy class contains it, which the tabular class always does.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::linalg::{axpy, dot, norm};
use crate::models::{ConditionalPolicyTable, PolicyParams, PromptPolicy, RewardParams};
use crate::objectives::{reward_weight, LossValue};
use crate::task::TaskInstance;

/// `Z(x) = Σ_y D_{y|x}(y) exp(r_φ(x,y)/β)`.
pub fn partition(task: &TaskInstance, phi: &RewardParams, beta: f64, x: usize) -> Result<f64> {
    ensure!(beta > 0.0, Usage, "beta must be positive");
    task.check_prompt(x)?;
    let mut z = 0.0;
    for (y, d) in task.reference[x].iter().enumerate() {
        z += d * reward_weight(phi, task, x, y, beta)?;
    }
    Ok(z)
}

/// `π*(y|x) = D_{y|x}(y) exp(r_φ(x,y)/β) / Z(x)` for every prompt.
pub fn optimal_policy(task: &TaskInstance, phi: &RewardParams, beta: f64) -> Result<ConditionalPolicyTable> {
    ensure!(beta > 0.0, Usage, "beta must be positive");
    let mut rows = Vec::with_capacity(task.n_prompts());
    for x in 0..task.n_prompts() {
        let z = partition(task, phi, beta, x)?;
        let row = task.reference[x]
            .iter()
            .enumerate()
            .map(|(y, d)| Ok(d * reward_weight(phi, task, x, y, beta)? / z))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(ConditionalPolicyTable { rows })
}

/// Closed-form minimizer for tabular tasks: logits
/// `log D_{y|x}(y) + r_φ(x,y)/β`. Requires a strictly positive reference,
/// since zero entries are only reached in the limit `θ → −∞`.
pub fn tabular_inner_minimizer(task: &TaskInstance, phi: &RewardParams, beta: f64) -> Result<PolicyParams> {
    ensure!(task.tabular, Usage, "tabular_inner_minimizer needs one-hot (tabular) features");
    ensure!(beta > 0.0, Usage, "beta must be positive");
    let mut theta = vec![0.0; task.policy_dim()];
    for x in 0..task.n_prompts() {
        for (y, d) in task.reference[x].iter().enumerate() {
            ensure!(*d > 0.0, Domain, "reference probability of ({x}, {y}) is zero; no finite minimizer");
            theta[task.flat_index(x, y)] = d.ln() + crate::models::reward_value(phi, task, x, y)? / beta;
        }
    }
    Ok(PolicyParams::new(theta))
}

/// Exact `E_{x∼D_x, y∼D_{y|x}}[ℓ_FT(φ, θ, (x,y))]` and its θ-gradient.
pub fn expected_ft_loss(phi: &RewardParams, theta: &PolicyParams, task: &TaskInstance, beta: f64, ridge: f64) -> Result<LossValue> {
    ensure!(beta > 0.0, Usage, "beta must be positive");
    let mut value = 0.5 * ridge * dot(&theta.theta, &theta.theta);
    let mut grad: Vec<f64> = theta.theta.iter().map(|t| ridge * t).collect();
    for x in 0..task.n_prompts() {
        let wx = task.prompt_dist[x];
        if wx == 0.0 {
            continue;
        }
        let policy = PromptPolicy::new(theta, task, x)?;
        for (y, d) in task.reference[x].iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let c = wx * d * reward_weight(phi, task, x, y, beta)?;
            value -= c * policy.log_prob(y)?;
            axpy(-c, &policy.grad_log_prob(y)?, &mut grad);
        }
    }
    Ok(LossValue { value, grad: Some(grad) })
}

/// Outcome of [`brute_force_inner_min`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerMinimum {
    pub theta: PolicyParams,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the budget ran out before the gradient tolerance was met.
    pub converged: bool,
}

pub const BRUTE_FORCE_GRAD_TOL: f64 = 1e-10;

/// Full-batch gradient descent with backtracking line search on the exact
/// expected fine-tuning loss, started from `theta0`.
///
/// Once the Armijo decrease falls below the resolution of the loss value the
/// search switches to requiring a smaller gradient norm, which still
/// separates good from bad steps near the minimizer.
pub fn brute_force_inner_min(
    task: &TaskInstance,
    phi: &RewardParams,
    beta: f64,
    ridge: f64,
    budget: usize,
    theta0: &PolicyParams,
) -> Result<InnerMinimum> {
    ensure!(task.policy_dim() <= 64, Usage, "brute-force minimizer is meant for small problems (p = {})", task.policy_dim());
    let mut theta = theta0.clone();
    let mut current = expected_ft_loss(phi, &theta, task, beta, ridge)?;
    let mut gnorm = norm(current.grad());
    let mut step = 1.0;
    let mut iterations = 0;
    while gnorm > BRUTE_FORCE_GRAD_TOL && iterations < budget {
        iterations += 1;
        let g = current.grad.clone().unwrap_or_default();
        let mut accepted = None;
        let mut trial_step = step * 2.0;
        for _ in 0..80 {
            let trial = PolicyParams::new(theta.theta.iter().zip(&g).map(|(t, gi)| t - trial_step * gi).collect());
            let next = expected_ft_loss(phi, &trial, task, beta, ridge)?;
            let decrease = current.value - next.value;
            let predicted = trial_step * gnorm * gnorm;
            let resolution = 1e-13 * current.value.abs().max(1.0);
            let ok = if predicted > resolution {
                decrease >= 1e-4 * predicted
            } else {
                norm(next.grad()) < gnorm
            };
            if ok {
                accepted = Some((trial, next));
                break;
            }
            trial_step *= 0.5;
        }
        let Some((trial, next)) = accepted else { break };
        step = trial_step;
        theta = trial;
        current = next;
        gnorm = norm(current.grad());
    }
    Ok(InnerMinimum {
        theta,
        loss: current.value,
        grad_norm: gnorm,
        iterations,
        converged: gnorm <= BRUTE_FORCE_GRAD_TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::RewardParams;

    fn task() -> TaskInstance {
        TaskInstance::tabular(vec![0.3, 0.7], vec![vec![0.5, 0.5], vec![0.1, 0.2, 0.7]], None, None).unwrap()
    }

    #[test]
    fn partition_examples() {
        let task = task();
        let zero = RewardParams::zeros(5, 1.0).unwrap();
        assert!((partition(&task, &zero, 0.8, 1).unwrap() - 1.0).abs() < 1e-15);
        let c: f64 = 0.6;
        let phi = RewardParams::new(vec![c.atanh(); 5], 1.0).unwrap();
        let z = partition(&task, &phi, 0.8, 0).unwrap();
        assert!((z - (c / 0.8).exp()).abs() < 1e-14);
    }

    #[test]
    fn zero_reward_recovers_reference() {
        let task = task();
        let pi = optimal_policy(&task, &RewardParams::zeros(5, 2.0).unwrap(), 1.5).unwrap();
        assert!(pi.max_abs_diff(&ConditionalPolicyTable { rows: task.reference.clone() }) < 1e-15);
    }

    #[test]
    fn two_way_closed_form() {
        // Uniform reference and r = (β ln 2, 0): weights (2, 1) → (2/3, 1/3).
        let beta = 0.9;
        let task = TaskInstance::tabular(vec![1.0], vec![vec![0.5, 0.5]], None, None).unwrap();
        let r_max = 2.0;
        let target: f64 = beta * 2f64.ln();
        let phi = RewardParams::new(vec![(target / r_max).atanh(), 0.0], r_max).unwrap();
        let pi = optimal_policy(&task, &phi, beta).unwrap();
        assert!((pi.rows[0][0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((pi.rows[0][1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_reference_entries_are_inherited() {
        let task = TaskInstance::tabular(vec![1.0], vec![vec![0.0, 1.0]], None, None).unwrap();
        let phi = RewardParams::new(vec![0.5, -0.2], 1.0).unwrap();
        let pi = optimal_policy(&task, &phi, 1.0).unwrap();
        assert_eq!(pi.rows[0], vec![0.0, 1.0]);
        assert!(matches!(tabular_inner_minimizer(&task, &phi, 1.0), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn tabular_minimizer_requires_tabular_task() {
        let mut t = task();
        t.tabular = false;
        let phi = RewardParams::zeros(5, 1.0).unwrap();
        assert!(matches!(tabular_inner_minimizer(&t, &phi, 1.0), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn brute_force_flags_exhausted_budget() {
        let task = task();
        let phi = RewardParams::new(vec![0.4, -0.3, 0.2, 0.9, -0.5], 1.0).unwrap();
        let out = brute_force_inner_min(&task, &phi, 1.0, 0.0, 2, &PolicyParams::zeros(5)).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        let full = brute_force_inner_min(&task, &phi, 1.0, 0.0, 100_000, &PolicyParams::zeros(5)).unwrap();
        assert!(full.converged, "grad norm {}", full.grad_norm);
    }
}
