//! Unrolled inner SGD and the analytical hypergradient through it.
//!
//! The inner loop runs `θ_{t+1} = θ_t − α ∇_θ ℓ_FT(φ, θ_t; z_t)` for `D` steps
//! with `ℓ_FT = −R_t F_t + (λ/2)‖θ‖²`, where `F_t = log π_{θ_t}(y_t|x_t)` and
//! `R_t = exp(r_φ(x_t,y_t)/β)`. Differentiating the recursion in φ gives
//!
//! ```text
//! ∂θ_{t+1}/∂φ = M_t ∂θ_t/∂φ + (α/β) R_t ∇_θF_t (∇_φ r_t)ᵀ,   ∂θ_0/∂φ = 0,
//! M_t = I + α R_t ∇²_θF_t − αλ I,
//! ```
//!
//! and the outer loss `ℓ_PL = −log σ(A)` with `A = log π_{θ_D}(y|x) − log π_{θ_D}(y'|x)`
//! has `∂ℓ_PL/∂θ_D = −(1 − σ(A)) ∇_θA`. Chaining,
//!
//! ```text
//! ∂ℓ_PL/∂φ = −(α/β)(1 − σ(A)) Σ_t R_t ∇_φ r_t ∇_θF_tᵀ M_{t+1} ⋯ M_{D−1} ∇_θA.
//! ```
//!
//! Each `M_j` is evaluated at its own step `j`. The product is applied to the
//! vector `∇_θA` from the right, so the whole sum costs `O(D p²)`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Example, PreferencePair};
use crate::error::{ensure, Result};
use crate::linalg::{axpy, cosine, dot, norm, sub, Matrix};
use crate::models::{reward_grad, PolicyParams, PromptPolicy, RewardParams};
use crate::numerics::{logistic, Rng};
use crate::objectives::{loss_pl, preference_margin, reward_weight};
use crate::synth::random_feature_task;
use crate::task::TaskInstance;

/// Everything the hypergradient needs from one inner step, cached at `θ_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerStep {
    pub example: Example,
    pub theta: Vec<f64>,
    /// `∇_θ F_t = ∇_θ log π_{θ_t}(y_t|x_t)`
    pub grad_logp: Vec<f64>,
    /// `∇²_θ F_t`
    pub hessian: Matrix,
    /// `R_t = exp(r_φ(x_t,y_t)/β)`
    pub reward_weight: f64,
    /// `∇_φ H_t = ∇_φ r_φ(x_t,y_t)`
    pub reward_grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerTrace {
    pub theta0: PolicyParams,
    pub steps: Vec<InnerStep>,
    pub theta_final: PolicyParams,
    pub alpha: f64,
    pub beta: f64,
    pub ridge: f64,
}

impl InnerTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Re-applies the stored updates from `θ_0`.
    pub fn replay(&self) -> PolicyParams {
        let theta = self.steps.iter().fold(self.theta0.theta.clone(), |theta, s| {
            sgd_step(&theta, &s.grad_logp, s.reward_weight, self.alpha, self.ridge)
        });
        PolicyParams::new(theta)
    }
}

/// `θ − α(−R ∇log π + λθ)`. Shared by the inner loop and trace replay so both
/// produce bit-identical iterates.
pub fn sgd_step(theta: &[f64], grad_logp: &[f64], weight: f64, alpha: f64, ridge: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(grad_logp)
        .map(|(t, g)| {
            let grad = -weight * g + ridge * t;
            t - alpha * grad
        })
        .collect()
}

/// Runs one inner SGD step per example in `stream`, recording the pieces the
/// hypergradient needs.
pub fn run_inner_sgd(
    phi: &RewardParams,
    theta0: &PolicyParams,
    task: &TaskInstance,
    stream: &[Example],
    alpha: f64,
    beta: f64,
    ridge: f64,
) -> Result<InnerTrace> {
    ensure!(alpha > 0.0, Usage, "alpha must be positive");
    ensure!(beta > 0.0, Usage, "beta must be positive");
    ensure!(theta0.dim() == task.policy_dim(), Usage, "theta0 has dim {} but the task needs {}", theta0.dim(), task.policy_dim());
    let mut theta = theta0.theta.clone();
    let mut steps = Vec::with_capacity(stream.len());
    for z in stream {
        task.check_example(z)?;
        let params = PolicyParams::new(theta);
        let policy = PromptPolicy::new(&params, task, z.prompt)?;
        let grad_logp = policy.grad_log_prob(z.response)?;
        let hessian = policy.hessian();
        let weight = reward_weight(phi, task, z.prompt, z.response, beta)?;
        let rgrad = reward_grad(phi, task, z.prompt, z.response)?;
        let next = sgd_step(&params.theta, &grad_logp, weight, alpha, ridge);
        steps.push(InnerStep {
            example: *z,
            theta: params.theta,
            grad_logp,
            hessian,
            reward_weight: weight,
            reward_grad: rgrad,
        });
        theta = next;
    }
    Ok(InnerTrace { theta0: theta0.clone(), steps, theta_final: PolicyParams::new(theta), alpha, beta, ridge })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypergradient {
    pub vector: Vec<f64>,
    /// Norm of each inner step's term in the sum, indexed by step.
    pub contributions: Vec<f64>,
}

impl Hypergradient {
    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }
}

/// `∂ℓ_PL(θ_D(φ); ν)/∂φ` through the recorded inner trajectory.
pub fn prop1_hypergrad(trace: &InnerTrace, task: &TaskInstance, nu: &PreferencePair) -> Result<Hypergradient> {
    hypergrad_with(trace, task, nu, |step, alpha, ridge, v| {
        let hv = step.hessian.matvec(v);
        v.iter().zip(&hv).map(|(vi, hi)| vi + alpha * step.reward_weight * hi - alpha * ridge * vi).collect()
    })
}

/// Shared accumulation; `apply_factor(step_j, α, λ, v)` returns `M_j v`.
pub(crate) fn hypergrad_with<F>(trace: &InnerTrace, task: &TaskInstance, nu: &PreferencePair, apply_factor: F) -> Result<Hypergradient>
where
    F: Fn(&InnerStep, f64, f64, &[f64]) -> Vec<f64>,
{
    let q = task.reward_dim();
    let p = task.policy_dim();
    ensure!(trace.theta_final.dim() == p, Usage, "trace has policy dim {} but the task needs {p}", trace.theta_final.dim());
    for (t, s) in trace.steps.iter().enumerate() {
        ensure!(
            s.grad_logp.len() == p && s.hessian.dim() == p && s.reward_grad.len() == q,
            Usage,
            "inner step {t} has mismatched dimensions"
        );
    }
    let mut vector = vec![0.0; q];
    let mut contributions = vec![0.0; trace.len()];
    if trace.is_empty() {
        return Ok(Hypergradient { vector, contributions });
    }
    let (margin, grad_margin) = preference_margin(&trace.theta_final, task, nu)?;
    let outer_scale = 1.0 - logistic(margin);
    let mut v: Vec<f64> = grad_margin.iter().map(|g| g * outer_scale).collect();
    let lead = -trace.alpha / trace.beta;
    for (t, step) in trace.steps.iter().enumerate().rev() {
        let c = lead * step.reward_weight * dot(&step.grad_logp, &v);
        axpy(c, &step.reward_grad, &mut vector);
        contributions[t] = c.abs() * norm(&step.reward_grad);
        if t > 0 {
            v = apply_factor(step, trace.alpha, trace.ridge, &v);
        }
    }
    Ok(Hypergradient { vector, contributions })
}

/// Central finite differences of `φ ↦ ℓ_PL(θ_D(φ); ν)` with the sample
/// stream held fixed; every evaluation re-runs the inner loop.
#[allow(clippy::too_many_arguments)]
pub fn fd_hypergrad(
    phi: &RewardParams,
    theta0: &PolicyParams,
    task: &TaskInstance,
    stream: &[Example],
    nu: &PreferencePair,
    alpha: f64,
    beta: f64,
    ridge: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    ensure!(epsilon > 0.0, Usage, "finite-difference step must be positive");
    let outer = |phi: &RewardParams| -> Result<f64> {
        let trace = run_inner_sgd(phi, theta0, task, stream, alpha, beta, ridge)?;
        Ok(loss_pl(&trace.theta_final, task, nu)?.value)
    };
    (0..phi.dim())
        .map(|i| {
            let mut plus = phi.clone();
            plus.phi[i] += epsilon;
            let mut minus = phi.clone();
            minus.phi[i] -= epsilon;
            Ok((outer(&plus)? - outer(&minus)?) / (2.0 * epsilon))
        })
        .collect()
}

/// One randomly drawn verification problem.
#[derive(Debug, Clone)]
pub struct HypergradInstance {
    pub task: TaskInstance,
    pub phi: RewardParams,
    pub theta0: PolicyParams,
    pub stream: Vec<Example>,
    pub nu: PreferencePair,
    pub alpha: f64,
    pub beta: f64,
    pub ridge: f64,
}

impl HypergradInstance {
    pub fn trace(&self) -> Result<InnerTrace> {
        run_inner_sgd(&self.phi, &self.theta0, &self.task, &self.stream, self.alpha, self.beta, self.ridge)
    }

    pub fn finite_difference(&self, epsilon: f64) -> Result<Vec<f64>> {
        fd_hypergrad(&self.phi, &self.theta0, &self.task, &self.stream, &self.nu, self.alpha, self.beta, self.ridge, epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub epsilon: f64,
    /// Bound on the relative ℓ₂ error.
    pub rel_tol: f64,
    /// Bound on `1 − cosine`.
    pub cos_tol: f64,
    pub max_policy_dim: usize,
    pub max_reward_dim: usize,
    /// Inner steps are drawn from `min_inner_steps..=max_inner_steps`.
    pub min_inner_steps: usize,
    pub max_inner_steps: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            rel_tol: 1e-5,
            cos_tol: 1e-8,
            max_policy_dim: 20,
            max_reward_dim: 20,
            min_inner_steps: 1,
            max_inner_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub instance: usize,
    pub policy_dim: usize,
    pub reward_dim: usize,
    pub inner_steps: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
    pub cosine: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
    pub max_rel_error: f64,
    pub min_cosine: f64,
    pub passed: bool,
}

/// Draws a random verification instance within the bounds of `config`.
pub fn random_instance(config: &CheckConfig, rng: &mut Rng) -> Result<HypergradInstance> {
    let p = rng.random_range(1..=config.max_policy_dim);
    let q = rng.random_range(1..=config.max_reward_dim);
    let n_x = rng.random_range(1..=4);
    let n_y = rng.random_range(2..=6);
    let task = random_feature_task(n_x, n_y, p, q, rng)?;
    let theta_dist = normal(1.0)?;
    let theta0 = PolicyParams::new((0..p).map(|_| theta_dist.sample(rng)).collect());
    let phi_dist = normal(1.0)?;
    let r_max = rng.random_range(0.5..2.0);
    let phi = RewardParams::new((0..q).map(|_| phi_dist.sample(rng)).collect(), r_max)?;
    let d = rng.random_range(config.min_inner_steps..=config.max_inner_steps);
    let stream = (0..d)
        .map(|_| {
            let x = rng.random_range(0..n_x);
            Example::new(x, rng.random_range(0..n_y))
        })
        .collect();
    let x = rng.random_range(0..n_x);
    let y = rng.random_range(0..n_y);
    let y_prime = (y + rng.random_range(1..n_y)) % n_y;
    let alpha = rng.random_range(0.05..0.5);
    let beta = rng.random_range(0.5..3.0);
    let ridge = if rng.random_bool(0.5) { 1e-3 } else { 0.0 };
    Ok(HypergradInstance { task, phi, theta0, stream, nu: PreferencePair::new(x, y, y_prime), alpha, beta, ridge })
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| crate::Error::Usage(e.to_string()))
}

/// Compares [`prop1_hypergrad`] against [`fd_hypergrad`] on random instances.
pub fn check_hypergrad(config: &CheckConfig, n_instances: usize, rng: &mut Rng) -> Result<CheckReport> {
    check_hypergrad_with(config, n_instances, rng, prop1_hypergrad)
}

/// As [`check_hypergrad`] with a caller-supplied analytic routine, so that
/// deliberately broken variants can be shown to fail.
pub fn check_hypergrad_with<F>(config: &CheckConfig, n_instances: usize, rng: &mut Rng, analytic: F) -> Result<CheckReport>
where
    F: Fn(&InnerTrace, &TaskInstance, &PreferencePair) -> Result<Hypergradient>,
{
    ensure!(n_instances >= 1, Usage, "hypergradient check needs at least one instance");
    let mut rows = Vec::with_capacity(n_instances);
    for instance in 0..n_instances {
        let inst = random_instance(config, rng)?;
        let hg = analytic(&inst.trace()?, &inst.task, &inst.nu)?;
        let fd = inst.finite_difference(config.epsilon)?;
        let (rel_error, cos) = compare(&hg.vector, &fd);
        rows.push(CheckRow {
            instance,
            policy_dim: inst.task.policy_dim(),
            reward_dim: inst.task.reward_dim(),
            inner_steps: inst.stream.len(),
            analytic_norm: norm(&hg.vector),
            rel_error,
            cosine: cos,
            passed: rel_error <= config.rel_tol && cos >= 1.0 - config.cos_tol,
        });
    }
    let max_rel_error = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let min_cosine = rows.iter().map(|r| r.cosine).fold(1.0, f64::min);
    let passed = rows.iter().all(|r| r.passed);
    Ok(CheckReport { rows, max_rel_error, min_cosine, passed })
}

/// Relative ℓ₂ error of `analytic` against `reference`, and their cosine.
pub fn compare(analytic: &[f64], reference: &[f64]) -> (f64, f64) {
    let diff = norm(&sub(analytic, reference));
    let scale = norm(reference);
    let rel = if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    };
    (rel, cosine(analytic, reference))
}
