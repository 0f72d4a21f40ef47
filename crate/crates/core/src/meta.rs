//! Meta-training of the shared reward model, meta-test adaptation, SFT
//! initialization, and the comparison baselines.
//!
//! One outer iteration of [`meta_train`]:
//!
//! 1. draw a training task uniformly;
//! 2. start θ from that task's SFT parameters;
//! 3. run `D` reward-weighted SGD steps on samples from its fine-tuning data;
//! 4. draw preference pair(s) from the task and step φ along the negative
//!    hypergradient of the preference loss at `θ_D`.
//!
//! SFT parameters are fitted once per task from a per-task seed and reused,
//! which gives the same θ as refitting every episode with that seed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::{Example, HyperParams, PreferencePair};
use crate::error::{ensure, Result};
use crate::hypergrad::{prop1_hypergrad, run_inner_sgd, InnerTrace};
use crate::linalg::{axpy, norm};
use crate::metrics::pl_accuracy;
use crate::models::{PolicyParams, PromptPolicy, RewardParams};
use crate::numerics::{derive_seed, log_logistic, logistic, seeded_rng, Rng};
use crate::objectives::{loss_ft, loss_pl, reward_weight, rm_pair_loss, LossValue};
use crate::synth::TaskData;
use crate::task::TaskInstance;

const SFT_STREAM: u64 = 0x5F7;
const SELECT_STREAM: u64 = 0x5E1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One uniformly drawn sample per step.
    Stochastic,
    /// The exact mean over the whole dataset per step.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: BatchMode,
}

impl FitOptions {
    pub fn new(steps: usize, lr: f64, batch: BatchMode) -> Self {
        Self { steps, lr, batch }
    }

    fn validate(&self, what: &str) -> Result<()> {
        ensure!(self.lr >= 0.0 && self.lr.is_finite(), Config, "{what}: learning rate must be >= 0");
        Ok(())
    }
}

/// When meta-test adaptation stops: a full-batch gradient norm at or below
/// `grad_norm_tol`, `patience` consecutive evaluations without a lower
/// full-batch loss, or `max_steps`. Evaluations happen every `eval_every`
/// steps; `patience = 0` disables the no-improvement rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingRule {
    pub max_steps: usize,
    pub grad_norm_tol: f64,
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self { max_steps: 5000, grad_norm_tol: 1e-6, patience: 0, eval_every: 100 }
    }
}

impl StoppingRule {
    fn validate(&self) -> Result<()> {
        ensure!(self.eval_every >= 1, Config, "stopping.eval_every must be >= 1");
        ensure!(self.grad_norm_tol >= 0.0, Config, "stopping.grad_norm_tol must be >= 0");
        Ok(())
    }
}

/// Fine-tuning samples aggregated into per-(prompt, candidate) frequencies,
/// so full-batch losses cost `O(Σ|Y(x)| p)` instead of `O(n p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalData {
    pub weights: Vec<Vec<f64>>,
}

impl EmpiricalData {
    pub fn new(task: &TaskInstance, data: &[Example]) -> Result<Self> {
        ensure!(!data.is_empty(), Usage, "empty fine-tuning dataset");
        let mut weights: Vec<Vec<f64>> = (0..task.n_prompts()).map(|x| vec![0.0; task.n_candidates(x)]).collect();
        let unit = 1.0 / data.len() as f64;
        for z in data {
            task.check_example(z)?;
            weights[z.prompt][z.response] += unit;
        }
        Ok(Self { weights })
    }

    /// Mean `ℓ_FT` over the data (ridge added once). With `phi = None` the
    /// reward weights are 1 and this is the SFT negative log-likelihood.
    pub fn ft_loss(&self, task: &TaskInstance, theta: &PolicyParams, phi: Option<&RewardParams>, beta: f64, ridge: f64) -> Result<LossValue> {
        let mut value = 0.5 * ridge * theta.theta.iter().map(|t| t * t).sum::<f64>();
        let mut grad: Vec<f64> = theta.theta.iter().map(|t| ridge * t).collect();
        for (x, row) in self.weights.iter().enumerate() {
            if row.iter().all(|w| *w == 0.0) {
                continue;
            }
            let policy = PromptPolicy::new(theta, task, x)?;
            for (y, w) in row.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                let r = match phi {
                    Some(phi) => reward_weight(phi, task, x, y, beta)?,
                    None => 1.0,
                };
                value -= w * r * policy.log_prob(y)?;
                axpy(-w * r, &policy.grad_log_prob(y)?, &mut grad);
            }
        }
        Ok(LossValue { value, grad: Some(grad) })
    }
}

fn gd_step(theta: &mut PolicyParams, grad: &[f64], lr: f64) {
    axpy(-lr, grad, &mut theta.theta);
}

/// Supervised fine-tuning from zero parameters on `data`.
pub fn sft_fit(task: &TaskInstance, data: &[Example], opts: &FitOptions, rng: &mut Rng) -> Result<PolicyParams> {
    opts.validate("sft")?;
    let mut theta = PolicyParams::zeros(task.policy_dim());
    if opts.steps == 0 {
        return Ok(theta);
    }
    let empirical = EmpiricalData::new(task, data)?;
    for _ in 0..opts.steps {
        match opts.batch {
            BatchMode::FullBatch => {
                let l = empirical.ft_loss(task, &theta, None, 1.0, 0.0)?;
                gd_step(&mut theta, l.grad(), opts.lr);
            }
            BatchMode::Stochastic => {
                let z = data[rng.random_range(0..data.len())];
                let g = PromptPolicy::new(&theta, task, z.prompt)?.grad_log_prob(z.response)?;
                axpy(opts.lr, &g, &mut theta.theta);
            }
        }
    }
    Ok(theta)
}

/// SFT parameters for task `index` of a suite, fitted from a seed derived
/// from `(seed, index)`.
pub fn sft_for_task(data: &TaskData, index: usize, opts: &FitOptions, seed: u64) -> Result<PolicyParams> {
    let mut rng = seeded_rng(derive_seed(derive_seed(seed, SFT_STREAM), index as u64));
    sft_fit(&data.task.task, &data.ft, opts, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub hp: HyperParams,
    pub r_max: f64,
    pub sft: FitOptions,
    /// Keep every `stride`-th φ_k (plus φ_0 and φ_K).
    pub stride: usize,
    /// φ_0; zero when absent.
    #[serde(default)]
    pub init_phi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSnapshot {
    pub k: usize,
    pub phi: RewardParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainRun {
    pub config: MetaTrainConfig,
    pub seed: u64,
    pub trajectory: Vec<PhiSnapshot>,
    /// Training task drawn at each outer iteration.
    pub task_ids: Vec<usize>,
    /// `ℓ_PL(θ_{k,D}; ν_k)` at each outer iteration.
    pub outer_losses: Vec<f64>,
    pub hypergrad_norms: Vec<f64>,
}

impl MetaTrainRun {
    pub fn final_phi(&self) -> &RewardParams {
        &self.trajectory.last().expect("trajectory always holds φ_0").phi
    }
}

/// Everything one outer iteration produced; handed to observers.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub k: usize,
    pub task_index: usize,
    pub trace: InnerTrace,
    pub prefs: Vec<PreferencePair>,
    pub hypergrad: Vec<f64>,
    pub outer_loss: f64,
    pub phi_next: RewardParams,
}

/// One outer update from fixed inputs: inner SGD from `theta_init` over
/// `stream`, then `φ ← φ − η · mean_ν ∂ℓ_PL/∂φ`.
pub fn outer_update(
    phi: &RewardParams,
    theta_init: &PolicyParams,
    task: &TaskInstance,
    stream: &[Example],
    prefs: &[PreferencePair],
    hp: &HyperParams,
) -> Result<(InnerTrace, Vec<f64>, f64, RewardParams)> {
    ensure!(!prefs.is_empty(), Usage, "outer update needs at least one preference pair");
    let trace = run_inner_sgd(phi, theta_init, task, stream, hp.alpha, hp.beta, hp.ridge)?;
    let mut grad = vec![0.0; phi.dim()];
    let mut loss = 0.0;
    let scale = 1.0 / prefs.len() as f64;
    for nu in prefs {
        axpy(scale, &prop1_hypergrad(&trace, task, nu)?.vector, &mut grad);
        loss += scale * loss_pl(&trace.theta_final, task, nu)?.value;
    }
    let mut next = phi.clone();
    axpy(-hp.eta, &grad, &mut next.phi);
    ensure!(next.phi.iter().all(|v| v.is_finite()), Domain, "reward parameters diverged");
    Ok((trace, grad, loss, next))
}

/// Meta-training over `tasks` for `hp.outer_steps` iterations from φ = 0.
pub fn meta_train(tasks: &[TaskData], config: &MetaTrainConfig, rng: &mut Rng) -> Result<MetaTrainRun> {
    meta_train_observed(tasks, config, rng, |_| {})
}

/// [`meta_train`] with a callback receiving each [`OuterStep`].
pub fn meta_train_observed<F>(tasks: &[TaskData], config: &MetaTrainConfig, rng: &mut Rng, mut observe: F) -> Result<MetaTrainRun>
where
    F: FnMut(&OuterStep),
{
    let hp = &config.hp;
    hp.validate()?;
    config.sft.validate("sft")?;
    ensure!(!tasks.is_empty(), Config, "meta-training needs at least one task");
    ensure!(config.stride >= 1, Config, "trajectory stride must be >= 1");
    let q = tasks[0].task.task.reward_dim();
    for (i, t) in tasks.iter().enumerate() {
        ensure!(!t.ft.is_empty(), Config, "training task {i} has no fine-tuning data");
        ensure!(!t.prefs.is_empty(), Config, "training task {i} has no preference data");
        ensure!(t.task.task.reward_dim() == q, Config, "training task {i} has reward dim {} (expected {q})", t.task.task.reward_dim());
    }
    let sft: Vec<PolicyParams> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| sft_for_task(t, i, &config.sft, hp.seed))
        .collect::<Result<_>>()?;

    let mut phi = match &config.init_phi {
        Some(v) => {
            ensure!(v.len() == q, Config, "init_phi has dim {} (expected {q})", v.len());
            RewardParams::new(v.clone(), config.r_max)?
        }
        None => RewardParams::zeros(q, config.r_max)?,
    };
    let mut run = MetaTrainRun {
        config: config.clone(),
        seed: hp.seed,
        trajectory: vec![PhiSnapshot { k: 0, phi: phi.clone() }],
        task_ids: Vec::with_capacity(hp.outer_steps),
        outer_losses: Vec::with_capacity(hp.outer_steps),
        hypergrad_norms: Vec::with_capacity(hp.outer_steps),
    };
    for k in 0..hp.outer_steps {
        let ti = rng.random_range(0..tasks.len());
        let data = &tasks[ti];
        let stream: Vec<Example> = (0..hp.inner_steps).map(|_| data.ft[rng.random_range(0..data.ft.len())]).collect();
        let prefs: Vec<PreferencePair> = (0..hp.outer_batch).map(|_| data.prefs[rng.random_range(0..data.prefs.len())]).collect();
        let (trace, grad, loss, next) = outer_update(&phi, &sft[ti], &data.task.task, &stream, &prefs, hp)?;
        run.task_ids.push(ti);
        run.outer_losses.push(loss);
        run.hypergrad_norms.push(norm(&grad));
        observe(&OuterStep { k, task_index: ti, trace, prefs, hypergrad: grad, outer_loss: loss, phi_next: next.clone() });
        phi = next;
        if (k + 1) % config.stride == 0 || k + 1 == hp.outer_steps {
            run.trajectory.push(PhiSnapshot { k: k + 1, phi: phi.clone() });
        }
    }
    Ok(run)
}

/// Reward-weighted SGD on `ℓ_FT(φ, ·)` from `init` until `stopping` fires.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    phi: &RewardParams,
    task: &TaskInstance,
    data: &[Example],
    init: PolicyParams,
    hp: &HyperParams,
    stopping: &StoppingRule,
    batch: BatchMode,
    rng: &mut Rng,
) -> Result<PolicyParams> {
    stopping.validate()?;
    let mut theta = init;
    if stopping.max_steps == 0 {
        return Ok(theta);
    }
    let empirical = EmpiricalData::new(task, data)?;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for step in 0..stopping.max_steps {
        if step % stopping.eval_every == 0 || batch == BatchMode::FullBatch {
            let full = empirical.ft_loss(task, &theta, Some(phi), hp.beta, hp.ridge)?;
            if norm(full.grad()) <= stopping.grad_norm_tol {
                break;
            }
            if step % stopping.eval_every == 0 {
                if full.value < best {
                    best = full.value;
                    stale = 0;
                } else {
                    stale += 1;
                    if stopping.patience > 0 && stale >= stopping.patience {
                        break;
                    }
                }
            }
            if batch == BatchMode::FullBatch {
                gd_step(&mut theta, full.grad(), hp.alpha);
                continue;
            }
        }
        let z = data[rng.random_range(0..data.len())];
        let l = loss_ft(phi, &theta, task, &z, hp.beta, hp.ridge)?;
        gd_step(&mut theta, l.grad(), hp.alpha);
    }
    ensure!(theta.theta.iter().all(|v| v.is_finite()), Domain, "policy parameters diverged during adaptation");
    Ok(theta)
}

/// SFT on the task's fine-tuning data, then [`adapt`] with the fixed reward.
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    phi: &RewardParams,
    task: &TaskInstance,
    data: &[Example],
    hp: &HyperParams,
    stopping: &StoppingRule,
    sft: &FitOptions,
    batch: BatchMode,
    rng: &mut Rng,
) -> Result<PolicyParams> {
    let init = sft_fit(task, data, sft, rng)?;
    adapt(phi, task, data, init, hp, stopping, batch, rng)
}

/// Settings shared by meta-test adaptation wherever a policy is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub hp: HyperParams,
    pub stopping: StoppingRule,
    pub sft: FitOptions,
    pub batch: BatchMode,
}

impl AdaptConfig {
    /// Meta-test on one task's data with a seed derived from `(seed, stream)`.
    pub fn run(&self, phi: &RewardParams, data: &TaskData, seed: u64, stream: u64) -> Result<PolicyParams> {
        let mut rng = seeded_rng(derive_seed(seed, stream));
        meta_test(phi, &data.task.task, &data.ft, &self.hp, &self.stopping, &self.sft, self.batch, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Index into the run's trajectory.
    pub index: usize,
    pub k: usize,
    pub phi: RewardParams,
    /// Mean evaluation PL accuracy of every stored φ_k; empty when there was
    /// only one candidate.
    pub scores: Vec<f64>,
}

/// Picks the stored φ_k whose adapted policies reach the highest mean PL
/// accuracy on `eval_tasks`; ties go to the earliest k.
pub fn select_rm(trajectory: &[PhiSnapshot], eval_tasks: &[TaskData], adapt: &AdaptConfig) -> Result<Selection> {
    ensure!(!trajectory.is_empty(), Usage, "no stored reward models to select from");
    ensure!(!eval_tasks.is_empty(), Usage, "model selection needs at least one evaluation task");
    if trajectory.len() == 1 {
        let s = &trajectory[0];
        return Ok(Selection { index: 0, k: s.k, phi: s.phi.clone(), scores: Vec::new() });
    }
    let mut scores = Vec::with_capacity(trajectory.len());
    for snap in trajectory {
        let mut total = 0.0;
        for (ti, data) in eval_tasks.iter().enumerate() {
            let theta = adapt.run(&snap.phi, data, adapt.hp.seed, derive_seed(SELECT_STREAM, ti as u64))?;
            total += pl_accuracy(&theta, &data.task.task, &data.prefs)?;
        }
        scores.push(total / eval_tasks.len() as f64);
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let snap = &trajectory[best];
    Ok(Selection { index: best, k: snap.k, phi: snap.phi.clone(), scores })
}

/// The SFT baseline: one policy fitted from zero on the fine-tuning data of
/// every task in `tasks` pooled together (training tasks plus the test task).
pub fn fit_pooled_sft(tasks: &[&TaskData], opts: &FitOptions, rng: &mut Rng) -> Result<PolicyParams> {
    opts.validate("sft")?;
    ensure!(!tasks.is_empty(), Config, "pooled SFT needs at least one task");
    let p = tasks[0].task.task.policy_dim();
    for t in tasks {
        ensure!(t.task.task.policy_dim() == p, Config, "pooled SFT tasks disagree on policy dim");
    }
    let pooled: Vec<(usize, Example)> = tasks.iter().enumerate().flat_map(|(i, t)| t.ft.iter().map(move |z| (i, *z))).collect();
    ensure!(!pooled.is_empty(), Config, "pooled SFT needs fine-tuning data");
    let mut theta = PolicyParams::zeros(p);
    if opts.steps == 0 {
        return Ok(theta);
    }
    let empirical = tasks.iter().map(|t| EmpiricalData::new(&t.task.task, &t.ft)).collect::<Result<Vec<_>>>()?;
    let shares: Vec<f64> = tasks.iter().map(|t| t.ft.len() as f64 / pooled.len() as f64).collect();
    for _ in 0..opts.steps {
        match opts.batch {
            BatchMode::FullBatch => {
                let mut grad = vec![0.0; p];
                for ((t, e), w) in tasks.iter().zip(&empirical).zip(&shares) {
                    axpy(*w, e.ft_loss(&t.task.task, &theta, None, 1.0, 0.0)?.grad(), &mut grad);
                }
                gd_step(&mut theta, &grad, opts.lr);
            }
            BatchMode::Stochastic => {
                let (i, z) = pooled[rng.random_range(0..pooled.len())];
                let g = PromptPolicy::new(&theta, &tasks[i].task.task, z.prompt)?.grad_log_prob(z.response)?;
                axpy(opts.lr, &g, &mut theta.theta);
            }
        }
    }
    Ok(theta)
}

/// Directly minimizes the pooled preference loss `ℓ_PL` over θ, starting
/// from `init`.
pub fn baseline_hpl(tasks: &[TaskData], init: PolicyParams, opts: &FitOptions, rng: &mut Rng) -> Result<PolicyParams> {
    opts.validate("hpl")?;
    let pooled: Vec<(usize, PreferencePair)> =
        tasks.iter().enumerate().flat_map(|(i, t)| t.prefs.iter().map(move |nu| (i, *nu))).collect();
    ensure!(!pooled.is_empty(), Config, "HPL baseline needs pooled preference data");
    let p = tasks[0].task.task.policy_dim();
    ensure!(init.dim() == p, Usage, "HPL init has dim {} (expected {p})", init.dim());
    let mut theta = init;
    for _ in 0..opts.steps {
        match opts.batch {
            BatchMode::Stochastic => {
                let (i, nu) = pooled[rng.random_range(0..pooled.len())];
                let l = loss_pl(&theta, &tasks[i].task.task, &nu)?;
                gd_step(&mut theta, l.grad(), opts.lr);
            }
            BatchMode::FullBatch => {
                let l = pooled_pl_loss(&theta, tasks)?;
                gd_step(&mut theta, l.grad(), opts.lr);
            }
        }
    }
    Ok(theta)
}

/// Mean `ℓ_PL` over every task's preference pairs.
///
/// Uses `A = θ·(ψ(x,y) − ψ(x,y'))` (the log-normalizer cancels), so each
/// pair costs `O(p)` once candidate scores are cached per prompt.
pub fn pooled_pl_loss(theta: &PolicyParams, tasks: &[TaskData]) -> Result<LossValue> {
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.dim()];
    let mut n = 0usize;
    for t in tasks {
        let task = &t.task.task;
        ensure!(task.policy_dim() == theta.dim(), Usage, "policy dim mismatch in pooled loss");
        let mut scores: Vec<Option<Vec<f64>>> = vec![None; task.n_prompts()];
        for nu in &t.prefs {
            task.check_preference(nu)?;
            let row = scores[nu.prompt].get_or_insert_with(|| {
                (0..task.n_candidates(nu.prompt)).map(|y| crate::linalg::dot(&theta.theta, task.policy_features(nu.prompt, y))).collect()
            });
            let margin = row[nu.preferred] - row[nu.dispreferred];
            value -= log_logistic(margin);
            let scale = -(1.0 - logistic(margin));
            let (fw, fl) = (task.policy_features(nu.prompt, nu.preferred), task.policy_features(nu.prompt, nu.dispreferred));
            grad.iter_mut().zip(fw.iter().zip(fl)).for_each(|(g, (a, b))| *g += scale * (a - b));
            n += 1;
        }
    }
    ensure!(n > 0, Usage, "pooled loss over no preference pairs");
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossValue { value: value * inv, grad: Some(grad) })
}

/// Mean reward-model MLE loss over every task's preference pairs.
pub fn pooled_rm_loss(phi: &RewardParams, tasks: &[TaskData]) -> Result<LossValue> {
    let mut value = 0.0;
    let mut grad = vec![0.0; phi.dim()];
    let mut n = 0usize;
    for t in tasks {
        for nu in &t.prefs {
            let (v, g) = rm_pair_loss(phi, &t.task.task, nu)?;
            value += v;
            axpy(1.0, &g, &mut grad);
            n += 1;
        }
    }
    ensure!(n > 0, Usage, "pooled loss over no preference pairs");
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossValue { value: value * inv, grad: Some(grad) })
}

/// Multi-task reward model: SGD on the pooled Bradley-Terry MLE from φ = 0.
pub fn fit_pooled_rm(tasks: &[TaskData], r_max: f64, opts: &FitOptions, rng: &mut Rng) -> Result<RewardParams> {
    opts.validate("mtrm")?;
    let pooled: Vec<(usize, PreferencePair)> =
        tasks.iter().enumerate().flat_map(|(i, t)| t.prefs.iter().map(move |nu| (i, *nu))).collect();
    ensure!(!pooled.is_empty(), Config, "multi-task RM needs pooled preference data");
    let mut phi = RewardParams::zeros(tasks[0].task.task.reward_dim(), r_max)?;
    for _ in 0..opts.steps {
        let grad = match opts.batch {
            BatchMode::Stochastic => {
                let (i, nu) = pooled[rng.random_range(0..pooled.len())];
                rm_pair_loss(&phi, &tasks[i].task.task, &nu)?.1
            }
            BatchMode::FullBatch => pooled_rm_loss(&phi, tasks)?.grad.unwrap_or_default(),
        };
        axpy(-opts.lr, &grad, &mut phi.phi);
    }
    Ok(phi)
}

/// The multi-task RM baseline: pooled RM fit, then meta-test adaptation on
/// `test` with that fixed reward.
pub fn baseline_mtrm(
    tasks: &[TaskData],
    test: &TaskData,
    r_max: f64,
    rm_opts: &FitOptions,
    adapt: &AdaptConfig,
    rng: &mut Rng,
) -> Result<(RewardParams, PolicyParams)> {
    let phi = fit_pooled_rm(tasks, r_max, rm_opts, rng)?;
    let theta = meta_test(&phi, &test.task.task, &test.ft, &adapt.hp, &adapt.stopping, &adapt.sft, adapt.batch, rng)?;
    Ok((phi, theta))
}
