//! The experiment stages as pure functions of `(config, seed)` and upstream
//! outputs. The file-based commands and the sweeps both go through here.

use metarm_core::meta::{
    baseline_hpl, fit_pooled_rm, fit_pooled_sft, meta_train, select_rm, sft_fit, MetaTrainRun, PhiSnapshot, Selection,
};
use metarm_core::metrics::{pl_accuracy, running_mean_sq_at, true_reward_eval, EvalReport, TaskEval};
use metarm_core::numerics::{derive_seed, seeded_rng};
use metarm_core::synth::{generate_suite, Split, Suite, TaskData};
use metarm_core::{PolicyParams, RewardParams};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, SelectRule};
use crate::error::Result;

const META_STREAM: u64 = 0x3E7A;
const RM_STREAM: u64 = 0x4D7;
const SFT_BASELINE_STREAM: u64 = 0x5F8;
const HPL_STREAM: u64 = 0x4B1;
const ADAPT_STREAM: u64 = 0xADA;

/// Per-task stream shared by every method, so methods that differ only in
/// the reward see the same sample order.
fn task_stream(split: Split, id: usize) -> u64 {
    derive_seed(derive_seed(ADAPT_STREAM, split.stream()), id as u64)
}

pub fn generate(config: &ExperimentConfig, seed: u64) -> Result<Suite> {
    Ok(generate_suite(&config.spec_for(seed))?)
}

/// Meta-training output of the `ours` method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOutcome {
    pub run: MetaTrainRun,
    pub selection: Selection,
}

impl MetaOutcome {
    pub fn phi(&self) -> &RewardParams {
        &self.selection.phi
    }
}

pub fn train_ours(config: &ExperimentConfig, seed: u64, suite: &Suite) -> Result<MetaOutcome> {
    let run = meta_train(&suite.train, &config.meta_train_config(seed), &mut seeded_rng(derive_seed(seed, META_STREAM)))?;
    let selection = match config.select {
        SelectRule::Train => select_rm(&run.trajectory, &suite.train, &config.adapt_config(seed))?,
        SelectRule::Final => {
            let index = run.trajectory.len() - 1;
            let PhiSnapshot { k, phi } = run.trajectory[index].clone();
            Selection { index, k, phi, scores: Vec::new() }
        }
    };
    Ok(MetaOutcome { run, selection })
}

pub fn train_mtrm(config: &ExperimentConfig, seed: u64, suite: &Suite) -> Result<RewardParams> {
    Ok(fit_pooled_rm(&suite.train, config.r_max, &config.rm, &mut seeded_rng(derive_seed(seed, RM_STREAM)))?)
}

/// Reward models produced by the train stage, as needed by the methods.
#[derive(Debug, Clone, Default)]
pub struct Rewards {
    pub ours: Option<RewardParams>,
    pub mtrm: Option<RewardParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRow {
    pub split: Split,
    pub task: usize,
    pub theta: PolicyParams,
}

fn tasks(suite: &Suite) -> impl Iterator<Item = &TaskData> {
    suite.train.iter().chain(&suite.heldout)
}

/// One policy per task of both splits.
pub fn adapt_method(config: &ExperimentConfig, seed: u64, method: Method, suite: &Suite, rewards: &Rewards) -> Result<Vec<PolicyRow>> {
    let adapt = config.adapt_config(seed);
    let reward = |r: &Option<RewardParams>| r.clone().expect("reward model loaded for a reward-based method");
    let mut out = Vec::new();
    for data in tasks(suite) {
        let (split, id) = (data.task.split, data.task.id);
        let stream = task_stream(split, id);
        let theta = match method {
            Method::Sft => {
                let mut pool: Vec<&TaskData> = suite.train.iter().collect();
                if split == Split::Heldout {
                    pool.push(data);
                }
                fit_pooled_sft(&pool, &config.sft, &mut seeded_rng(derive_seed(seed, SFT_BASELINE_STREAM)))?
            }
            Method::Ours => adapt.run(&reward(&rewards.ours), data, seed, stream)?,
            Method::Mtrm => adapt.run(&reward(&rewards.mtrm), data, seed, stream)?,
            Method::Hpl => {
                let mut rng = seeded_rng(derive_seed(derive_seed(seed, HPL_STREAM), stream));
                let init = sft_fit(&data.task.task, &data.ft, &config.sft, &mut rng)?;
                baseline_hpl(&suite.train, init, &config.hpl, &mut rng)?
            }
        };
        out.push(PolicyRow { split, task: id, theta });
    }
    Ok(out)
}

pub fn evaluate(method: Method, seed: u64, suite: &Suite, policies: &[PolicyRow]) -> Result<EvalReport> {
    let mut report = EvalReport { method: method.to_string(), seed, tasks: Vec::new() };
    for data in tasks(suite) {
        let row = policies
            .iter()
            .find(|r| r.split == data.task.split && r.task == data.task.id)
            .ok_or_else(|| metarm_core::Error::Usage(format!("no {method} policy for {} task {}", data.task.split, data.task.id)))?;
        let task = &data.task.task;
        report.tasks.push(TaskEval {
            task_id: data.task.id,
            split: data.task.split.to_string(),
            pl_accuracy: pl_accuracy(&row.theta, task, &data.prefs)?,
            true_reward: true_reward_eval(&row.theta, task)?,
            n_pairs: data.prefs.len(),
        });
    }
    Ok(report)
}

/// Everything one seed produces, computed in memory.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub meta: Option<MetaOutcome>,
    pub reports: Vec<EvalReport>,
}

impl SeedOutcome {
    pub fn report(&self, method: Method) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method.as_str())
    }

    /// Running mean of squared hypergradient norms over the whole run.
    pub fn grad_norm_sq(&self) -> Option<f64> {
        let run = &self.meta.as_ref()?.run;
        running_mean_sq_at(&run.hypergrad_norms, run.hypergrad_norms.len()).ok()
    }
}

pub fn run_seed_on(config: &ExperimentConfig, seed: u64, suite: &Suite) -> Result<SeedOutcome> {
    let meta = if config.methods.contains(&Method::Ours) { Some(train_ours(config, seed, suite)?) } else { None };
    let rewards = Rewards {
        ours: meta.as_ref().map(|m| m.phi().clone()),
        mtrm: if config.methods.contains(&Method::Mtrm) { Some(train_mtrm(config, seed, suite)?) } else { None },
    };
    let mut reports = Vec::new();
    for &method in &config.methods {
        let policies = adapt_method(config, seed, method, suite, &rewards)?;
        reports.push(evaluate(method, seed, suite, &policies)?);
    }
    Ok(SeedOutcome { seed, meta, reports })
}

/// The full gen → train → adapt → eval pipeline for one seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    run_seed_on(config, seed, &generate(config, seed)?)
}
