//! Synthetic meta-distributions of tasks with known ground-truth rewards.
//!
//! Each task draws reward weights `w*_T` around a shared prior mean. Heldout
//! tasks shift that mean by `δ` along a fixed direction orthogonal to it, so
//! `δ` alone controls how far the test distribution moves from training.
//! The reference `D_{y|x}` is the Boltzmann distribution of the true reward
//! at temperature 1, so fine-tuning data already carries preference signal.

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{Example, PreferencePair, Prompt, Response};
use crate::error::{ensure, Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::numerics::{derive_seed, logistic, seeded_rng, softmax, Rng};
use crate::task::{FeatureMap, TaskInstance};

/// Response lengths are drawn uniformly from `1..=MAX_RESPONSE_LENGTH`.
pub const MAX_RESPONSE_LENGTH: u32 = 8;

/// Share of the prompt's features mixed into each of its responses.
const PROMPT_COUPLING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaDistributionSpec {
    /// `‖w̄‖`; the direction of `w̄` is drawn from `seed`.
    pub prior_mean_norm: f64,
    /// Per-coordinate standard deviation of `w*_T` around its mean.
    pub prior_scale: f64,
    /// Heldout mean shift `δ`.
    pub shift: f64,
    pub n_prompts: usize,
    pub n_candidates: usize,
    pub prompt_dim: usize,
    pub response_dim: usize,
    pub feature_noise: f64,
    pub n_train_tasks: usize,
    pub n_heldout_tasks: usize,
    pub n_ft: usize,
    pub n_pref: usize,
    pub seed: u64,
}

impl Default for MetaDistributionSpec {
    fn default() -> Self {
        Self {
            prior_mean_norm: 1.0,
            prior_scale: 0.15,
            shift: 1.0,
            n_prompts: 30,
            n_candidates: 6,
            prompt_dim: 12,
            response_dim: 12,
            feature_noise: 1.0,
            n_train_tasks: 8,
            n_heldout_tasks: 4,
            n_ft: 2000,
            n_pref: 500,
            seed: 0,
        }
    }
}

impl MetaDistributionSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.prior_scale > 0.0, Config, "prior_scale must be > 0");
        ensure!(self.shift >= 0.0, Config, "shift must be >= 0");
        ensure!(self.prior_mean_norm >= 0.0, Config, "prior_mean_norm must be >= 0");
        ensure!(self.feature_noise > 0.0, Config, "feature_noise must be > 0");
        for (name, v) in [
            ("n_prompts", self.n_prompts),
            ("n_candidates", self.n_candidates),
            ("prompt_dim", self.prompt_dim),
            ("response_dim", self.response_dim),
            ("n_train_tasks", self.n_train_tasks),
            ("n_heldout_tasks", self.n_heldout_tasks),
            ("n_ft", self.n_ft),
            ("n_pref", self.n_pref),
        ] {
            ensure!(v >= 1, Config, "{name} must be >= 1");
        }
        ensure!(self.n_candidates >= 2, Config, "preference data needs at least 2 candidates per prompt");
        ensure!(
            self.prompt_dim == self.response_dim,
            Config,
            "prompt_dim ({}) must equal response_dim ({}) because responses mix in their prompt's features",
            self.prompt_dim,
            self.response_dim
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }

    /// Seed-derivation stream of the split.
    pub fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Heldout => 2,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTask {
    pub id: usize,
    pub split: Split,
    /// Carries the true reward weights `w*_T` in `true_reward`.
    pub task: TaskInstance,
}

impl GroundTruthTask {
    pub fn true_weights(&self) -> &[f64] {
        self.task.true_reward.as_deref().unwrap_or(&[])
    }
}

/// The spec together with the prior mean and shift direction it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDistribution {
    pub spec: MetaDistributionSpec,
    pub prior_mean: Vec<f64>,
    /// Unit vector orthogonal to `prior_mean`.
    pub shift_direction: Vec<f64>,
}

impl MetaDistribution {
    pub fn new(spec: MetaDistributionSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.response_dim;
        let mut rng = seeded_rng(derive_seed(spec.seed, 0));
        let mean_dir = random_unit(d, &mut rng);
        let prior_mean: Vec<f64> = mean_dir.iter().map(|v| v * spec.prior_mean_norm).collect();
        let shift_direction = if d == 1 {
            vec![1.0]
        } else {
            // Gram-Schmidt against the mean direction.
            loop {
                let mut u = random_unit(d, &mut rng);
                let c = dot(&u, &mean_dir);
                axpy(-c, &mean_dir, &mut u);
                let n = norm(&u);
                if n > 1e-6 {
                    u.iter_mut().for_each(|v| *v /= n);
                    break u;
                }
            }
        };
        Ok(Self { spec, prior_mean, shift_direction })
    }

    /// Mean of `w*_T` for tasks in `split`.
    pub fn split_mean(&self, split: Split) -> Vec<f64> {
        let mut mean = self.prior_mean.clone();
        if split == Split::Heldout {
            axpy(self.spec.shift, &self.shift_direction, &mut mean);
        }
        mean
    }
}

fn random_unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))
}

/// Draws one task: reward weights, frozen features, lengths, and the
/// Boltzmann reference.
pub fn sample_task(dist: &MetaDistribution, split: Split, id: usize, rng: &mut Rng) -> Result<GroundTruthTask> {
    let spec = &dist.spec;
    let d = spec.response_dim;
    let scale = normal(spec.prior_scale)?;
    let mut w = dist.split_mean(split);
    w.iter_mut().for_each(|v| *v += scale.sample(rng));

    let noise = normal(spec.feature_noise)?;
    let mut prompts = Vec::with_capacity(spec.n_prompts);
    let mut candidates = Vec::with_capacity(spec.n_prompts);
    let mut feats = Vec::with_capacity(spec.n_prompts);
    let mut reference = Vec::with_capacity(spec.n_prompts);
    for x in 0..spec.n_prompts {
        let pf: Vec<f64> = (0..spec.prompt_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut resp = Vec::with_capacity(spec.n_candidates);
        let mut rows = Vec::with_capacity(spec.n_candidates);
        for y in 0..spec.n_candidates {
            let f: Vec<f64> = (0..d).map(|i| PROMPT_COUPLING * pf[i] + noise.sample(rng)).collect();
            let length = rng.random_range(1..=MAX_RESPONSE_LENGTH);
            rows.push(f.clone());
            resp.push(Response { id: y, features: f, length });
        }
        let rewards: Vec<f64> = rows.iter().map(|f| dot(&w, f)).collect();
        reference.push(softmax(&rewards));
        prompts.push(Prompt { id: x, features: pf });
        candidates.push(resp);
        feats.push(rows);
    }
    let features = FeatureMap { policy: feats.clone(), reward: feats };
    let prompt_dist = vec![1.0 / spec.n_prompts as f64; spec.n_prompts];
    let task = TaskInstance::new(prompts, candidates, features, prompt_dist, reference, Some(w))?;
    Ok(GroundTruthTask { id, split, task })
}

fn sample_index(weights: &[f64], rng: &mut Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("cannot sample from distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// `n` i.i.d. samples `x ∼ D_x`, `y ∼ D_{y|x}`.
pub fn gen_ft_data(task: &TaskInstance, n: usize, rng: &mut Rng) -> Result<Vec<Example>> {
    ensure!(n >= 1, Usage, "fine-tuning dataset size must be >= 1");
    let prompt_sampler = WeightedIndex::new(&task.prompt_dist).map_err(|e| Error::Config(e.to_string()))?;
    let row_samplers = task
        .reference
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|_| {
            let x = prompt_sampler.sample(rng);
            Example::new(x, row_samplers[x].sample(rng))
        })
        .collect())
}

/// `n` Bradley-Terry-labelled comparisons: `x ∼ D_x`, two distinct
/// candidates uniformly, and `y` preferred with probability
/// `σ(r*(x,y) − r*(x,y'))`.
pub fn gen_pref_data(task: &TaskInstance, n: usize, rng: &mut Rng) -> Result<Vec<PreferencePair>> {
    ensure!(task.true_reward.is_some(), Usage, "preference labels need a ground-truth reward");
    for x in 0..task.n_prompts() {
        ensure!(task.n_candidates(x) >= 2, Config, "prompt {x} has fewer than 2 candidates");
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_index(&task.prompt_dist, rng)?;
        let ny = task.n_candidates(x);
        let a = rng.random_range(0..ny);
        let b = (a + rng.random_range(1..ny)) % ny;
        let margin = task.true_reward_of(x, a)? - task.true_reward_of(x, b)?;
        let pair = PreferencePair::new(x, a, b);
        out.push(if rng.random_bool(logistic(margin)) { pair } else { pair.flipped() });
    }
    Ok(out)
}

/// A task with its fine-tuning samples and preference comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task: GroundTruthTask,
    pub ft: Vec<Example>,
    pub prefs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub distribution: MetaDistribution,
    pub train: Vec<TaskData>,
    pub heldout: Vec<TaskData>,
}

/// Per-task seed: every task and its data come from their own stream.
pub fn task_seed(seed: u64, split: Split, id: usize) -> u64 {
    derive_seed(derive_seed(seed, split.stream()), id as u64 + 1)
}

/// Generates every train and heldout task of `spec` with its datasets.
pub fn generate_suite(spec: &MetaDistributionSpec) -> Result<Suite> {
    let distribution = MetaDistribution::new(spec.clone())?;
    let make = |split: Split, count: usize| -> Result<Vec<TaskData>> {
        (0..count)
            .map(|id| {
                let mut rng = seeded_rng(task_seed(spec.seed, split, id));
                let task = sample_task(&distribution, split, id, &mut rng)?;
                let ft = gen_ft_data(&task.task, spec.n_ft, &mut rng)?;
                let prefs = gen_pref_data(&task.task, spec.n_pref, &mut rng)?;
                Ok(TaskData { task, ft, prefs })
            })
            .collect()
    };
    let train = make(Split::Train, spec.n_train_tasks)?;
    let heldout = make(Split::Heldout, spec.n_heldout_tasks)?;
    Ok(Suite { distribution, train, heldout })
}

/// A dense random task with Gaussian features of unit expected squared norm
/// (`N(0, I/dim)`) and a random positive reference, used by verification
/// harnesses.
pub fn random_feature_task(n_x: usize, n_y: usize, p: usize, q: usize, rng: &mut Rng) -> Result<TaskInstance> {
    ensure!(n_x >= 1 && n_y >= 1 && p >= 1 && q >= 1, Usage, "random task needs nonzero sizes");
    let policy_noise = normal(1.0 / (p as f64).sqrt())?;
    let reward_noise = normal(1.0 / (q as f64).sqrt())?;
    let mut policy = Vec::with_capacity(n_x);
    let mut reward = Vec::with_capacity(n_x);
    let mut candidates = Vec::with_capacity(n_x);
    let mut reference = Vec::with_capacity(n_x);
    for _ in 0..n_x {
        policy.push((0..n_y).map(|_| (0..p).map(|_| policy_noise.sample(rng)).collect()).collect());
        reward.push((0..n_y).map(|_| (0..q).map(|_| reward_noise.sample(rng)).collect()).collect());
        candidates.push(
            (0..n_y)
                .map(|y| Response { id: y, features: Vec::new(), length: rng.random_range(1..=MAX_RESPONSE_LENGTH) })
                .collect(),
        );
        reference.push(random_simplex(n_y, rng));
    }
    let prompts = (0..n_x).map(|x| Prompt { id: x, features: Vec::new() }).collect();
    TaskInstance::new(prompts, candidates, FeatureMap { policy, reward }, random_simplex(n_x, rng), reference, None)
}

/// A tabular task with strictly positive random `D_x` and `D_{y|x}`.
pub fn random_tabular_task(n_x: usize, n_y: usize, rng: &mut Rng) -> Result<TaskInstance> {
    let reference = (0..n_x).map(|_| random_simplex(n_y, rng)).collect();
    let lengths = (0..n_x).map(|_| (0..n_y).map(|_| rng.random_range(1..=MAX_RESPONSE_LENGTH)).collect()).collect();
    TaskInstance::tabular(random_simplex(n_x, rng), reference, Some(lengths), None)
}

/// Softmax of standard-normal logits; strictly positive, normalized.
fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    softmax(&logits)
}
