//! Finite task instances: prompts, candidate sets, feature maps, and the
//! explicit prompt and reference distributions.

use serde::{Deserialize, Serialize};

use crate::domain::{Example, PreferencePair, Prompt, Response};
use crate::error::{ensure, Error, Result};

const NORMALIZATION_TOL: f64 = 1e-12;

/// Per-(prompt, candidate) feature vectors for the policy (`ψ`, dim p) and
/// the reward model (`ψ_r`, dim q). Indexed `[prompt][candidate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub policy: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskRecord", into = "TaskRecord")]
pub struct TaskInstance {
    pub prompts: Vec<Prompt>,
    /// Candidate set `Y(x)` for each prompt.
    pub candidates: Vec<Vec<Response>>,
    pub features: FeatureMap,
    /// `D_x`.
    pub prompt_dist: Vec<f64>,
    /// `D_{y|x}`, one row per prompt.
    pub reference: Vec<Vec<f64>>,
    /// Ground-truth reward weights on the reward features, when known.
    pub true_reward: Option<Vec<f64>>,
    /// Set when the features are one-hot over (prompt, candidate) pairs.
    pub tabular: bool,
    policy_dim: usize,
    reward_dim: usize,
}

impl TaskInstance {
    pub fn new(
        prompts: Vec<Prompt>,
        candidates: Vec<Vec<Response>>,
        features: FeatureMap,
        prompt_dist: Vec<f64>,
        reference: Vec<Vec<f64>>,
        true_reward: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = prompts.len();
        ensure!(n > 0, Config, "task has no prompts");
        ensure!(
            candidates.len() == n
                && features.policy.len() == n
                && features.reward.len() == n
                && prompt_dist.len() == n
                && reference.len() == n,
            Config,
            "per-prompt tables disagree on the number of prompts ({n})"
        );
        let policy_dim = first_dim(&features.policy)?;
        let reward_dim = first_dim(&features.reward)?;
        for (x, prompt) in prompts.iter().enumerate() {
            ensure!(prompt.id == x, Config, "prompt {x} carries id {}", prompt.id);
            ensure!(prompt.features.iter().all(|v| v.is_finite()), Config, "prompt {x} has non-finite features");
            let ny = candidates[x].len();
            ensure!(ny > 0, Config, "prompt {x} has an empty candidate set");
            ensure!(
                features.policy[x].len() == ny && features.reward[x].len() == ny && reference[x].len() == ny,
                Config,
                "prompt {x}: feature or reference rows do not match {ny} candidates"
            );
            for (y, resp) in candidates[x].iter().enumerate() {
                ensure!(resp.id == y, Config, "prompt {x} candidate {y} carries id {}", resp.id);
                ensure!(resp.length >= 1, Config, "prompt {x} candidate {y} has zero length");
                ensure!(resp.features.iter().all(|v| v.is_finite()), Config, "prompt {x} candidate {y} has non-finite features");
                let (fp, fr) = (&features.policy[x][y], &features.reward[x][y]);
                ensure!(fp.len() == policy_dim && fr.len() == reward_dim, Config, "prompt {x} candidate {y}: feature dimension mismatch");
                ensure!(fp.iter().chain(fr).all(|v| v.is_finite()), Config, "prompt {x} candidate {y}: non-finite feature");
            }
            check_distribution(&reference[x], &format!("reference row {x}"))?;
        }
        check_distribution(&prompt_dist, "prompt distribution")?;
        if let Some(w) = &true_reward {
            ensure!(w.len() == reward_dim, Config, "true reward has dim {} but reward features have dim {reward_dim}", w.len());
            ensure!(w.iter().all(|v| v.is_finite()), Config, "true reward weights must be finite");
        }
        Ok(Self { prompts, candidates, features, prompt_dist, reference, true_reward, tabular: false, policy_dim, reward_dim })
    }

    /// A task whose policy and reward features are both one-hot over the
    /// flattened (prompt, candidate) pairs, so `p = q = Σ_x |Y(x)|`.
    ///
    /// `lengths` and `true_reward` (a flat table in the same layout) are optional.
    pub fn tabular(
        prompt_dist: Vec<f64>,
        reference: Vec<Vec<f64>>,
        lengths: Option<Vec<Vec<u32>>>,
        true_reward: Option<Vec<f64>>,
    ) -> Result<Self> {
        let dim: usize = reference.iter().map(Vec::len).sum();
        let mut offset = 0;
        let mut prompts = Vec::with_capacity(reference.len());
        let mut candidates = Vec::with_capacity(reference.len());
        let mut onehots = Vec::with_capacity(reference.len());
        for (x, row) in reference.iter().enumerate() {
            prompts.push(Prompt { id: x, features: Vec::new() });
            let mut resp = Vec::with_capacity(row.len());
            let mut feats = Vec::with_capacity(row.len());
            for y in 0..row.len() {
                let mut e = vec![0.0; dim];
                e[offset + y] = 1.0;
                let length = lengths.as_ref().map_or(1, |l| l[x][y]);
                resp.push(Response { id: y, features: Vec::new(), length });
                feats.push(e);
            }
            offset += row.len();
            candidates.push(resp);
            onehots.push(feats);
        }
        let features = FeatureMap { policy: onehots.clone(), reward: onehots };
        let mut task = Self::new(prompts, candidates, features, prompt_dist, reference, true_reward)?;
        task.tabular = true;
        Ok(task)
    }

    pub fn n_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn n_candidates(&self, x: usize) -> usize {
        self.candidates[x].len()
    }

    pub fn policy_dim(&self) -> usize {
        self.policy_dim
    }

    pub fn reward_dim(&self) -> usize {
        self.reward_dim
    }

    /// Position of `(x, y)` in the flattened tabular layout.
    pub fn flat_index(&self, x: usize, y: usize) -> usize {
        self.candidates[..x].iter().map(Vec::len).sum::<usize>() + y
    }

    pub fn policy_features(&self, x: usize, y: usize) -> &[f64] {
        &self.features.policy[x][y]
    }

    pub fn reward_features(&self, x: usize, y: usize) -> &[f64] {
        &self.features.reward[x][y]
    }

    pub fn response(&self, x: usize, y: usize) -> &Response {
        &self.candidates[x][y]
    }

    pub fn check_prompt(&self, x: usize) -> Result<()> {
        ensure!(x < self.n_prompts(), Domain, "prompt {x} out of range (task has {})", self.n_prompts());
        Ok(())
    }

    pub fn check_pair(&self, x: usize, y: usize) -> Result<()> {
        self.check_prompt(x)?;
        ensure!(y < self.n_candidates(x), Domain, "response {y} is not in the candidate set of prompt {x}");
        Ok(())
    }

    pub fn check_example(&self, z: &Example) -> Result<()> {
        self.check_pair(z.prompt, z.response)
    }

    pub fn check_preference(&self, nu: &PreferencePair) -> Result<()> {
        self.check_pair(nu.prompt, nu.preferred)?;
        self.check_pair(nu.prompt, nu.dispreferred)?;
        ensure!(nu.preferred != nu.dispreferred, Domain, "preference pair compares response {} with itself", nu.preferred);
        Ok(())
    }

    /// Ground-truth reward `r*(x, y) = w* · ψ_r(x, y)`.
    pub fn true_reward_of(&self, x: usize, y: usize) -> Result<f64> {
        let w = self.true_reward.as_ref().ok_or_else(|| Error::Usage("task has no ground-truth reward".into()))?;
        Ok(crate::linalg::dot(w, self.reward_features(x, y)))
    }
}

/// Serialized form of a task; deserialization re-runs validation.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    prompts: Vec<Prompt>,
    candidates: Vec<Vec<Response>>,
    features: FeatureMap,
    prompt_dist: Vec<f64>,
    reference: Vec<Vec<f64>>,
    true_reward: Option<Vec<f64>>,
    tabular: bool,
}

impl TryFrom<TaskRecord> for TaskInstance {
    type Error = Error;

    fn try_from(r: TaskRecord) -> Result<Self> {
        let mut task = Self::new(r.prompts, r.candidates, r.features, r.prompt_dist, r.reference, r.true_reward)?;
        task.tabular = r.tabular;
        Ok(task)
    }
}

impl From<TaskInstance> for TaskRecord {
    fn from(t: TaskInstance) -> Self {
        Self {
            prompts: t.prompts,
            candidates: t.candidates,
            features: t.features,
            prompt_dist: t.prompt_dist,
            reference: t.reference,
            true_reward: t.true_reward,
            tabular: t.tabular,
        }
    }
}

fn first_dim(rows: &[Vec<Vec<f64>>]) -> Result<usize> {
    rows.iter()
        .flat_map(|r| r.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::Config("feature map is empty".into()))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    ensure!(p.iter().all(|v| v.is_finite() && *v >= 0.0), Config, "{what} has negative or non-finite entries");
    let total: f64 = p.iter().sum();
    ensure!((total - 1.0).abs() <= NORMALIZATION_TOL * p.len().max(1) as f64, Config, "{what} sums to {total}, not 1");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_layout() {
        let task = TaskInstance::tabular(vec![0.5, 0.5], vec![vec![0.25; 4], vec![0.5, 0.5]], None, None).unwrap();
        assert_eq!(task.policy_dim(), 6);
        assert_eq!(task.flat_index(1, 1), 5);
        assert_eq!(task.policy_features(1, 0)[4], 1.0);
        assert!(task.tabular);
    }

    #[test]
    fn rejects_bad_tables() {
        let err = TaskInstance::tabular(vec![0.7, 0.5], vec![vec![1.0], vec![1.0]], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = TaskInstance::tabular(vec![1.0], vec![vec![0.6, 0.6]], None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn domain_checks() {
        let task = TaskInstance::tabular(vec![1.0], vec![vec![0.5, 0.5]], None, None).unwrap();
        assert!(matches!(task.check_pair(0, 2), Err(Error::Domain(_))));
        assert!(matches!(task.check_preference(&PreferencePair::new(0, 1, 1)), Err(Error::Domain(_))));
        assert!(matches!(task.true_reward_of(0, 0), Err(Error::Usage(_))));
    }
}
