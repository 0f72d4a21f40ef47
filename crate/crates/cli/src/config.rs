//! Experiment configuration, read from TOML. Unknown keys are rejected at
//! every level.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use metarm_core::meta::{AdaptConfig, BatchMode, FitOptions, MetaTrainConfig, StoppingRule};
use metarm_core::synth::MetaDistributionSpec;
use metarm_core::HyperParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Policy fitted on the pooled fine-tuning data of all training tasks
    /// plus the evaluated task.
    Sft,
    /// Reward model fitted on pooled training preferences, then meta-test
    /// adaptation.
    Mtrm,
    /// Direct preference fitting of the policy on pooled training
    /// preferences, started from the task's own SFT parameters.
    Hpl,
    /// Meta-trained reward model, then meta-test adaptation.
    Ours,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sft, Method::Mtrm, Method::Hpl, Method::Ours];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Mtrm => "mtrm",
            Method::Hpl => "hpl",
            Method::Ours => "ours",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown method '{s}' (expected sft, mtrm, hpl or ours)"))
    }
}

/// Which stored φ_k the `ours` method adapts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectRule {
    /// The final φ_K.
    Final,
    /// The stored φ_k with the best mean PL accuracy on the training tasks.
    Train,
}

/// Meta-test adaptation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub batch: BatchMode,
    pub stopping: StoppingRule,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self { batch: BatchMode::Stochastic, stopping: StoppingRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckGradSection {
    pub instances: usize,
    pub epsilon: f64,
    pub rel_tol: f64,
    pub cos_tol: f64,
}

impl Default for CheckGradSection {
    fn default() -> Self {
        let c = metarm_core::hypergrad::CheckConfig::default();
        Self { instances: 100, epsilon: c.epsilon, rel_tol: c.rel_tol, cos_tol: c.cos_tol }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds of independent runs; seed `s` generates its own suite
    /// (`spec.seed` is overridden) and drives all training randomness.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Bound of the tanh reward head.
    pub r_max: f64,
    /// Keep every `stride`-th φ_k of meta-training for selection.
    pub stride: usize,
    pub select: SelectRule,
    /// φ_0 for meta-training; zero when absent.
    pub init_phi: Option<Vec<f64>>,
    pub spec: MetaDistributionSpec,
    pub hp: HyperParams,
    /// SFT initialization of the inner loop and of meta-test adaptation;
    /// also the optimizer of the pooled SFT baseline.
    pub sft: FitOptions,
    pub adapt: AdaptSection,
    /// Pooled reward-model fit of the mtrm baseline.
    pub rm: FitOptions,
    /// Pooled preference fit of the hpl baseline.
    pub hpl: FitOptions,
    pub checkgrad: CheckGradSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            methods: Method::ALL.to_vec(),
            r_max: 3.0,
            stride: 100,
            select: SelectRule::Train,
            init_phi: None,
            spec: MetaDistributionSpec::default(),
            hp: HyperParams::default(),
            sft: FitOptions::new(2000, 0.05, BatchMode::FullBatch),
            adapt: AdaptSection::default(),
            rm: FitOptions::new(3000, 0.5, BatchMode::FullBatch),
            hpl: FitOptions::new(3000, 0.5, BatchMode::FullBatch),
            checkgrad: CheckGradSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.methods.is_empty() {
            return fail("at least one method is required");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return fail("seeds must be distinct");
        }
        if self.methods.iter().collect::<HashSet<_>>().len() != self.methods.len() {
            return fail("methods must be distinct");
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return fail("r_max must be > 0");
        }
        if self.stride == 0 {
            return fail("stride must be >= 1");
        }
        if self.checkgrad.instances == 0 {
            return fail("checkgrad.instances must be >= 1");
        }
        self.spec.validate()?;
        self.hp.validate()?;
        Ok(())
    }

    /// The generator spec of run `seed`.
    pub fn spec_for(&self, seed: u64) -> MetaDistributionSpec {
        MetaDistributionSpec { seed, ..self.spec.clone() }
    }

    pub fn hp_for(&self, seed: u64) -> HyperParams {
        HyperParams { seed, ..self.hp.clone() }
    }

    pub fn meta_train_config(&self, seed: u64) -> MetaTrainConfig {
        MetaTrainConfig {
            hp: self.hp_for(seed),
            r_max: self.r_max,
            sft: self.sft.clone(),
            stride: self.stride,
            init_phi: self.init_phi.clone(),
        }
    }

    pub fn adapt_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig { hp: self.hp_for(seed), stopping: self.adapt.stopping.clone(), sft: self.sft.clone(), batch: self.adapt.batch }
    }

    /// Canonical JSON echo embedded in every output file.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let c = ExperimentConfig::from_toml("seeds = [1, 2]\nmethods = [\"ours\"]\n[hp]\nbeta = 8.0\n[spec]\nshift = 0.0\n").unwrap();
        assert_eq!(c.hp.beta, 8.0);
        assert_eq!(c.hp.alpha, HyperParams::default().alpha);
        assert_eq!(c.spec.shift, 0.0);
        assert_eq!(c.methods, vec![Method::Ours]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[hp]\ngamma = 1.0", "[spec]\nnprompts = 3", "[adapt.stopping]\nsteps = 3", "[sft]\nsteps = 1\nlr = 0.1\nbatch = \"full_batch\"\nx = 1"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invariants() {
        for text in ["methods = []", "seeds = [1, 1]", "seeds = []", "r_max = 0.0", "methods = [\"sft\", \"sft\"]"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Config(_))), "{text}");
        }
        for text in ["[hp]\nbeta = -1.0", "[spec]\nprior_scale = 0.0"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(CliError::Core(metarm_core::Error::Config(_)))), "{text}");
        }
        assert!(ExperimentConfig::from_toml("methods = [\"ppo\"]").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::from_toml("seeds = [3]\n[hp]\nridge = 0.001\n").unwrap();
        let back: ExperimentConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
