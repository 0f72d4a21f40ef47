//! The subcommands. Each file-based stage reads its upstream artifacts,
//! runs one pipeline stage per seed on the worker pool, and writes its own
//! files.

use std::fmt::Write as _;
use std::str::FromStr;

use metarm_core::hypergrad::{check_hypergrad, CheckConfig, CheckReport};
use metarm_core::meta::{PhiSnapshot, Selection};
use metarm_core::metrics::EvalReport;
use metarm_core::numerics::seeded_rng;
use metarm_core::synth::{GroundTruthTask, MetaDistribution, Split, Suite, TaskData};
use metarm_core::{Example, PreferencePair, RewardParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::io::{fmt_f64, read_jsonl, write_jsonl, Header, Layout, Table};
use crate::pipeline::{self, PolicyRow, Rewards};

const TASK_FORMAT: &str = "metarm/task";
const DISTRIBUTION_FORMAT: &str = "metarm/distribution";
const META_FORMAT: &str = "metarm/meta-run";
const RM_FORMAT: &str = "metarm/reward-model";
const POLICY_FORMAT: &str = "metarm/policies";
const RESULTS_FORMAT: &str = "metarm/results";
const SUMMARY_FORMAT: &str = "metarm/summary";
const SWEEP_FORMAT: &str = "metarm/sweep";
const CHECKGRAD_FORMAT: &str = "metarm/checkgrad";

/// Column order of every results table.
pub const RESULT_COLUMNS: [&str; 7] = ["seed", "method", "split", "task", "pl_accuracy", "true_reward", "n_pairs"];
pub const SUMMARY_COLUMNS: [&str; 7] =
    ["method", "split", "seeds", "mean_pl_accuracy", "min_pl_accuracy", "max_pl_accuracy", "mean_true_reward"];
pub const SWEEP_COLUMNS: [&str; 6] = ["axis", "value", "seed", "method", "metric", "score"];
pub const CHECKGRAD_COLUMNS: [&str; 8] =
    ["instance", "policy_dim", "reward_dim", "inner_steps", "analytic_norm", "rel_error", "cosine", "passed"];

fn for_each_seed<T: Send>(config: &ExperimentConfig, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    config.seeds.par_iter().map(|&s| f(s)).collect()
}

// ---------------------------------------------------------------- data

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum TaskLine {
    Task(GroundTruthTask),
    Ft(Example),
    Pref(PreferencePair),
}

pub fn gen(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for_each_seed(config, |seed| {
        let suite = pipeline::generate(config, seed)?;
        write_suite(config, layout, seed, &suite)
    })?;
    Ok(())
}

fn write_suite(config: &ExperimentConfig, layout: &Layout, seed: u64, suite: &Suite) -> Result<()> {
    write_jsonl(&layout.distribution(seed), &Header::for_seed(DISTRIBUTION_FORMAT, config, seed), &[&suite.distribution])?;
    for data in suite.train.iter().chain(&suite.heldout) {
        let mut lines = vec![TaskLine::Task(data.task.clone())];
        lines.extend(data.ft.iter().map(|z| TaskLine::Ft(*z)));
        lines.extend(data.prefs.iter().map(|nu| TaskLine::Pref(*nu)));
        let path = layout.task(seed, data.task.split.as_str(), data.task.id);
        write_jsonl(&path, &Header::for_seed(TASK_FORMAT, config, seed), &lines)?;
    }
    Ok(())
}

pub fn read_suite(config: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<Suite> {
    let path = layout.distribution(seed);
    let distribution: MetaDistribution = read_jsonl(&path, &Header::for_seed(DISTRIBUTION_FORMAT, config, seed))?
        .pop()
        .ok_or_else(|| CliError::format(&path, "no distribution record"))?;
    let read_split = |split: Split, n: usize| -> Result<Vec<TaskData>> {
        (0..n)
            .map(|id| {
                let path = layout.task(seed, split.as_str(), id);
                let mut lines = read_jsonl::<TaskLine>(&path, &Header::for_seed(TASK_FORMAT, config, seed))?.into_iter();
                let task = match lines.next() {
                    Some(TaskLine::Task(t)) if t.split == split && t.id == id => t,
                    _ => return Err(CliError::format(&path, format!("first record must be {split} task {id}"))),
                };
                let (mut ft, mut prefs) = (Vec::new(), Vec::new());
                for line in lines {
                    match line {
                        TaskLine::Ft(z) => ft.push(z),
                        TaskLine::Pref(nu) => prefs.push(nu),
                        TaskLine::Task(_) => return Err(CliError::format(&path, "more than one task record")),
                    }
                }
                Ok(TaskData { task, ft, prefs })
            })
            .collect()
    };
    let spec = &distribution.spec;
    let train = read_split(Split::Train, spec.n_train_tasks)?;
    let heldout = read_split(Split::Heldout, spec.n_heldout_tasks)?;
    Ok(Suite { distribution, train, heldout })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum MetaLine {
    Step { k: usize, task: usize, outer_loss: f64, hypergrad_norm: f64 },
    Snapshot(PhiSnapshot),
    Selection(Selection),
}

/// Meta-trains `ours` and fits the pooled reward model of `mtrm`, for
/// whichever of the two are configured.
pub fn train(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for_each_seed(config, |seed| {
        let suite = read_suite(config, layout, seed)?;
        if config.methods.contains(&Method::Ours) {
            let out = pipeline::train_ours(config, seed, &suite)?;
            let run = &out.run;
            let mut lines: Vec<MetaLine> = (0..run.outer_losses.len())
                .map(|k| MetaLine::Step { k, task: run.task_ids[k], outer_loss: run.outer_losses[k], hypergrad_norm: run.hypergrad_norms[k] })
                .collect();
            lines.extend(run.trajectory.iter().cloned().map(MetaLine::Snapshot));
            lines.push(MetaLine::Selection(out.selection));
            write_jsonl(&layout.meta_run(seed), &Header::for_seed(META_FORMAT, config, seed), &lines)?;
        }
        if config.methods.contains(&Method::Mtrm) {
            let phi = pipeline::train_mtrm(config, seed, &suite)?;
            write_jsonl(&layout.pooled_rm(seed), &Header::for_seed(RM_FORMAT, config, seed), &[phi])?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Hypergradient norms and the selected reward of a stored meta-training run.
pub fn read_meta_run(config: &ExperimentConfig, layout: &Layout, seed: u64) -> Result<(Vec<f64>, Selection)> {
    let path = layout.meta_run(seed);
    let mut norms = Vec::new();
    let mut selection = None;
    for line in read_jsonl::<MetaLine>(&path, &Header::for_seed(META_FORMAT, config, seed))? {
        match line {
            MetaLine::Step { hypergrad_norm, .. } => norms.push(hypergrad_norm),
            MetaLine::Selection(s) => selection = Some(s),
            MetaLine::Snapshot(_) => {}
        }
    }
    Ok((norms, selection.ok_or_else(|| CliError::format(&path, "no selection record"))?))
}

fn read_rewards(config: &ExperimentConfig, layout: &Layout, seed: u64, method: Method) -> Result<Rewards> {
    let mut rewards = Rewards::default();
    match method {
        Method::Ours => rewards.ours = Some(read_meta_run(config, layout, seed)?.1.phi),
        Method::Mtrm => {
            let path = layout.pooled_rm(seed);
            let phi: RewardParams = read_jsonl(&path, &Header::for_seed(RM_FORMAT, config, seed))?
                .pop()
                .ok_or_else(|| CliError::format(&path, "no reward record"))?;
            rewards.mtrm = Some(phi);
        }
        Method::Sft | Method::Hpl => {}
    }
    Ok(rewards)
}

// ---------------------------------------------------------------- adapt / eval

pub fn adapt(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for_each_seed(config, |seed| {
        let suite = read_suite(config, layout, seed)?;
        for &method in &config.methods {
            let rewards = read_rewards(config, layout, seed, method)?;
            let rows = pipeline::adapt_method(config, seed, method, &suite, &rewards)?;
            write_jsonl(&layout.policies(seed, method.as_str()), &Header::for_seed(POLICY_FORMAT, config, seed), &rows)?;
        }
        Ok(())
    })?;
    Ok(())
}

fn result_rows(report: &EvalReport) -> Vec<Vec<String>> {
    report
        .tasks
        .iter()
        .map(|t| {
            vec![
                report.seed.to_string(),
                report.method.clone(),
                t.split.clone(),
                t.task_id.to_string(),
                fmt_f64(t.pl_accuracy),
                fmt_f64(t.true_reward),
                t.n_pairs.to_string(),
            ]
        })
        .collect()
}

pub fn eval(config: &ExperimentConfig, layout: &Layout) -> Result<()> {
    for_each_seed(config, |seed| {
        let suite = read_suite(config, layout, seed)?;
        let mut table = Table::new(RESULT_COLUMNS.to_vec());
        for &method in &config.methods {
            let rows: Vec<PolicyRow> = read_jsonl(&layout.policies(seed, method.as_str()), &Header::for_seed(POLICY_FORMAT, config, seed))?;
            let report = pipeline::evaluate(method, seed, &suite, &rows)?;
            result_rows(&report).into_iter().for_each(|r| table.push(r));
        }
        table.write(&layout.seed_results(seed), &Header::for_seed(RESULTS_FORMAT, config, seed))
    })?;
    Ok(())
}

// ---------------------------------------------------------------- report

/// Per-(method, split) aggregate over seeds of the per-seed mean accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub split: String,
    pub per_seed_accuracy: Vec<f64>,
    pub per_seed_reward: Vec<f64>,
}

impl SummaryRow {
    pub fn mean_accuracy(&self) -> f64 {
        self.per_seed_accuracy.iter().sum::<f64>() / self.per_seed_accuracy.len() as f64
    }
}

fn summarize(rows: &[Vec<String>]) -> Result<Vec<SummaryRow>> {
    let parse = |s: &str| f64::from_str(s).map_err(|e| CliError::Usage(format!("bad number '{s}' in results: {e}")));
    // (method, split) in first-appearance order; per seed, the task mean.
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut seeds: Vec<Vec<(String, f64, f64, usize)>> = Vec::new();
    for r in rows {
        let (seed, method, split) = (&r[0], &r[1], &r[2]);
        let (acc, reward) = (parse(&r[4])?, parse(&r[5])?);
        let i = match out.iter().position(|s| &s.method == method && &s.split == split) {
            Some(i) => i,
            None => {
                out.push(SummaryRow { method: method.clone(), split: split.clone(), per_seed_accuracy: vec![], per_seed_reward: vec![] });
                seeds.push(Vec::new());
                out.len() - 1
            }
        };
        match seeds[i].iter_mut().find(|(s, ..)| s == seed) {
            Some(e) => {
                e.1 += acc;
                e.2 += reward;
                e.3 += 1;
            }
            None => seeds[i].push((seed.clone(), acc, reward, 1)),
        }
    }
    for (row, per) in out.iter_mut().zip(seeds) {
        row.per_seed_accuracy = per.iter().map(|(_, a, _, n)| a / *n as f64).collect();
        row.per_seed_reward = per.iter().map(|(_, _, r, n)| r / *n as f64).collect();
    }
    Ok(out)
}

/// Merges per-seed results into `results.csv` and writes `summary.csv`.
/// Returns the summary as a printable table.
pub fn report(config: &ExperimentConfig, layout: &Layout) -> Result<String> {
    let mut all = Table::new(RESULT_COLUMNS.to_vec());
    for &seed in &config.seeds {
        all.rows.extend(Table::read(&layout.seed_results(seed), &RESULT_COLUMNS)?.rows);
    }
    all.write(&layout.results(), &Header::for_all(RESULTS_FORMAT, config))?;

    let summary = summarize(&all.rows)?;
    let mut table = Table::new(SUMMARY_COLUMNS.to_vec());
    let mut text = format!("{:<6} {:<8} {:>5} {:>10} {:>10} {:>10} {:>12}\n", "method", "split", "seeds", "mean_acc", "min_acc", "max_acc", "mean_reward");
    for s in &summary {
        let min = s.per_seed_accuracy.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = s.per_seed_accuracy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let reward = s.per_seed_reward.iter().sum::<f64>() / s.per_seed_reward.len() as f64;
        table.push(vec![
            s.method.clone(),
            s.split.clone(),
            s.per_seed_accuracy.len().to_string(),
            fmt_f64(s.mean_accuracy()),
            fmt_f64(min),
            fmt_f64(max),
            fmt_f64(reward),
        ]);
        writeln!(
            text,
            "{:<6} {:<8} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>12.4}",
            s.method,
            s.split,
            s.per_seed_accuracy.len(),
            s.mean_accuracy(),
            min,
            max,
            reward
        )
        .unwrap();
    }
    table.write(&layout.summary(), &Header::for_all(SUMMARY_FORMAT, config))?;
    Ok(text)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Beta,
    InnerSteps,
    OuterSteps,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::InnerSteps => "D",
            Axis::OuterSteps => "K",
        }
    }

    /// `config` with the axis set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = config.clone();
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(CliError::Usage(format!("{} values must be nonnegative integers, got {value}", self.name())))
            }
        };
        match self {
            Axis::Beta => c.hp.beta = value,
            Axis::InnerSteps => c.hp.inner_steps = count()?,
            Axis::OuterSteps => c.hp.outer_steps = count()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "beta" => Ok(Axis::Beta),
            "D" | "d" => Ok(Axis::InnerSteps),
            "K" | "k" => Ok(Axis::OuterSteps),
            _ => Err(format!("unknown axis '{s}' (expected beta, D or K)")),
        }
    }
}

/// One long-format sweep row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub method: String,
    pub metric: &'static str,
    pub score: f64,
}

fn outcome_rows(value: f64, out: &pipeline::SeedOutcome) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for r in &out.reports {
        let metrics = [
            ("heldout_pl_accuracy", r.mean_accuracy("heldout")),
            ("heldout_true_reward", r.mean_true_reward("heldout")),
            ("train_pl_accuracy", r.mean_accuracy("train")),
        ];
        for (metric, score) in metrics {
            if let Some(score) = score {
                rows.push(SweepRow { value, seed: out.seed, method: r.method.clone(), metric, score });
            }
        }
    }
    if let Some(score) = out.grad_norm_sq() {
        rows.push(SweepRow { value, seed: out.seed, method: Method::Ours.to_string(), metric: "grad_norm_sq", score });
    }
    rows
}

/// Runs the in-memory pipeline for every (value, seed); data is generated
/// once per seed and shared across values.
pub fn sweep_rows(config: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| axis.apply(config, *v)).collect::<Result<_>>()?;
    let suites = for_each_seed(config, |seed| pipeline::generate(config, seed))?;
    let jobs: Vec<(usize, usize)> = (0..values.len()).flat_map(|v| (0..config.seeds.len()).map(move |s| (v, s))).collect();
    let outcomes: Vec<pipeline::SeedOutcome> =
        jobs.par_iter().map(|&(v, s)| pipeline::run_seed_on(&configs[v], config.seeds[s], &suites[s])).collect::<Result<_>>()?;
    Ok(jobs.iter().zip(&outcomes).flat_map(|(&(v, _), out)| outcome_rows(values[v], out)).collect())
}

pub fn sweep(config: &ExperimentConfig, layout: &Layout, axis: Axis, values: &[f64]) -> Result<()> {
    let rows = sweep_rows(config, axis, values)?;
    let mut table = Table::new(SWEEP_COLUMNS.to_vec());
    for r in rows {
        table.push(vec![axis.name().to_string(), fmt_f64(r.value), r.seed.to_string(), r.method, r.metric.to_string(), fmt_f64(r.score)]);
    }
    table.write(&layout.sweep(axis.name()), &Header::for_all(SWEEP_FORMAT, config))
}

// ---------------------------------------------------------------- checkgrad

pub fn checkgrad_config(config: &ExperimentConfig, tol: Option<f64>) -> CheckConfig {
    let c = &config.checkgrad;
    CheckConfig { epsilon: c.epsilon, rel_tol: tol.unwrap_or(c.rel_tol), cos_tol: c.cos_tol, ..CheckConfig::default() }
}

/// Runs the hypergradient check for every seed. Returns the printable
/// tables and, when any instance breaches tolerance, the failure to report.
pub fn checkgrad(config: &ExperimentConfig, layout: Option<&Layout>, tol: Option<f64>) -> Result<(String, Option<CliError>)> {
    let check = checkgrad_config(config, tol);
    let reports: Vec<CheckReport> = for_each_seed(config, |seed| Ok(check_hypergrad(&check, config.checkgrad.instances, &mut seeded_rng(seed))?))?;
    let mut text = String::new();
    for (seed, report) in config.seeds.iter().zip(&reports) {
        writeln!(text, "seed {seed}: {} instances", report.rows.len()).unwrap();
        writeln!(text, "{:>8} {:>4} {:>4} {:>4} {:>12} {:>12} {:>20} {:>6}", "instance", "p", "q", "D", "norm", "rel_error", "cosine", "pass").unwrap();
        let mut table = Table::new(CHECKGRAD_COLUMNS.to_vec());
        for r in &report.rows {
            writeln!(
                text,
                "{:>8} {:>4} {:>4} {:>4} {:>12.4e} {:>12.3e} {:>20.16} {:>6}",
                r.instance, r.policy_dim, r.reward_dim, r.inner_steps, r.analytic_norm, r.rel_error, r.cosine, r.passed
            )
            .unwrap();
            table.push(vec![
                r.instance.to_string(),
                r.policy_dim.to_string(),
                r.reward_dim.to_string(),
                r.inner_steps.to_string(),
                fmt_f64(r.analytic_norm),
                fmt_f64(r.rel_error),
                fmt_f64(r.cosine),
                r.passed.to_string(),
            ]);
        }
        writeln!(
            text,
            "max relative error {:e} (tol {:e}), min cosine {} (tol 1 - {:e}): {}",
            report.max_rel_error,
            check.rel_tol,
            report.min_cosine,
            check.cos_tol,
            if report.passed { "PASS" } else { "FAIL" }
        )
        .unwrap();
        if let Some(layout) = layout {
            table.write(&layout.checkgrad(*seed), &Header::for_seed(CHECKGRAD_FORMAT, config, *seed))?;
        }
    }
    let failure = reports.iter().find(|r| !r.passed).map(|r| CliError::CheckFailed { max_rel_error: r.max_rel_error, min_cosine: r.min_cosine });
    Ok((text, failure))
}
