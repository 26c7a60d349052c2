use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fine_tune, pretrain, Dataset, ModelCheckpoint};
use crate::distill::{generate_pseudo_labels, subsample_indices, task_subsample_seed, PseudoLabeledSet};
use crate::error::{Error, Result};
use crate::harness::suite::{corrupt_gaussian, evaluate, gen_tasks, predict, task_id, TaskSuite, TaskSuiteConfig};
use crate::learner::{train_sml, CoefficientTable, LabelMode, SmlTrainConfig, SmlTrainOutcome, SupervisionSet};
use crate::merge::{
    stats_merge, stats_merge_delta, task_arithmetic, ties_merge, weight_average, DEFAULT_KEEP_FRACTION,
};
use crate::numerics::derive_seed;
use crate::stats::{MergeMode, StatsConfig};

/// Task Arithmetic / Ties scaling grid searched when no scaling is fixed.
pub fn scaling_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_sigmas() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

/// One merge method of an experiment, before any data-dependent choice
/// (learned coefficients, searched scaling) is made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodTemplate {
    WeightAvg,
    TaskArithmetic {
        #[serde(default)]
        scaling: Option<f64>,
    },
    Ties {
        #[serde(default)]
        scaling: Option<f64>,
        #[serde(default = "default_keep")]
        keep_fraction: f64,
    },
    Stats {
        mode: MergeMode,
        /// Falls back to the learner config's label mode.
        #[serde(default)]
        label_mode: Option<LabelMode>,
        #[serde(default)]
        delta: bool,
    },
}

fn default_keep() -> f64 {
    DEFAULT_KEEP_FRACTION
}

impl MethodTemplate {
    pub fn defaults() -> Vec<MethodTemplate> {
        vec![
            MethodTemplate::WeightAvg,
            MethodTemplate::TaskArithmetic { scaling: None },
            MethodTemplate::Ties {
                scaling: None,
                keep_fraction: DEFAULT_KEEP_FRACTION,
            },
            MethodTemplate::Stats {
                mode: MergeMode::TaskWise,
                label_mode: None,
                delta: false,
            },
            MethodTemplate::Stats {
                mode: MergeMode::LayerWise,
                label_mode: None,
                delta: false,
            },
        ]
    }

    /// Row label in reports.
    pub fn label(&self, sml: &SmlTrainConfig) -> String {
        match self {
            MethodTemplate::WeightAvg => "Weight Averaging".into(),
            MethodTemplate::TaskArithmetic { .. } => "Task Arithmetic".into(),
            MethodTemplate::Ties { .. } => "Ties-Merging".into(),
            MethodTemplate::Stats {
                mode,
                label_mode,
                delta,
            } => {
                let mut s = match mode {
                    MergeMode::TaskWise => "StatsMerging (TW)".to_string(),
                    MergeMode::LayerWise => "StatsMerging (LW)".to_string(),
                };
                match label_mode.unwrap_or(sml.label_mode) {
                    LabelMode::KdHard => {}
                    LabelMode::KdSoft => s.push_str(" [KD soft]"),
                    LabelMode::GroundTruth => s.push_str(" [GT]"),
                }
                if *delta {
                    s.push_str(" [delta]");
                }
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub suite: TaskSuiteConfig,
    pub stats: StatsConfig,
    pub sml: SmlTrainConfig,
    pub methods: Vec<MethodTemplate>,
    /// Test-input noise levels of the robustness sweep.
    pub robustness_sigmas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: TaskSuiteConfig::default(),
            stats: StatsConfig::default(),
            sml: SmlTrainConfig::default(),
            methods: MethodTemplate::defaults(),
            robustness_sigmas: default_sigmas(),
        }
    }
}

impl ExperimentConfig {
    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self.sml.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub per_task: BTreeMap<String, f64>,
    pub avg_acc: f64,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, accs: &[f64]) -> Self {
        Self {
            method: method.into(),
            per_task: accs.iter().enumerate().map(|(k, &a)| (task_id(k), a)).collect(),
            avg_acc: accs.iter().sum::<f64>() / accs.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessBlock {
    pub sigma: f64,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    /// Learned tables, keyed by row label.
    pub coefficients: BTreeMap<String, CoefficientTable>,
    /// Scaling picked on pseudo-label accuracy, keyed by row label.
    pub selected_scaling: BTreeMap<String, f64>,
    pub robustness: Vec<RobustnessBlock>,
    /// Seconds per stage; absent unless requested, so reports stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("seed {}\n", self.config.suite.seed);
        out.push_str(&rows_table(&self.rows));
        for block in &self.robustness {
            let _ = writeln!(out, "\nGaussian noise sigma = {}", block.sigma);
            out.push_str(&rows_table(&block.rows));
        }
        out
    }
}

/// Aligned text table, accuracies in percent.
pub fn rows_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let tasks: Vec<&String> = rows.first().map(|r| r.per_task.keys().collect()).unwrap_or_default();
    let mut out = format!("{:<width$}", "Method");
    for t in &tasks {
        let _ = write!(out, " {t:>7}");
    }
    out.push_str("  Avg Acc\n");
    for r in rows {
        let _ = write!(out, "{:<width$}", r.method);
        for t in &tasks {
            let _ = write!(out, " {:>7.2}", 100.0 * r.per_task[*t]);
        }
        let _ = writeln!(out, "  {:>7.2}", 100.0 * r.avg_acc);
    }
    out
}

/// Everything an experiment produced besides its report.
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub suite: TaskSuite,
    pub base: ModelCheckpoint,
    pub task_ckpts: Vec<ModelCheckpoint>,
    pub pseudo: PseudoLabeledSet,
    /// Merged checkpoints in method order, keyed by row label.
    pub merged: Vec<(String, ModelCheckpoint)>,
    pub sml_runs: Vec<(String, SmlTrainOutcome)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub artifacts: ExperimentArtifacts,
}

pub(crate) struct Stopwatch {
    times: BTreeMap<String, f64>,
}

impl Stopwatch {
    pub(crate) fn new() -> Self {
        Self { times: BTreeMap::new() }
    }

    pub(crate) fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        *self.times.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        Ok(out)
    }

    pub(crate) fn finish(self) -> BTreeMap<String, f64> {
        self.times
    }
}

/// Validation rows of the pseudo-label subsample, with their real labels.
/// Only ground-truth learner runs read this.
pub fn ground_truth_subset(suite: &TaskSuite, fraction: f64, seed: u64) -> Result<Dataset> {
    let parts = suite
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            t.val
                .select(&subsample_indices(t.val.len(), fraction, task_subsample_seed(seed, k))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::concat(&parts.iter().collect::<Vec<_>>())
}

/// Agreement of a model with the pseudo hard labels.
pub fn pseudo_accuracy(ckpt: &ModelCheckpoint, pseudo: &PseudoLabeledSet) -> Result<f64> {
    let pred = predict(ckpt, pseudo.inputs())?;
    let hits = pred.iter().zip(pseudo.hard_label()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / pseudo.len() as f64)
}

/// Builds each scaled candidate and keeps the one agreeing most with the
/// pseudo labels (earliest on ties).
pub fn select_scaling(
    grid: &[f64],
    pseudo: &PseudoLabeledSet,
    build: impl Fn(f64) -> Result<ModelCheckpoint>,
) -> Result<(f64, ModelCheckpoint)> {
    let mut best: Option<(f64, f64, ModelCheckpoint)> = None;
    for &s in grid {
        let m = build(s)?;
        let acc = pseudo_accuracy(&m, pseudo)?;
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, s, m));
        }
    }
    let (_, s, m) = best.ok_or_else(|| Error::param("empty scaling grid"))?;
    Ok((s, m))
}

pub fn evaluate_all(ckpt: &ModelCheckpoint, tests: &[&Dataset]) -> Result<Vec<f64>> {
    tests.iter().map(|t| evaluate(ckpt, t)).collect()
}

/// Inputs shared by every merge method of one run.
pub(crate) struct MergeContext<'a> {
    pub base: &'a ModelCheckpoint,
    pub task_ckpts: &'a [ModelCheckpoint],
    pub pseudo: &'a PseudoLabeledSet,
    pub ground_truth: &'a Dataset,
    pub stats: &'a StatsConfig,
    pub sml: &'a SmlTrainConfig,
}

pub(crate) struct MergedMethod {
    pub label: String,
    pub ckpt: ModelCheckpoint,
    pub scaling: Option<f64>,
    pub sml: Option<SmlTrainOutcome>,
}

pub(crate) fn run_method(ctx: &MergeContext<'_>, template: &MethodTemplate) -> Result<MergedMethod> {
    let label = template.label(ctx.sml);
    let grid = scaling_grid();
    let (ckpt, scaling, sml) = match template {
        MethodTemplate::WeightAvg => (weight_average(ctx.task_ckpts)?, None, None),
        MethodTemplate::TaskArithmetic { scaling } => {
            let build = |s| task_arithmetic(ctx.base, ctx.task_ckpts, s);
            let (s, m) = match scaling {
                Some(s) => (*s, build(*s)?),
                None => select_scaling(&grid, ctx.pseudo, build)?,
            };
            (m, Some(s), None)
        }
        MethodTemplate::Ties { scaling, keep_fraction } => {
            let build = |s| ties_merge(ctx.base, ctx.task_ckpts, s, *keep_fraction);
            let (s, m) = match scaling {
                Some(s) => (*s, build(*s)?),
                None => select_scaling(&grid, ctx.pseudo, build)?,
            };
            (m, Some(s), None)
        }
        MethodTemplate::Stats {
            mode,
            label_mode,
            delta,
        } => {
            let cfg = SmlTrainConfig {
                label_mode: label_mode.unwrap_or(ctx.sml.label_mode),
                ..*ctx.sml
            };
            let set = match cfg.label_mode {
                LabelMode::GroundTruth => SupervisionSet::GroundTruth(ctx.ground_truth),
                LabelMode::KdHard | LabelMode::KdSoft => SupervisionSet::Pseudo(ctx.pseudo),
            };
            let outcome = train_sml(ctx.task_ckpts, set, &cfg, ctx.stats, *mode)?;
            let merged = if *delta {
                stats_merge_delta(ctx.base, ctx.task_ckpts, &outcome.coefficients)?
            } else {
                stats_merge(ctx.task_ckpts, &outcome.coefficients)?
            };
            (merged, None, Some(outcome))
        }
    };
    Ok(MergedMethod {
        label,
        ckpt,
        scaling,
        sml,
    })
}

fn noise_seed(seed: u64, sigma_index: usize, task: usize) -> u64 {
    derive_seed(seed, "noise", (sigma_index * 1_000 + task) as u64)
}

/// Accuracy rows of `models` on noisy copies of every test set, one block
/// per sigma. Each sigma uses one noise draw shared by all methods.
pub fn robustness_sweep(
    models: &[(String, ModelCheckpoint)],
    tests: &[&Dataset],
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<RobustnessBlock>> {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let noisy = tests
                .iter()
                .enumerate()
                .map(|(k, t)| corrupt_gaussian(t, sigma, noise_seed(seed, i, k)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Dataset> = noisy.iter().collect();
            let rows = models
                .iter()
                .map(|(name, m)| Ok(ReportRow::new(name.clone(), &evaluate_all(m, &refs)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(RobustnessBlock { sigma, rows })
        })
        .collect()
}

/// Pretrains the base on the suite's union set and fine-tunes one model per task.
pub fn train_task_models(suite: &TaskSuite, cfg: &TaskSuiteConfig) -> Result<(ModelCheckpoint, Vec<ModelCheckpoint>)> {
    let base = pretrain(
        cfg.arch()?,
        &suite.pretrain,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        derive_seed(cfg.seed, "pretrain", 0),
    )?;
    let tasks = suite
        .tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            Ok(fine_tune(
                &base,
                &t.train,
                cfg.finetune_epochs,
                cfg.finetune_lr,
                derive_seed(cfg.seed, "finetune", k as u64),
            )?
            .with_task_id(t.task_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((base, tasks))
}

/// The full pipeline: generate tasks, pretrain, fine-tune, pseudo-label,
/// merge with every configured method and evaluate on all test sets.
pub fn run_experiment(cfg: &ExperimentConfig, record_timings: bool) -> Result<ExperimentOutcome> {
    let mut clock = Stopwatch::new();
    let suite_cfg = &cfg.suite;
    let suite = clock.time("gen_tasks", || gen_tasks(suite_cfg))?;
    let (base, task_ckpts) = clock.time("fine_tune", || train_task_models(&suite, suite_cfg))?;
    let pseudo_seed = derive_seed(suite_cfg.seed, "pseudo", 0);
    let pseudo = clock.time("pseudo_labels", || {
        generate_pseudo_labels(&task_ckpts, &suite.val_inputs(), suite_cfg.pseudo_fraction, pseudo_seed)
    })?;
    let ground_truth = ground_truth_subset(&suite, suite_cfg.pseudo_fraction, pseudo_seed)?;
    let tests: Vec<&Dataset> = suite.tasks.iter().map(|t| &t.test).collect();

    let mut rows = Vec::new();
    clock.time("evaluate", || {
        rows.push(ReportRow::new("Pre-Trained", &evaluate_all(&base, &tests)?));
        let individual = task_ckpts
            .iter()
            .zip(&tests)
            .map(|(m, t)| evaluate(m, t))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ReportRow::new("Individual", &individual));
        Ok(())
    })?;

    let ctx = MergeContext {
        base: &base,
        task_ckpts: &task_ckpts,
        pseudo: &pseudo,
        ground_truth: &ground_truth,
        stats: &cfg.stats,
        sml: &cfg.sml,
    };
    let mut coefficients = BTreeMap::new();
    let mut selected_scaling = BTreeMap::new();
    let mut merged = Vec::new();
    let mut sml_runs = Vec::new();
    for template in &cfg.methods {
        let m = clock.time("merge", || run_method(&ctx, template))?;
        rows.push(clock.time("evaluate", || {
            Ok(ReportRow::new(m.label.clone(), &evaluate_all(&m.ckpt, &tests)?))
        })?);
        if let Some(s) = m.scaling {
            selected_scaling.insert(m.label.clone(), s);
        }
        if let Some(run) = m.sml {
            coefficients.insert(m.label.clone(), run.coefficients.clone());
            sml_runs.push((m.label.clone(), run));
        }
        merged.push((m.label, m.ckpt));
    }
    let robustness = clock.time("robustness", || {
        robustness_sweep(&merged, &tests, &cfg.robustness_sigmas, suite_cfg.seed)
    })?;

    let timings = clock.finish();
    let report = ExperimentReport {
        config: cfg.clone(),
        rows,
        coefficients,
        selected_scaling,
        robustness,
        timings: record_timings.then_some(timings),
    };
    Ok(ExperimentOutcome {
        report,
        artifacts: ExperimentArtifacts {
            suite,
            base,
            task_ckpts,
            pseudo,
            merged,
            sml_runs,
        },
    })
}

/// Writes a coefficient table as `task,layer,lambda` CSV.
pub fn export_heatmap(coeffs: &CoefficientTable, path: &Path) -> Result<()> {
    coeffs.write_csv(path)
}
