use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fine_tune, pretrain, Dataset};
use crate::distill::{generate_pseudo_labels, hetero_distill, DistillConfig};
use crate::error::{Error, Result};
use crate::harness::experiment::{
    evaluate_all, ground_truth_subset, rows_table, run_method, MergeContext, MethodTemplate, ReportRow, Stopwatch,
};
use crate::harness::suite::{evaluate, gen_tasks, TaskSuiteConfig};
use crate::learner::{CoefficientTable, SmlTrainConfig};
use crate::numerics::derive_seed;
use crate::stats::{MergeMode, StatsConfig};

/// Teacher and student architectures plus the distillation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeteroConfig {
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for HeteroConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            teacher_hidden: vec![128],
            student_hidden: vec![32, 32],
            alpha: d.alpha,
            temperature: d.temperature,
            epochs: d.epochs,
            lr: d.lr,
            decay_every: d.decay_every,
            decay_factor: d.decay_factor,
            seed: d.seed,
        }
    }
}

impl HeteroConfig {
    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            temperature: self.temperature,
            epochs: self.epochs,
            lr: self.lr,
            decay_every: self.decay_every,
            decay_factor: self.decay_factor,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeteroExperimentConfig {
    pub suite: TaskSuiteConfig,
    pub stats: StatsConfig,
    pub sml: SmlTrainConfig,
    pub distill: HeteroConfig,
    pub methods: Vec<MethodTemplate>,
}

impl Default for HeteroExperimentConfig {
    fn default() -> Self {
        Self {
            suite: TaskSuiteConfig::default(),
            stats: StatsConfig::default(),
            sml: SmlTrainConfig::default(),
            distill: HeteroConfig::default(),
            methods: vec![
                MethodTemplate::WeightAvg,
                MethodTemplate::TaskArithmetic { scaling: None },
                MethodTemplate::Stats {
                    mode: MergeMode::LayerWise,
                    label_mode: None,
                    delta: false,
                },
            ],
        }
    }
}

impl HeteroExperimentConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self.sml.seed = seed;
        self.distill.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroReport {
    pub config: HeteroExperimentConfig,
    /// Teachers and distilled students, each on its own task.
    pub teachers: ReportRow,
    pub students: ReportRow,
    /// Merges of the distilled students.
    pub rows: Vec<ReportRow>,
    pub coefficients: BTreeMap<String, CoefficientTable>,
    pub selected_scaling: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl HeteroReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Student accuracy minus teacher accuracy, per task.
    pub fn retention_gaps(&self) -> Vec<f64> {
        self.students
            .per_task
            .iter()
            .map(|(k, s)| s - self.teachers.per_task[k])
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut all = vec![self.teachers.clone(), self.students.clone()];
        all.extend(self.rows.iter().cloned());
        format!("seed {}\n{}", self.config.suite.seed, rows_table(&all))
    }
}

/// Heterogeneous merging: fine-tune teachers of one architecture, distill
/// each into students sharing a second architecture's pretrained base,
/// then merge the students. The learner is supervised by the teachers'
/// pseudo labels.
pub fn run_hetero(cfg: &HeteroExperimentConfig, record_timings: bool) -> Result<HeteroReport> {
    let mut clock = Stopwatch::new();
    let s = &cfg.suite;
    let suite = clock.time("gen_tasks", || gen_tasks(s))?;
    let teacher_arch = s.arch_with(&cfg.distill.teacher_hidden)?;
    let student_arch = s.arch_with(&cfg.distill.student_hidden)?;
    if teacher_arch == student_arch {
        return Err(Error::param("teacher and student architectures are identical").in_stage("distill"));
    }
    let teachers = clock.time("fine_tune", || {
        let base = pretrain(
            teacher_arch,
            &suite.pretrain,
            s.pretrain_epochs,
            s.pretrain_lr,
            derive_seed(s.seed, "pretrain", 0),
        )?;
        suite
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| {
                Ok(fine_tune(
                    &base,
                    &t.train,
                    s.finetune_epochs,
                    s.finetune_lr,
                    derive_seed(s.seed, "finetune", k as u64),
                )?
                .with_task_id(t.task_id.clone()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let student_base = clock.time("pretrain_student", || {
        pretrain(
            student_arch,
            &suite.pretrain,
            s.pretrain_epochs,
            s.pretrain_lr,
            derive_seed(s.seed, "pretrain-student", 0),
        )
    })?;
    let students = clock.time("distill", || {
        teachers
            .iter()
            .zip(&suite.tasks)
            .enumerate()
            .map(|(k, (teacher, t))| {
                let dc = DistillConfig {
                    seed: derive_seed(cfg.distill.seed, "distill", k as u64),
                    ..cfg.distill.distill()
                };
                hetero_distill(teacher, &student_base, &t.train, &dc)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let tests: Vec<&Dataset> = suite.tasks.iter().map(|t| &t.test).collect();
    let own = |models: &[crate::checkpoint::ModelCheckpoint]| {
        models
            .iter()
            .zip(&tests)
            .map(|(m, t)| evaluate(m, t))
            .collect::<Result<Vec<_>>>()
    };
    let teacher_row = ReportRow::new("Teachers", &own(&teachers)?);
    let student_row = ReportRow::new("Distilled students", &own(&students)?);

    let pseudo_seed = derive_seed(s.seed, "pseudo", 0);
    let pseudo = clock.time("pseudo_labels", || {
        generate_pseudo_labels(&teachers, &suite.val_inputs(), s.pseudo_fraction, pseudo_seed)
    })?;
    let ground_truth = ground_truth_subset(&suite, s.pseudo_fraction, pseudo_seed)?;
    let ctx = MergeContext {
        base: &student_base,
        task_ckpts: &students,
        pseudo: &pseudo,
        ground_truth: &ground_truth,
        stats: &cfg.stats,
        sml: &cfg.sml,
    };
    let mut rows = Vec::new();
    let mut coefficients = BTreeMap::new();
    let mut selected_scaling = BTreeMap::new();
    for template in &cfg.methods {
        let m = clock.time("merge", || run_method(&ctx, template))?;
        rows.push(ReportRow::new(m.label.clone(), &evaluate_all(&m.ckpt, &tests)?));
        if let Some(sc) = m.scaling {
            selected_scaling.insert(m.label.clone(), sc);
        }
        if let Some(run) = m.sml {
            coefficients.insert(m.label, run.coefficients);
        }
    }
    let timings = clock.finish();
    Ok(HeteroReport {
        config: cfg.clone(),
        teachers: teacher_row,
        students: student_row,
        rows,
        coefficients,
        selected_scaling,
        timings: record_timings.then_some(timings),
    })
}
