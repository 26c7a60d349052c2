//! Task-specific teachers: pseudo-label generation, the CE/KL losses, and
//! teacher-to-student distillation across architectures.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::format::Container;
use crate::checkpoint::{minibatch_train, softmax_ce, Dataset, ModelCheckpoint, Role, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::numerics::{argmax, derive_seed, seeded, softmax, softmax_rows, Matrix, StepLr};

/// Validation inputs labeled by their own task's teacher. Carries no
/// ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    inputs: Matrix,
    source_task: Vec<usize>,
    hard_label: Vec<usize>,
    soft_label: Matrix,
}

impl PseudoLabeledSet {
    /// Builds a set from teacher probability rows; hard labels are their argmaxes.
    pub fn from_soft(inputs: Matrix, source_task: Vec<usize>, soft_label: Matrix) -> Result<Self> {
        if inputs.rows() != soft_label.rows() || inputs.rows() != source_task.len() {
            return Err(Error::shape(format!(
                "{} inputs, {} soft rows, {} task ids",
                inputs.rows(),
                soft_label.rows(),
                source_task.len()
            )));
        }
        for i in 0..soft_label.rows() {
            let row = soft_label.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::param(format!("soft label row {i} is not a distribution")));
            }
        }
        let hard_label = (0..soft_label.rows()).map(|i| argmax(soft_label.row(i))).collect();
        Ok(Self {
            inputs,
            source_task,
            hard_label,
            soft_label,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn source_task(&self) -> &[usize] {
        &self.source_task
    }

    pub fn hard_label(&self) -> &[usize] {
        &self.hard_label
    }

    pub fn soft_label(&self) -> &Matrix {
        &self.soft_label
    }

    pub fn num_classes(&self) -> usize {
        self.soft_label.cols()
    }

    pub fn len(&self) -> usize {
        self.hard_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_label.is_empty()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("pseudoset").with_field("num_classes", self.num_classes());
        c.push_f64("inputs", self.inputs.clone());
        c.push_u32("hard_label", self.hard_label.iter().map(|&y| y as u32).collect());
        c.push_f64("soft_label", self.soft_label.clone());
        c.push_u32("source_task", self.source_task.iter().map(|&k| k as u32).collect());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("pseudoset")?;
        let bad = |e: Error| Error::format(12, e.to_string());
        let inputs = c.f64_section("inputs")?.clone();
        let soft = c.f64_section("soft_label")?.clone();
        let source = c.u32_section("source_task")?.iter().map(|&k| k as usize).collect();
        let set = Self::from_soft(inputs, source, soft).map_err(bad)?;
        let stored: Vec<usize> = c.u32_section("hard_label")?.iter().map(|&y| y as usize).collect();
        if stored != set.hard_label {
            return Err(Error::format(12, "stored hard labels disagree with soft labels"));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path.as_ref())?)
    }
}

/// Seeded subsample of `round(fraction * n)` row indices, ascending.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = ((fraction * n as f64).round() as usize).min(n);
    if count == 0 {
        return Err(Error::param(format!("fraction {fraction} of {n} rows selects nothing")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    idx.truncate(count);
    idx.sort_unstable();
    Ok(idx)
}

/// Seed used for task `k`'s subsample.
pub fn task_subsample_seed(seed: u64, task: usize) -> u64 {
    derive_seed(seed, "pseudo-subsample", task as u64)
}

/// Runs each teacher on a seeded `fraction` of its own task's validation
/// inputs and concatenates the labeled rows across tasks.
pub fn generate_pseudo_labels(
    task_ckpts: &[ModelCheckpoint],
    val_inputs: &[Matrix],
    fraction: f64,
    seed: u64,
) -> Result<PseudoLabeledSet> {
    if task_ckpts.is_empty() || task_ckpts.len() != val_inputs.len() {
        return Err(Error::param(format!(
            "{} teachers for {} validation sets",
            task_ckpts.len(),
            val_inputs.len()
        )));
    }
    let classes = task_ckpts[0].arch().num_classes();
    if task_ckpts.iter().any(|c| c.arch().num_classes() != classes) {
        return Err(Error::compat("teachers disagree on the class count"));
    }
    let mut inputs = Vec::new();
    let mut soft = Vec::new();
    let mut source = Vec::new();
    for (k, (teacher, x)) in task_ckpts.iter().zip(val_inputs).enumerate() {
        let idx = subsample_indices(x.rows(), fraction, task_subsample_seed(seed, k))?;
        let xs = x.select_rows(&idx);
        soft.push(teacher.forward(&xs)?);
        source.extend(std::iter::repeat_n(k, idx.len()));
        inputs.push(xs);
    }
    let inputs = Matrix::vstack(&inputs.iter().collect::<Vec<_>>())?;
    let soft = Matrix::vstack(&soft.iter().collect::<Vec<_>>())?;
    PseudoLabeledSet::from_soft(inputs, source, soft)
}

/// `-ln(clamp(pred[target], 1e-12, 1))`.
pub fn ce_loss(pred: &[f64], target: usize) -> Result<f64> {
    let p = pred
        .get(target)
        .ok_or_else(|| Error::param(format!("class {target} outside {} classes", pred.len())))?;
    Ok(-p.clamp(PROB_CLAMP, 1.0).ln())
}

/// `sum_c p_c ln(p_c / q_c)`, skipping `p_c == 0` terms.
pub fn kl_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::shape(format!(
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(teacher
        .iter()
        .zip(student)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.clamp(PROB_CLAMP, 1.0).ln() - q.clamp(PROB_CLAMP, 1.0).ln()))
        .sum())
}

/// Mean KL(teacher rows || softmax(logits)) and its gradient at the logits.
pub fn softmax_kl(logits: &Matrix, teacher: &Matrix) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let q = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = q.clone();
    for i in 0..q.rows() {
        loss += kl_loss(teacher.row(i), q.row(i)).expect("shapes checked by caller");
        for (g, &p) in grad.row_mut(i).iter_mut().zip(teacher.row(i)) {
            *g = (*g - p) / n;
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the hard-label CE term; the KL term gets `1 - alpha`.
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            temperature: 4.0,
            epochs: 100,
            lr: 1e-3,
            decay_every: 100,
            decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::param(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Effective weights on the CE and KL terms: `alpha` and `(1 - alpha) T^2`.
    pub fn term_weights(&self) -> (f64, f64) {
        (self.alpha, (1.0 - self.alpha) * self.temperature * self.temperature)
    }
}

/// Mean distillation loss over a batch,
/// `alpha CE(y, softmax(z)) + (1 - alpha) T^2 KL(softmax(z_t / T) || softmax(z / T))`,
/// with its gradient at the student logits `z`.
pub fn distillation_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(f64, Matrix)> {
    if student_logits.shape() != teacher_logits.shape() || labels.len() != student_logits.rows() {
        return Err(Error::shape("student, teacher and labels disagree on shape"));
    }
    let t = cfg.temperature;
    let (w_ce, w_kl) = cfg.term_weights();
    let (ce, ce_grad) = softmax_ce(student_logits, labels);
    let teacher_soft = softmax_rows(&teacher_logits.scale(1.0 / t));
    let (kl, kl_grad) = softmax_kl(&student_logits.scale(1.0 / t), &teacher_soft);
    let mut grad = ce_grad.scale(w_ce);
    // d/dz of KL(z / T) carries a 1/T from the inner scaling.
    grad.add_scaled(&kl_grad, w_kl / t)?;
    Ok((w_ce * ce + w_kl * kl, grad))
}

/// Trains a copy of `student_init` to mimic `teacher` on `train`, using
/// [`distillation_loss`]. The result keeps the student's architecture and
/// pretrained fingerprint, so students distilled from one target checkpoint
/// can be merged together.
pub fn hetero_distill(
    teacher: &ModelCheckpoint,
    student_init: &ModelCheckpoint,
    train: &Dataset,
    cfg: &DistillConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    if !matches!(student_init.role(), Role::Pretrained | Role::Task) {
        return Err(Error::param(format!(
            "student must start from a pretrained or task checkpoint, got {:?}",
            student_init.role()
        )));
    }
    let classes = student_init.arch().num_classes();
    if teacher.arch().num_classes() != classes || train.num_classes() != classes {
        return Err(Error::compat(format!(
            "teacher outputs {}, student {}, data has {} classes",
            teacher.arch().num_classes(),
            classes,
            train.num_classes()
        )));
    }
    let teacher_logits = teacher.logits(train.inputs())?;
    let mut student = student_init.clone();
    student.meta.role = Role::Distilled;
    student.meta.task_id = teacher.meta.task_id.clone();
    let labels = train.labels();
    let schedule = StepLr {
        base_lr: cfg.lr,
        decay_factor: cfg.decay_factor,
        decay_every: cfg.decay_every,
    };
    let mut failure = None;
    minibatch_train(
        &mut student,
        train.inputs(),
        cfg.epochs,
        schedule,
        cfg.seed,
        |rows, logits| {
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let zt = teacher_logits.select_rows(rows);
            match distillation_loss(logits, &zt, &y, cfg) {
                Ok((_, g)) => g,
                Err(e) => {
                    failure.get_or_insert(e);
                    Matrix::zeros(logits.rows(), logits.cols())
                }
            }
        },
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(student),
    }
}

/// Probability rows of a teacher at temperature `t`.
pub fn soften(logits_row: &[f64], t: f64) -> Vec<f64> {
    softmax(&logits_row.iter().map(|z| z / t).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ArchSpec;

    #[test]
    fn ce_cases() {
        assert_eq!(ce_loss(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((ce_loss(&[0.5, 0.5], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((ce_loss(&[0.25, 0.75], 1).unwrap() - 0.2877).abs() < 1e-4);
        assert!(ce_loss(&[0.5, 0.5], 2).is_err());
        assert!((ce_loss(&[1.0, 0.0], 1).unwrap() - 27.631).abs() < 1e-3);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn teacher_softmax_and_argmax() {
        let p = softmax(&[2.0, 0.5]);
        assert!((p[0] - 0.8176).abs() < 1e-4 && (p[1] - 0.1824).abs() < 1e-4);
        let set = PseudoLabeledSet::from_soft(Matrix::zeros(1, 1), vec![0], Matrix::row_vector(p)).unwrap();
        assert_eq!(set.hard_label(), &[0]);
    }

    #[test]
    fn zero_teacher_uniform_and_tie() {
        let t = ModelCheckpoint::zeros(ArchSpec::mlp(&[3, 4]).unwrap());
        let x = Matrix::random_uniform(10, 3, 1.0, &mut seeded(1));
        let set = generate_pseudo_labels(&[t], &[x], 1.0, 5).unwrap();
        assert_eq!(set.len(), 10);
        assert!(set.hard_label().iter().all(|&y| y == 0));
        assert!(set.soft_label().values().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn fraction_bounds() {
        assert!(subsample_indices(10, 0.0, 1).is_err());
        assert!(subsample_indices(10, 0.01, 1).is_err());
        assert_eq!(subsample_indices(10, 1.0, 1).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(subsample_indices(10, 0.2, 1).unwrap().len(), 2);
    }

    #[test]
    fn term_weights_default() {
        let (a, b) = DistillConfig::default().term_weights();
        assert_eq!(a, 0.7);
        assert!((b - 4.8).abs() < 1e-12);
    }

    #[test]
    fn identical_teacher_student_zero_loss() {
        let cfg = DistillConfig {
            alpha: 0.0,
            temperature: 1.0,
            ..Default::default()
        };
        let z = Matrix::random_uniform(4, 3, 2.0, &mut seeded(2));
        let (loss, grad) = distillation_loss(&z, &z, &[0, 1, 2, 0], &cfg).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(grad.values().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn class_count_mismatch() {
        let t = ModelCheckpoint::init(ArchSpec::mlp(&[2, 4, 3]).unwrap(), 1);
        let s = ModelCheckpoint::init(ArchSpec::mlp(&[2, 5, 2]).unwrap(), 2);
        let d = Dataset::new(Matrix::zeros(2, 2), vec![0, 1], 2).unwrap();
        assert!(matches!(
            hetero_distill(&t, &s, &d, &DistillConfig::default()),
            Err(Error::Compatibility(_))
        ));
    }
}
