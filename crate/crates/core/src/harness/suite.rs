use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ArchSpec, Dataset, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::numerics::{argmax, derive_seed, seeded, Matrix, SeededRng};

/// Synthetic multi-task benchmark and the training budget of its models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSuiteConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_samples: usize,
    /// Per-task training sizes overriding `train_samples`; empty means uniform.
    pub train_sizes: Vec<usize>,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Distance scale between class means, in units of the unit noise.
    pub cluster_separation: f64,
    /// Scale of each task's mean offset relative to `cluster_separation`.
    pub task_offset: f64,
    /// Per-task multiplier on generated inputs; empty means all 1.
    pub input_scales: Vec<f64>,
    /// Hidden widths of the shared architecture.
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Share of every task's training rows used to pretrain the base.
    pub pretrain_fraction: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Share of each task's validation inputs given to its teacher.
    pub pseudo_fraction: f64,
    pub seed: u64,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            classes_per_task: 4,
            input_dim: 16,
            train_samples: 800,
            train_sizes: vec![200, 400, 800, 1600],
            val_samples: 200,
            test_samples: 400,
            cluster_separation: 4.0,
            task_offset: 1.0,
            input_scales: Vec::new(),
            hidden: vec![64, 64],
            pretrain_epochs: 2,
            pretrain_lr: 1e-3,
            pretrain_fraction: 0.25,
            finetune_epochs: 20,
            finetune_lr: 1e-3,
            pseudo_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TaskSuiteConfig {
    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        self.arch_with(&self.hidden)
    }

    /// `input_dim -> hidden... -> num_classes`.
    pub fn arch_with(&self, hidden: &[usize]) -> Result<ArchSpec> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(hidden);
        widths.push(self.num_classes());
        ArchSpec::mlp(&widths)
    }

    pub fn input_scale(&self, task: usize) -> f64 {
        self.input_scales.get(task).copied().unwrap_or(1.0)
    }

    pub fn train_size(&self, task: usize) -> usize {
        self.train_sizes.get(task).copied().unwrap_or(self.train_samples)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.train_sizes.is_empty() && self.train_sizes.len() != self.num_tasks || self.train_sizes.contains(&0) {
            return Err(Error::param("train_sizes needs one positive count per task"));
        }
        let counts = [
            self.num_tasks,
            self.classes_per_task,
            self.input_dim,
            self.train_samples,
            self.val_samples,
            self.test_samples,
        ];
        if counts.contains(&0) {
            return Err(Error::param("suite counts must all be at least 1"));
        }
        if !self.input_scales.is_empty() && self.input_scales.len() != self.num_tasks {
            return Err(Error::param(format!(
                "{} input scales for {} tasks",
                self.input_scales.len(),
                self.num_tasks
            )));
        }
        let fractions = [self.pretrain_fraction, self.pseudo_fraction];
        if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::param("fractions must lie in (0, 1]"));
        }
        if !(self.cluster_separation.is_finite() && self.task_offset.is_finite())
            || self.input_scales.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::param(
                "separation, offset and scales must be finite and scales positive",
            ));
        }
        self.arch()?;
        Ok(())
    }
}

/// One task's splits, labeled in the shared class space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: String,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub tasks: Vec<TaskData>,
    /// Union of a share of every task's training rows.
    pub pretrain: Dataset,
}

impl TaskSuite {
    pub fn val_inputs(&self) -> Vec<Matrix> {
        self.tasks.iter().map(|t| t.val.inputs().clone()).collect()
    }
}

pub fn task_id(k: usize) -> String {
    format!("task{k}")
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let values = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(rows, cols, values).expect("finite samples")
}

/// Haar-ish random rotation: Gram-Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut SeededRng) -> Matrix {
    let g = gaussian_matrix(d, d, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    Matrix::from_rows(&q).expect("square rotation")
}

fn unit_vector(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

fn sample_split(
    means: &[Vec<f64>],
    first_label: usize,
    n: usize,
    scale: f64,
    total: usize,
    rng: &mut SeededRng,
) -> Dataset {
    let d = means[0].len();
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % means.len();
        for &m in &means[c] {
            let z: f64 = StandardNormal.sample(rng);
            values.push(scale * (m + z));
        }
        labels.push(first_label + c);
    }
    Dataset::new(Matrix::new(n, d, values).expect("finite samples"), labels, total).expect("labels in range")
}

/// Generates every task's train/val/test splits plus the pretraining union.
/// Class `c` of task `k` is a unit Gaussian around
/// `separation * (R_k p_c + offset * o_k)`, with `p_c` shared prototypes,
/// `R_k` a task rotation and `o_k` a task direction.
pub fn gen_tasks(cfg: &TaskSuiteConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let total = cfg.num_classes();
    let mut proto_rng = seeded(derive_seed(cfg.seed, "prototypes", 0));
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes_per_task)
        .map(|_| unit_vector(d, &mut proto_rng))
        .collect();
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut pretrain_parts = Vec::with_capacity(cfg.num_tasks);
    for k in 0..cfg.num_tasks {
        let mut rng = seeded(derive_seed(cfg.seed, "task", k as u64));
        let rot = random_rotation(d, &mut rng);
        let offset = unit_vector(d, &mut rng);
        let means: Vec<Vec<f64>> = prototypes
            .iter()
            .map(|p| {
                (0..d)
                    .map(|i| {
                        let r: f64 = rot.row(i).iter().zip(p).map(|(a, b)| a * b).sum();
                        cfg.cluster_separation * (r + cfg.task_offset * offset[i])
                    })
                    .collect()
            })
            .collect();
        let first = k * cfg.classes_per_task;
        let scale = cfg.input_scale(k);
        let train = sample_split(&means, first, cfg.train_size(k), scale, total, &mut rng);
        let val = sample_split(&means, first, cfg.val_samples, scale, total, &mut rng);
        let test = sample_split(&means, first, cfg.test_samples, scale, total, &mut rng);
        let keep = ((cfg.pretrain_fraction * train.len() as f64).round() as usize).clamp(1, train.len());
        pretrain_parts.push(train.select(&(0..keep).collect::<Vec<_>>())?);
        tasks.push(TaskData {
            task_id: task_id(k),
            train,
            val,
            test,
        });
    }
    let pretrain = Dataset::concat(&pretrain_parts.iter().collect::<Vec<_>>())?;
    Ok(TaskSuite { tasks, pretrain })
}

/// Predicted class of every row: argmax of the output probabilities, ties
/// to the lowest index.
pub fn predict(ckpt: &ModelCheckpoint, inputs: &Matrix) -> Result<Vec<usize>> {
    let probs = ckpt.forward(inputs)?;
    Ok((0..probs.rows()).map(|i| argmax(probs.row(i))).collect())
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate(ckpt: &ModelCheckpoint, test: &Dataset) -> Result<f64> {
    if test.num_classes() != ckpt.arch().num_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, model outputs {}",
            test.num_classes(),
            ckpt.arch().num_classes()
        )));
    }
    let pred = predict(ckpt, test.inputs())?;
    let hits = pred.iter().zip(test.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Adds seeded zero-mean Gaussian noise of standard deviation `sigma` to
/// every input; labels are untouched.
pub fn corrupt_gaussian(ds: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(ds.clone());
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = seeded(seed);
    let x = ds.inputs();
    let values = x.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
    ds.with_inputs(Matrix::new(x.rows(), x.cols(), values)?)
}

/// Random index permutation, used by tests of order invariance.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSuiteConfig {
        TaskSuiteConfig {
            num_tasks: 2,
            classes_per_task: 3,
            input_dim: 5,
            train_samples: 30,
            train_sizes: vec![],
            val_samples: 12,
            test_samples: 9,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_tasks(&small()).unwrap(), gen_tasks(&small()).unwrap());
    }

    #[test]
    fn disjoint_class_ranges_cover_space() {
        let s = gen_tasks(&small()).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (k, t) in s.tasks.iter().enumerate() {
            let labels: std::collections::BTreeSet<usize> = t.train.labels().iter().copied().collect();
            assert!(labels.iter().all(|&y| y / 3 == k));
            seen.extend(labels);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let r = random_rotation(6, &mut seeded(4));
        let g = r.matmul_transposed(&r).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let s = gen_tasks(&small()).unwrap();
        let z = ModelCheckpoint::zeros(small().arch().unwrap());
        let test = &s.tasks[0].test;
        let zeros = test.labels().iter().filter(|&&y| y == 0).count();
        assert_eq!(evaluate(&z, test).unwrap(), zeros as f64 / test.len() as f64);
    }

    #[test]
    fn self_labels_score_one_and_order_is_irrelevant() {
        let s = gen_tasks(&small()).unwrap();
        let m = ModelCheckpoint::init(small().arch().unwrap(), 3);
        let x = s.tasks[1].test.inputs().clone();
        let own = Dataset::new(x.clone(), predict(&m, &x).unwrap(), 6).unwrap();
        assert_eq!(evaluate(&m, &own).unwrap(), 1.0);
        let t = &s.tasks[1].test;
        let shuffled = t.select(&permutation(t.len(), 5)).unwrap();
        assert_eq!(evaluate(&m, t).unwrap(), evaluate(&m, &shuffled).unwrap());
    }

    #[test]
    fn noise_variance_and_zero_sigma() {
        let ds = Dataset::new(Matrix::zeros(1000, 10), vec![0; 1000], 1).unwrap();
        assert_eq!(corrupt_gaussian(&ds, 0.0, 1).unwrap(), ds);
        let c = corrupt_gaussian(&ds, 0.2, 1).unwrap();
        assert_eq!(c, corrupt_gaussian(&ds, 0.2, 1).unwrap());
        let v = c.inputs().values();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((var / 0.04 - 1.0).abs() < 0.05, "{var}");
        assert!(corrupt_gaussian(&ds, -1.0, 1).is_err());
    }
}
