//! Building merged checkpoints: the coefficient-weighted combination used by
//! StatsMerging, plus the Weight Averaging, Task Arithmetic and
//! Ties-Merging baselines.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Meta, ModelCheckpoint, Role};
use crate::error::{Error, Result};
use crate::learner::CoefficientTable;
use crate::numerics::Matrix;
use crate::stats::MergeMode;

/// Default Ties-Merging trim fraction.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Stats,
    WeightAvg,
    TaskArithmetic,
    Ties,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(MergeMethod::Stats),
            "weight_avg" => Ok(MergeMethod::WeightAvg),
            "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            other => Err(Error::param(format!("unknown merge method `{other}`"))),
        }
    }
}

/// A fully specified merge.
#[derive(Debug, Clone)]
pub struct MergeRequest {
    pub method: MergeMethod,
    pub mode: Option<MergeMode>,
    pub coefficients: Option<CoefficientTable>,
    pub scaling: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub base: Option<ModelCheckpoint>,
    /// Stats merging over task vectors, `base + sum_k lambda_k (theta_k - base)`.
    pub delta: bool,
}

impl MergeRequest {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            mode: None,
            coefficients: None,
            scaling: None,
            keep_fraction: None,
            base: None,
            delta: false,
        }
    }

    pub fn run(&self, task_ckpts: &[ModelCheckpoint]) -> Result<ModelCheckpoint> {
        let need_base = || {
            self.base
                .as_ref()
                .ok_or_else(|| Error::param(format!("{:?} needs a pretrained base", self.method)))
        };
        let need_scaling = || {
            self.scaling
                .ok_or_else(|| Error::param(format!("{:?} needs a scaling coefficient", self.method)))
        };
        match self.method {
            MergeMethod::Stats => {
                let coeffs = self
                    .coefficients
                    .as_ref()
                    .ok_or_else(|| Error::param("stats merge needs a coefficient table"))?;
                if let Some(mode) = self.mode {
                    if mode != coeffs.mode() {
                        return Err(Error::param(format!(
                            "requested {mode:?} merge with a {:?} table",
                            coeffs.mode()
                        )));
                    }
                }
                if self.delta {
                    stats_merge_delta(need_base()?, task_ckpts, coeffs)
                } else {
                    stats_merge(task_ckpts, coeffs)
                }
            }
            MergeMethod::WeightAvg => weight_average(task_ckpts),
            MergeMethod::TaskArithmetic => task_arithmetic(need_base()?, task_ckpts, need_scaling()?),
            MergeMethod::Ties => ties_merge(
                need_base()?,
                task_ckpts,
                need_scaling()?,
                self.keep_fraction.unwrap_or(DEFAULT_KEEP_FRACTION),
            ),
        }
    }
}

/// Fails unless every checkpoint shares the first one's arch and fingerprint.
pub fn check_compatible(ckpts: &[ModelCheckpoint]) -> Result<()> {
    let first = ckpts.first().ok_or_else(|| Error::param("no checkpoints to merge"))?;
    for (k, c) in ckpts.iter().enumerate().skip(1) {
        if !first.is_merge_compatible(c) {
            return Err(Error::compat(format!(
                "checkpoint {k} ({} / {:016x}) does not match checkpoint 0 ({} / {:016x})",
                c.arch(),
                c.meta.base_fingerprint,
                first.arch(),
                first.meta.base_fingerprint
            )));
        }
    }
    Ok(())
}

fn merged_meta(from: &ModelCheckpoint) -> Meta {
    Meta {
        role: Role::Merged,
        task_id: None,
        base_fingerprint: from.meta.base_fingerprint,
    }
}

fn check_table(ckpts: &[ModelCheckpoint], coeffs: &CoefficientTable) -> Result<()> {
    if coeffs.num_tasks() != ckpts.len() {
        return Err(Error::shape(format!(
            "{} coefficient rows for {} checkpoints",
            coeffs.num_tasks(),
            ckpts.len()
        )));
    }
    let layers = ckpts[0].num_layers();
    if coeffs.mode() == MergeMode::LayerWise && coeffs.num_layers() != layers {
        return Err(Error::shape(format!(
            "{} coefficient columns for {layers} layers",
            coeffs.num_layers()
        )));
    }
    Ok(())
}

/// `sum_k lambda_k^l theta_k^l` per tensor, accumulated in task order. The
/// result is clamped into the coordinatewise hull of the inputs, which only
/// ever removes rounding error.
fn convex_combination(ckpts: &[ModelCheckpoint], coeffs: &CoefficientTable) -> Vec<Matrix> {
    let n_params = ckpts[0].params().len();
    (0..n_params)
        .map(|p| {
            let layer = ModelCheckpoint::layer_of(p);
            let shape = ckpts[0].params()[p].tensor.shape();
            let mut acc = Matrix::zeros(shape.0, shape.1);
            for (k, c) in ckpts.iter().enumerate() {
                let lambda = coeffs.lambda(k, layer);
                for (a, &v) in acc.values_mut().iter_mut().zip(c.params()[p].tensor.values()) {
                    *a += lambda * v;
                }
            }
            for (i, a) in acc.values_mut().iter_mut().enumerate() {
                let (lo, hi) = ckpts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                    let v = c.params()[p].tensor.values()[i];
                    (lo.min(v), hi.max(v))
                });
                *a = a.clamp(lo, hi);
            }
            acc
        })
        .collect()
}

/// StatsMerging: every tensor of layer `l` is the `lambda^l`-weighted sum of
/// the task tensors (biases use their layer's coefficient).
pub fn stats_merge(task_ckpts: &[ModelCheckpoint], coeffs: &CoefficientTable) -> Result<ModelCheckpoint> {
    check_compatible(task_ckpts)?;
    check_table(task_ckpts, coeffs)?;
    let tensors = convex_combination(task_ckpts, coeffs);
    task_ckpts[0].with_tensors(tensors, merged_meta(&task_ckpts[0]))
}

/// StatsMerging on task vectors: `base + sum_k lambda_k^l (theta_k^l - base^l)`.
pub fn stats_merge_delta(
    base: &ModelCheckpoint,
    task_ckpts: &[ModelCheckpoint],
    coeffs: &CoefficientTable,
) -> Result<ModelCheckpoint> {
    check_against_base(base, task_ckpts)?;
    check_table(task_ckpts, coeffs)?;
    let tensors = base
        .params()
        .iter()
        .enumerate()
        .map(|(p, bp)| {
            let layer = ModelCheckpoint::layer_of(p);
            let mut out = bp.tensor.clone();
            for (k, c) in task_ckpts.iter().enumerate() {
                let tau = c.params()[p].tensor.sub(&bp.tensor)?;
                out.add_scaled(&tau, coeffs.lambda(k, layer))?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    base.with_tensors(tensors, merged_meta(base))
}

/// Unweighted mean of every tensor: StatsMerging with `lambda = 1/K`.
pub fn weight_average(task_ckpts: &[ModelCheckpoint]) -> Result<ModelCheckpoint> {
    check_compatible(task_ckpts)?;
    let uniform = CoefficientTable::uniform(MergeMode::TaskWise, task_ckpts.len(), 1);
    stats_merge(task_ckpts, &uniform)
}

fn check_against_base(base: &ModelCheckpoint, task_ckpts: &[ModelCheckpoint]) -> Result<()> {
    check_compatible(task_ckpts)?;
    if !base.is_merge_compatible(&task_ckpts[0]) {
        return Err(Error::compat(format!(
            "task checkpoints ({:016x}) do not descend from the given base ({:016x})",
            task_ckpts[0].meta.base_fingerprint, base.meta.base_fingerprint
        )));
    }
    Ok(())
}

/// Task vectors `theta_k - base`, one flat vector per task.
pub fn task_vectors(base: &ModelCheckpoint, task_ckpts: &[ModelCheckpoint]) -> Vec<Vec<f64>> {
    let b = base.flat_params();
    task_ckpts
        .iter()
        .map(|c| c.flat_params().iter().zip(&b).map(|(t, p)| t - p).collect())
        .collect()
}

fn rebuild(base: &ModelCheckpoint, flat: &[f64]) -> Result<ModelCheckpoint> {
    let mut out = base.clone();
    out.set_flat_params(flat)?;
    out.meta = merged_meta(base);
    Ok(out)
}

/// `base + scaling * sum_k (theta_k - base)`.
pub fn task_arithmetic(
    base: &ModelCheckpoint,
    task_ckpts: &[ModelCheckpoint],
    scaling: f64,
) -> Result<ModelCheckpoint> {
    check_against_base(base, task_ckpts)?;
    let taus = task_vectors(base, task_ckpts);
    let mut sum = vec![0.0; taus[0].len()];
    for tau in &taus {
        for (s, t) in sum.iter_mut().zip(tau) {
            *s += t;
        }
    }
    let flat: Vec<f64> = base
        .flat_params()
        .iter()
        .zip(&sum)
        .map(|(b, s)| b + scaling * s)
        .collect();
    rebuild(base, &flat)
}

/// Number of entries kept when trimming `n` values to `keep_fraction`.
pub fn trim_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64).round() as usize).clamp(1, n)
}

/// Zeroes all but the `trim_count` largest-magnitude entries (ties keep the
/// lower index).
pub fn trim(tau: &[f64], keep_fraction: f64) -> Vec<f64> {
    let keep = trim_count(tau.len(), keep_fraction);
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&a, &b| tau[b].abs().total_cmp(&tau[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; tau.len()];
    for &i in &order[..keep] {
        out[i] = tau[i];
    }
    out
}

/// Trim, elect sign, disjoint mean over flat task vectors.
pub fn ties_merge_vectors(taus: &[Vec<f64>], keep_fraction: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = taus.iter().map(|t| trim(t, keep_fraction)).collect();
    let dim = taus[0].len();
    (0..dim)
        .map(|i| {
            let (mut pos, mut neg) = (0.0, 0.0);
            for t in &trimmed {
                if t[i] > 0.0 {
                    pos += t[i];
                } else {
                    neg -= t[i];
                }
            }
            let sign = if pos > neg {
                1.0
            } else if neg > pos {
                -1.0
            } else {
                return 0.0;
            };
            let (mut sum, mut count) = (0.0, 0usize);
            for t in &trimmed {
                if t[i] * sign > 0.0 {
                    sum += t[i];
                    count += 1;
                }
            }
            sum / count as f64
        })
        .collect()
}

/// Ties-Merging: `base + scaling * ties(tau_1..tau_K)` with per-task global
/// trimming over the full flattened parameter vector.
pub fn ties_merge(
    base: &ModelCheckpoint,
    task_ckpts: &[ModelCheckpoint],
    scaling: f64,
    keep_fraction: f64,
) -> Result<ModelCheckpoint> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::param(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    check_against_base(base, task_ckpts)?;
    let merged = ties_merge_vectors(&task_vectors(base, task_ckpts), keep_fraction);
    let flat: Vec<f64> = base
        .flat_params()
        .iter()
        .zip(&merged)
        .map(|(b, m)| b + scaling * m)
        .collect();
    rebuild(base, &flat)
}
