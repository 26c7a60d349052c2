//! Weight-distribution statistics: mean, population variance, Frobenius
//! magnitude and the leading singular values of each weight tensor.

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::numerics::{all_singular_values, Matrix, DEFAULT_SVD_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Number of leading singular values kept.
    pub rank: usize,
    /// Z-score every feature channel across the whole table.
    pub normalize: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            normalize: true,
        }
    }
}

impl StatsConfig {
    pub fn feature_len(&self) -> usize {
        3 + self.rank
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::param("stats rank must be at least 1"));
        }
        Ok(())
    }
}

/// Granularity of merging coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    TaskWise,
    LayerWise,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_wise" | "task-wise" | "tw" => Ok(MergeMode::TaskWise),
            "layer_wise" | "layer-wise" | "lw" => Ok(MergeMode::LayerWise),
            other => Err(Error::param(format!("unknown merge mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mu: f64,
    pub var: f64,
    pub norm: f64,
    /// Leading singular values, descending, zero-padded to the configured rank.
    pub singular: Vec<f64>,
}

impl WeightStats {
    /// `[mu, var, norm, sv_1, ..., sv_r]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = vec![self.mu, self.var, self.norm];
        v.extend_from_slice(&self.singular);
        v
    }
}

pub fn layer_stats(weight: &Matrix, cfg: &StatsConfig) -> Result<WeightStats> {
    cfg.validate()?;
    if weight.is_empty() {
        return Err(Error::param("statistics of an empty matrix"));
    }
    let n = weight.len() as f64;
    let mu = weight.values().iter().sum::<f64>() / n;
    let var = weight.values().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let norm = weight.frobenius_norm();
    let mut singular = all_singular_values(weight, DEFAULT_SVD_TOL);
    singular.resize(cfg.rank, 0.0);
    Ok(WeightStats {
        mu,
        var,
        norm,
        singular,
    })
}

/// Elementwise mean of `layer_stats` over the weight tensors (biases excluded).
pub fn task_stats(ckpt: &ModelCheckpoint, cfg: &StatsConfig) -> Result<WeightStats> {
    let per_layer = layer_stats_all(ckpt, cfg)?;
    Ok(mean_stats(&per_layer))
}

/// `layer_stats` for every weight tensor, in layer order.
pub fn layer_stats_all(ckpt: &ModelCheckpoint, cfg: &StatsConfig) -> Result<Vec<WeightStats>> {
    (0..ckpt.num_layers())
        .map(|l| layer_stats(ckpt.weight(l), cfg))
        .collect()
}

fn mean_stats(records: &[WeightStats]) -> WeightStats {
    let n = records.len() as f64;
    let rank = records[0].singular.len();
    let mut out = WeightStats {
        mu: 0.0,
        var: 0.0,
        norm: 0.0,
        singular: vec![0.0; rank],
    };
    for r in records {
        out.mu += r.mu;
        out.var += r.var;
        out.norm += r.norm;
        for (o, s) in out.singular.iter_mut().zip(&r.singular) {
            *o += s;
        }
    }
    out.mu /= n;
    out.var /= n;
    out.norm /= n;
    for o in &mut out.singular {
        *o /= n;
    }
    out
}

/// The `K x L` statistics table feeding the learner: one row per task, one
/// column per layer (layer-wise) or a single task-level column (task-wise).
pub fn stats_table(ckpts: &[ModelCheckpoint], cfg: &StatsConfig, mode: MergeMode) -> Result<Vec<Vec<WeightStats>>> {
    ckpts
        .iter()
        .map(|c| match mode {
            MergeMode::LayerWise => layer_stats_all(c, cfg),
            MergeMode::TaskWise => Ok(vec![task_stats(c, cfg)?]),
        })
        .collect()
}

/// Flattens every record to `[mu, var, norm, sv_1..sv_r]`; with
/// normalization on, each channel is z-scored over all `K x L` entries
/// (population std; zero-variance channels become 0).
pub fn feature_vector(table: &[Vec<WeightStats>], cfg: &StatsConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    let width = table
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::param("empty stats table"))?;
    if width == 0 || table.iter().any(|row| row.len() != width) {
        return Err(Error::shape("stats table must be rectangular and non-empty"));
    }
    let mut features: Vec<Vec<Vec<f64>>> = table
        .iter()
        .map(|row| row.iter().map(WeightStats::flatten).collect())
        .collect();
    if !cfg.normalize {
        return Ok(features);
    }
    let len = features[0][0].len();
    let count = (table.len() * width) as f64;
    for c in 0..len {
        let mean = features.iter().flatten().map(|f| f[c]).sum::<f64>() / count;
        let var = features
            .iter()
            .flatten()
            .map(|f| (f[c] - mean) * (f[c] - mean))
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        for f in features.iter_mut().flatten() {
            f[c] = if std > 0.0 { (f[c] - mean) / std } else { 0.0 };
        }
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ArchSpec;

    fn cfg(rank: usize) -> StatsConfig {
        StatsConfig { rank, normalize: true }
    }

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn zero_matrix() {
        let s = layer_stats(&Matrix::zeros(2, 2), &cfg(2)).unwrap();
        assert_eq!(
            s,
            WeightStats {
                mu: 0.0,
                var: 0.0,
                norm: 0.0,
                singular: vec![0.0, 0.0]
            }
        );
    }

    #[test]
    fn identity() {
        let s = layer_stats(&Matrix::identity(3), &cfg(3)).unwrap();
        assert!(approx(s.mu, 1.0 / 3.0) && approx(s.var, 2.0 / 9.0) && approx(s.norm, 3f64.sqrt()));
        assert!(s.singular.iter().all(|&v| approx(v, 1.0)));
    }

    #[test]
    fn diag_three_four() {
        let s = layer_stats(&Matrix::from_diag(&[3.0, 4.0]), &cfg(2)).unwrap();
        assert!(approx(s.mu, 1.75) && approx(s.var, 3.1875) && approx(s.norm, 5.0));
        assert_eq!(s.singular, vec![4.0, 3.0]);
    }

    #[test]
    fn rank_shortfall_pads_with_zeros() {
        let s = layer_stats(&Matrix::row_vector(vec![3.0, 4.0]), &cfg(3)).unwrap();
        assert!(approx(s.singular[0], 5.0));
        assert_eq!(&s.singular[1..], &[0.0, 0.0]);
    }

    #[test]
    fn rank_zero_rejected() {
        assert!(layer_stats(&Matrix::identity(2), &cfg(0)).is_err());
    }

    #[test]
    fn task_mean_of_two_layers() {
        let arch = ArchSpec::mlp(&[2, 2, 2]).unwrap();
        let c = crate::checkpoint::ModelCheckpoint::pretrained_from_tensors(
            arch,
            vec![
                Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap(),
                Matrix::zeros(1, 2),
                Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
                Matrix::zeros(1, 2),
            ],
        )
        .unwrap();
        let s = task_stats(&c, &cfg(2)).unwrap();
        assert!(approx(s.mu, 0.5));
    }

    #[test]
    fn single_entry_normalizes_to_zero() {
        let s = layer_stats(&Matrix::identity(3), &cfg(3)).unwrap();
        let f = feature_vector(&[vec![s]], &cfg(3)).unwrap();
        assert!(f[0][0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_order_when_not_normalized() {
        let s = layer_stats(&Matrix::from_diag(&[3.0, 4.0]), &cfg(2)).unwrap();
        let f = feature_vector(
            &[vec![s]],
            &StatsConfig {
                rank: 2,
                normalize: false,
            },
        )
        .unwrap();
        assert_eq!(f[0][0], vec![1.75, 3.1875, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn two_entry_zscore() {
        let a = WeightStats {
            mu: 0.0,
            var: 1.0,
            norm: 1.0,
            singular: vec![1.0],
        };
        let b = WeightStats {
            mu: 2.0,
            var: 1.0,
            norm: 1.0,
            singular: vec![1.0],
        };
        let f = feature_vector(&[vec![a], vec![b]], &cfg(1)).unwrap();
        assert_eq!((f[0][0][0], f[1][0][0]), (-1.0, 1.0));
        assert_eq!(f[0][0][1], 0.0);
    }

    #[test]
    fn ragged_table_rejected() {
        let a = layer_stats(&Matrix::identity(2), &cfg(1)).unwrap();
        assert!(feature_vector(&[vec![a.clone(), a.clone()], vec![a]], &cfg(1)).is_err());
    }
}
