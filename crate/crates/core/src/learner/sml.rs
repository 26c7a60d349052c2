use std::path::Path;

use rand::Rng;

use crate::checkpoint::format::Container;
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::learner::{normalize, CoefficientTable};
use crate::numerics::{dot, seeded, Matrix};
use crate::stats::{feature_vector, stats_table, MergeMode, StatsConfig};

/// Two-layer MLP `w2 . relu(w1 f + b1) + b2` scoring one statistics vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SmlParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Hidden activations of one scoring pass.
#[derive(Debug, Clone)]
pub(crate) struct SmlActivation {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub score: f64,
}

impl SmlParams {
    /// Seeded fan-in uniform init, `U(+-1/sqrt(fan_in))` per layer, so raw
    /// scores start near zero and coefficients near uniform.
    pub fn init(feature_len: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let b_in = 1.0 / (feature_len as f64).sqrt();
        let b_hid = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::random_uniform(hidden, feature_len, b_in, &mut rng);
        let b1 = Matrix::random_uniform(1, hidden, b_in, &mut rng);
        let w2 = Matrix::random_uniform(1, hidden, b_hid, &mut rng);
        let b2 = Matrix::row_vector(vec![rng.random_range(-b_hid..=b_hid)]);
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(feature_len: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, feature_len),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(1, hidden),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn new(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let h = w1.rows();
        if b1.shape() != (1, h) || w2.shape() != (1, h) || b2.shape() != (1, 1) {
            return Err(Error::shape(format!(
                "w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_len(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// `[w1, b1, w2, b2]` concatenated.
    pub fn flat(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|m| m.values().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} SML parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for m in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = m.len();
            m.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub(crate) fn activate(&self, feature: &[f64]) -> Result<SmlActivation> {
        if feature.len() != self.feature_len() {
            return Err(Error::shape(format!(
                "feature of length {} for an SML expecting {}",
                feature.len(),
                self.feature_len()
            )));
        }
        let pre: Vec<f64> = (0..self.hidden())
            .map(|j| dot(self.w1.row(j), feature) + self.b1.values()[j])
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let score = dot(self.w2.values(), &hidden) + self.b2.values()[0];
        Ok(SmlActivation { pre, hidden, score })
    }

    pub fn to_container(&self, mode: MergeMode, stats: &StatsConfig) -> Container {
        let mut c = Container::new("sml")
            .with_field("hidden", self.hidden())
            .with_field("feature_len", self.feature_len())
            .with_field("mode", mode)
            .with_field("stats", stats);
        c.push_f64("w1", self.w1.clone());
        c.push_f64("b1", self.b1.clone());
        c.push_f64("w2", self.w2.clone());
        c.push_f64("b2", self.b2.clone());
        c
    }

    /// Decodes an `sml` container, returning the merge mode and statistics
    /// settings it was trained with.
    pub fn from_container(c: &Container) -> Result<(Self, MergeMode, StatsConfig)> {
        c.expect_kind("sml")?;
        let params = Self::new(
            c.f64_section("w1")?.clone(),
            c.f64_section("b1")?.clone(),
            c.f64_section("w2")?.clone(),
            c.f64_section("b2")?.clone(),
        )
        .map_err(|e| Error::format(12, e.to_string()))?;
        let stats: StatsConfig = c.field("stats")?;
        if params.feature_len() != stats.feature_len() {
            return Err(Error::format(12, "feature length disagrees with stats rank"));
        }
        Ok((params, c.field("mode")?, stats))
    }

    pub fn save(&self, mode: MergeMode, stats: &StatsConfig, path: impl AsRef<Path>) -> Result<()> {
        self.to_container(mode, stats).write(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, MergeMode, StatsConfig)> {
        Self::from_container(&Container::read(path.as_ref())?)
    }
}

/// Raw score `w2 . relu(w1 f + b1) + b2` for one feature vector.
pub fn sml_forward(params: &SmlParams, feature: &[f64]) -> Result<f64> {
    Ok(params.activate(feature)?.score)
}

/// Scores every `(task, layer)` feature vector and normalizes across tasks.
pub fn predict_coefficients(
    params: &SmlParams,
    features: &[Vec<Vec<f64>>],
    mode: MergeMode,
) -> Result<CoefficientTable> {
    let raw = features
        .iter()
        .map(|row| row.iter().map(|f| sml_forward(params, f)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    normalize(&raw, mode)
}

/// Normalized statistics features of a set of task checkpoints.
pub fn merge_features(
    task_ckpts: &[ModelCheckpoint],
    stats_cfg: &StatsConfig,
    mode: MergeMode,
) -> Result<Vec<Vec<Vec<f64>>>> {
    feature_vector(&stats_table(task_ckpts, stats_cfg, mode)?, stats_cfg)
}
