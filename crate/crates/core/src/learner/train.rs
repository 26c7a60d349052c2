use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{softmax_ce, Dataset, ModelCheckpoint};
use crate::distill::{softmax_kl, PseudoLabeledSet};
use crate::error::{Error, Result};
use crate::learner::{merge_features, normalize, CoefficientTable, SmlParams};
use crate::merge::{check_compatible, stats_merge};
use crate::numerics::{adam_step, derive_seed, seeded, Matrix, OptimizerState, StepLr};
use crate::stats::{MergeMode, StatsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Teacher argmax labels with cross-entropy.
    KdHard,
    /// Teacher probability rows with KL divergence.
    KdSoft,
    /// Annotated labels with cross-entropy.
    GroundTruth,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kd_hard" => Ok(LabelMode::KdHard),
            "kd_soft" => Ok(LabelMode::KdSoft),
            "ground_truth" => Ok(LabelMode::GroundTruth),
            other => Err(Error::param(format!("unknown label mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmlTrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub label_mode: LabelMode,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SmlTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            base_lr: 1e-3,
            decay_every: 100,
            decay_factor: 0.1,
            batch_size: 32,
            label_mode: LabelMode::KdHard,
            hidden: 64,
            seed: 0,
        }
    }
}

impl SmlTrainConfig {
    pub fn schedule(&self) -> StepLr {
        StepLr {
            base_lr: self.base_lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::param("epochs, batch_size and hidden must be at least 1"));
        }
        Ok(())
    }
}

/// What the learner is supervised with. Pseudo-labeled sets hold no
/// annotations; only the ground-truth variant sees real labels.
#[derive(Debug, Clone, Copy)]
pub enum SupervisionSet<'a> {
    Pseudo(&'a PseudoLabeledSet),
    GroundTruth(&'a Dataset),
}

/// Per-row targets aligned with an input matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Hard(Vec<usize>),
    Soft(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Soft(p) => p.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Hard(y) => Targets::Hard(rows.iter().map(|&i| y[i]).collect()),
            Targets::Soft(p) => Targets::Soft(p.select_rows(rows)),
        }
    }

    /// Mean loss of `logits` against these targets and its gradient.
    pub fn loss_and_grad(&self, logits: &Matrix) -> Result<(f64, Matrix)> {
        if self.len() != logits.rows() {
            return Err(Error::shape(format!(
                "{} targets for {} rows",
                self.len(),
                logits.rows()
            )));
        }
        Ok(match self {
            Targets::Hard(y) => softmax_ce(logits, y),
            Targets::Soft(p) => {
                if p.cols() != logits.cols() {
                    return Err(Error::shape("soft targets and logits disagree on classes"));
                }
                softmax_kl(logits, p)
            }
        })
    }
}

/// `dLoss/dlambda_k^l` for one model layer: the inner product of the merged
/// layer's gradient (weight and bias) with task `k`'s layer tensors.
pub fn coefficient_gradient(task_ckpts: &[ModelCheckpoint], merged_grads: &[Matrix], layer: usize) -> Result<Vec<f64>> {
    let first = task_ckpts.first().ok_or_else(|| Error::param("no task checkpoints"))?;
    if merged_grads.len() != first.params().len() || layer >= first.num_layers() {
        return Err(Error::shape(format!(
            "{} gradient tensors for {} parameters (layer {layer})",
            merged_grads.len(),
            first.params().len()
        )));
    }
    task_ckpts
        .iter()
        .map(
            |c| Ok(merged_grads[2 * layer].inner(c.weight(layer))? + merged_grads[2 * layer + 1].inner(c.bias(layer))?),
        )
        .collect()
}

/// The learner's training objective for a fixed set of frozen task models:
/// features -> SML scores -> softmax coefficients -> merged model -> loss.
#[derive(Debug, Clone)]
pub struct SmlObjective<'a> {
    task_ckpts: &'a [ModelCheckpoint],
    features: Vec<Vec<Vec<f64>>>,
    mode: MergeMode,
}

impl<'a> SmlObjective<'a> {
    pub fn new(task_ckpts: &'a [ModelCheckpoint], stats_cfg: &StatsConfig, mode: MergeMode) -> Result<Self> {
        check_compatible(task_ckpts)?;
        let features = merge_features(task_ckpts, stats_cfg, mode)?;
        Ok(Self {
            task_ckpts,
            features,
            mode,
        })
    }

    pub fn features(&self) -> &[Vec<Vec<f64>>] {
        &self.features
    }

    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    pub fn coefficients(&self, params: &SmlParams) -> Result<CoefficientTable> {
        crate::learner::predict_coefficients(params, &self.features, self.mode)
    }

    pub fn merged(&self, params: &SmlParams) -> Result<ModelCheckpoint> {
        stats_merge(self.task_ckpts, &self.coefficients(params)?)
    }

    pub fn loss(&self, params: &SmlParams, inputs: &Matrix, targets: &Targets) -> Result<f64> {
        let logits = self.merged(params)?.logits(inputs)?;
        Ok(targets.loss_and_grad(&logits)?.0)
    }

    /// Loss and its gradient with respect to the flattened SML parameters
    /// (`[w1, b1, w2, b2]` order).
    pub fn loss_and_grad(&self, params: &SmlParams, inputs: &Matrix, targets: &Targets) -> Result<(f64, Vec<f64>)> {
        let acts = self
            .features
            .iter()
            .map(|row| row.iter().map(|f| params.activate(f)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let raw: Vec<Vec<f64>> = acts.iter().map(|row| row.iter().map(|a| a.score).collect()).collect();
        let table = normalize(&raw, self.mode)?;
        let merged = stats_merge(self.task_ckpts, &table)?;
        let trace = merged.forward_trace(inputs)?;
        let (loss, upstream) = targets.loss_and_grad(&trace.logits)?;
        let grads = merged.backward_from_trace(&trace, &upstream)?;

        // dLoss/dlambda, folded onto the table's columns.
        let k_count = self.task_ckpts.len();
        let cols = table.num_layers();
        let mut d_lambda = vec![vec![0.0; cols]; k_count];
        for layer in 0..merged.num_layers() {
            let g = coefficient_gradient(self.task_ckpts, &grads, layer)?;
            let col = match self.mode {
                MergeMode::TaskWise => 0,
                MergeMode::LayerWise => layer,
            };
            for (k, gk) in g.into_iter().enumerate() {
                d_lambda[k][col] += gk;
            }
        }

        // Softmax backward per column, then the MLP backward per entry.
        let h = params.hidden();
        let f_len = params.feature_len();
        let mut dw1 = vec![0.0; h * f_len];
        let mut db1 = vec![0.0; h];
        let mut dw2 = vec![0.0; h];
        let mut db2 = 0.0;
        for c in 0..cols {
            let weighted: f64 = (0..k_count).map(|k| table.values()[k][c] * d_lambda[k][c]).sum();
            for k in 0..k_count {
                let ds = table.values()[k][c] * (d_lambda[k][c] - weighted);
                let act = &acts[k][c];
                let feature = &self.features[k][c];
                db2 += ds;
                for j in 0..h {
                    dw2[j] += ds * act.hidden[j];
                    if act.pre[j] > 0.0 {
                        let dpre = ds * params.w2.values()[j];
                        db1[j] += dpre;
                        for (d, &x) in dw1[j * f_len..(j + 1) * f_len].iter_mut().zip(feature) {
                            *d += dpre * x;
                        }
                    }
                }
            }
        }
        let mut flat = dw1;
        flat.extend(db1);
        flat.extend(dw2);
        flat.push(db2);
        Ok((loss, flat))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Loss over the whole supervision set after this epoch's updates.
    pub loss: f64,
    pub coefficients: CoefficientTable,
}

#[derive(Debug, Clone)]
pub struct SmlTrainOutcome {
    pub params: SmlParams,
    pub coefficients: CoefficientTable,
    /// Whole-set loss before the first update.
    pub initial_loss: f64,
    pub history: Vec<EpochRecord>,
}

impl SmlTrainOutcome {
    /// Distinct learning rates in the order they were used.
    pub fn lr_plateaus(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.history {
            if out.last() != Some(&r.lr) {
                out.push(r.lr);
            }
        }
        out
    }
}

fn supervision(set: SupervisionSet<'_>, mode: LabelMode) -> Result<(&Matrix, Targets, usize)> {
    match (set, mode) {
        (SupervisionSet::Pseudo(p), LabelMode::KdHard) => {
            Ok((p.inputs(), Targets::Hard(p.hard_label().to_vec()), p.num_classes()))
        }
        (SupervisionSet::Pseudo(p), LabelMode::KdSoft) => {
            Ok((p.inputs(), Targets::Soft(p.soft_label().clone()), p.num_classes()))
        }
        (SupervisionSet::GroundTruth(d), LabelMode::GroundTruth) => {
            Ok((d.inputs(), Targets::Hard(d.labels().to_vec()), d.num_classes()))
        }
        (_, mode) => Err(Error::param(format!(
            "label mode {mode:?} does not match the supervision set"
        ))),
    }
}

/// Trains the learner on frozen task checkpoints. Each epoch shuffles the
/// supervision set, takes Adam steps on mini-batches, then records the
/// whole-set loss and the current coefficient table.
pub fn train_sml(
    task_ckpts: &[ModelCheckpoint],
    set: SupervisionSet<'_>,
    cfg: &SmlTrainConfig,
    stats_cfg: &StatsConfig,
    mode: MergeMode,
) -> Result<SmlTrainOutcome> {
    cfg.validate()?;
    stats_cfg.validate()?;
    let (inputs, targets, classes) = supervision(set, cfg.label_mode)?;
    if targets.is_empty() {
        return Err(Error::param("empty supervision set"));
    }
    let objective = SmlObjective::new(task_ckpts, stats_cfg, mode)?;
    if classes != task_ckpts[0].arch().num_classes() {
        return Err(Error::param(format!(
            "supervision has {classes} classes, models output {}",
            task_ckpts[0].arch().num_classes()
        )));
    }

    let mut params = SmlParams::init(
        stats_cfg.feature_len(),
        cfg.hidden,
        derive_seed(cfg.seed, "sml-init", 0),
    );
    let mut flat = params.flat();
    let schedule = cfg.schedule();
    let mut opt = OptimizerState::new(flat.len(), schedule);
    let mut rng = seeded(derive_seed(cfg.seed, "sml-shuffle", 0));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let initial_loss = objective.loss(&params, inputs, &targets)?;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = inputs.select_rows(batch);
            let (_, grad) = objective.loss_and_grad(&params, &x, &targets.select(batch))?;
            adam_step(&mut flat, &grad, &mut opt, epoch)?;
            params.set_flat(&flat)?;
        }
        history.push(EpochRecord {
            epoch,
            lr: schedule.lr_at(epoch),
            loss: objective.loss(&params, inputs, &targets)?,
            coefficients: objective.coefficients(&params)?,
        });
    }
    let coefficients = objective.coefficients(&params)?;
    Ok(SmlTrainOutcome {
        params,
        coefficients,
        initial_loss,
        history,
    })
}
