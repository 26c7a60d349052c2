use rand::seq::SliceRandom;

use crate::checkpoint::{ArchSpec, Dataset, ModelCheckpoint, Role};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, seeded, softmax_rows, Matrix, OptimizerState, StepLr};

/// Mini-batch size for fine-tuning and distillation.
pub const TRAIN_BATCH_SIZE: usize = 32;

/// Probability floor inside logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(i);
        loss -= row[y].clamp(PROB_CLAMP, 1.0).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (loss / n, grad)
}

/// Shuffled mini-batch Adam loop shared by every trainer that updates a
/// checkpoint's own parameters.
///
/// `loss_grad` receives the batch row indices and the batch logits and
/// returns the loss gradient at those logits.
pub(crate) fn minibatch_train(
    ckpt: &mut ModelCheckpoint,
    inputs: &Matrix,
    epochs: usize,
    schedule: StepLr,
    seed: u64,
    mut loss_grad: impl FnMut(&[usize], &Matrix) -> Matrix,
) -> Result<()> {
    if inputs.cols() != ckpt.arch().input_dim() {
        return Err(Error::shape(format!(
            "data has {} features, model expects {}",
            inputs.cols(),
            ckpt.arch().input_dim()
        )));
    }
    let mut rng = seeded(seed);
    let mut flat = ckpt.flat_params();
    let mut opt = OptimizerState::new(flat.len(), schedule);
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(TRAIN_BATCH_SIZE) {
            let x = inputs.select_rows(batch);
            let trace = ckpt.forward_trace(&x)?;
            let upstream = loss_grad(batch, &trace.logits);
            let grads: Vec<f64> = ckpt
                .backward_from_trace(&trace, &upstream)?
                .into_iter()
                .flat_map(Matrix::into_values)
                .collect();
            adam_step(&mut flat, &grads, &mut opt, epoch)?;
            ckpt.set_flat_params(&flat)?;
        }
    }
    Ok(())
}

fn check_classes(ckpt: &ModelCheckpoint, data: &Dataset) -> Result<()> {
    if data.num_classes() != ckpt.arch().num_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes(),
            ckpt.arch().num_classes()
        )));
    }
    Ok(())
}

/// Trains a freshly initialized model of `arch` on `data` with CE + Adam.
/// The result is a `pretrained` checkpoint fingerprinted by its own weights.
pub fn pretrain(arch: ArchSpec, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<ModelCheckpoint> {
    let mut ckpt = ModelCheckpoint::init(arch, seed);
    check_classes(&ckpt, data)?;
    let labels = data.labels();
    minibatch_train(
        &mut ckpt,
        data.inputs(),
        epochs,
        StepLr::constant(lr),
        seed ^ 0x5EED,
        |rows, logits| {
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            softmax_ce(logits, &y).1
        },
    )?;
    let tensors = ckpt.tensors().cloned().collect();
    ModelCheckpoint::pretrained_from_tensors(ckpt.arch().clone(), tensors)
}

/// Fine-tunes a copy of `base` on one task's training data.
pub fn fine_tune(
    base: &ModelCheckpoint,
    train: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelCheckpoint> {
    if base.role() != Role::Pretrained {
        return Err(Error::param(format!(
            "fine-tuning starts from a pretrained checkpoint, got {:?}",
            base.role()
        )));
    }
    check_classes(base, train)?;
    let mut ckpt = base.clone().with_role(Role::Task);
    let labels = train.labels();
    minibatch_train(
        &mut ckpt,
        train.inputs(),
        epochs,
        StepLr::constant(lr),
        seed,
        |rows, logits| {
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            softmax_ce(logits, &y).1
        },
    )?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::argmax;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let y = rng.random_range(0..2usize);
            let sign = if y == 0 { -1.0 } else { 1.0 };
            values.push(sign * 2.0 + rng.random_range(-1.0..1.0));
            values.push(rng.random_range(-1.0..1.0));
            labels.push(y);
        }
        Dataset::new(Matrix::new(n, 2, values).unwrap(), labels, 2).unwrap()
    }

    fn accuracy(c: &ModelCheckpoint, d: &Dataset) -> f64 {
        let p = c.forward(d.inputs()).unwrap();
        let hits = (0..d.len()).filter(|&i| argmax(p.row(i)) == d.labels()[i]).count();
        hits as f64 / d.len() as f64
    }

    #[test]
    fn ce_gradient_at_uniform() {
        let (loss, g) = softmax_ce(&Matrix::zeros(1, 2), &[0]);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.values(), &[-0.5, 0.5]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let base = ModelCheckpoint::init(ArchSpec::mlp(&[2, 8, 2]).unwrap(), 1);
        let t = fine_tune(&base, &separable(40, 2), 0, 1e-3, 3).unwrap();
        assert_eq!(t.params(), base.params());
        assert_eq!(t.role(), Role::Task);
        assert_eq!(t.meta.base_fingerprint, base.meta.base_fingerprint);
    }

    #[test]
    fn deterministic_and_pure() {
        let base = ModelCheckpoint::init(ArchSpec::mlp(&[2, 8, 2]).unwrap(), 1);
        let snapshot = base.clone();
        let d = separable(64, 2);
        let a = fine_tune(&base, &d, 5, 1e-2, 9).unwrap();
        let b = fine_tune(&base, &d, 5, 1e-2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(base, snapshot);
    }

    #[test]
    fn separable_task_fits() {
        let base = ModelCheckpoint::init(ArchSpec::mlp(&[2, 16, 2]).unwrap(), 11);
        let d = separable(200, 12);
        let t = fine_tune(&base, &d, 200, 1e-3, 13).unwrap();
        assert!(accuracy(&t, &d) >= 0.99);
    }

    #[test]
    fn rejects_non_pretrained_and_bad_dims() {
        let base = ModelCheckpoint::init(ArchSpec::mlp(&[3, 4, 2]).unwrap(), 1);
        assert!(matches!(
            fine_tune(&base, &separable(8, 1), 1, 1e-3, 1),
            Err(Error::Shape(_))
        ));
        let task = base.clone().with_role(Role::Task);
        assert!(fine_tune(&task, &separable(8, 1), 1, 1e-3, 1).is_err());
    }
}
