//! Independent checks of the numerical pieces against hand-written references.

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;
use statsmerge::checkpoint::{softmax_ce, ArchSpec, Meta, ModelCheckpoint, Role};
use statsmerge::distill::{distillation_loss, kl_loss, soften, DistillConfig};
use statsmerge::learner::coefficient_gradient;
use statsmerge::numerics::{all_singular_values, seeded, softmax, Matrix, DEFAULT_SVD_TOL};
use statsmerge::stats::{feature_vector, layer_stats, stats_table, MergeMode, StatsConfig};

fn matrix_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn singular_values_transpose_invariant(m in matrix_strategy()) {
        let a = all_singular_values(&m, DEFAULT_SVD_TOL);
        let b = all_singular_values(&m.transpose(), DEFAULT_SVD_TOL);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn singular_values_scale_linearly(m in matrix_strategy(), c in -3.0f64..3.0) {
        let a = all_singular_values(&m, DEFAULT_SVD_TOL);
        let b = all_singular_values(&m.scale(c), DEFAULT_SVD_TOL);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * c.abs() - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn squared_singular_values_sum_to_frobenius(m in matrix_strategy()) {
        let s: f64 = all_singular_values(&m, DEFAULT_SVD_TOL).iter().map(|v| v * v).sum();
        let f = m.frobenius_norm().powi(2);
        prop_assert!((s - f).abs() <= 1e-9 * (1.0 + f));
    }

    #[test]
    fn singular_values_sorted_and_nonnegative(m in matrix_strategy()) {
        let s = all_singular_values(&m, DEFAULT_SVD_TOL);
        prop_assert_eq!(s.len(), m.rows().min(m.cols()));
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn diagonal_singular_values() {
    let m = Matrix::from_diag(&[3.0, -7.0, 0.5]);
    let s = all_singular_values(&m, DEFAULT_SVD_TOL);
    assert_relative_eq!(s[0], 7.0, max_relative = 1e-12);
    assert_relative_eq!(s[1], 3.0, max_relative = 1e-12);
    assert_relative_eq!(s[2], 0.5, max_relative = 1e-12);
}

#[test]
fn identity_layer_statistics() {
    let s = layer_stats(&Matrix::identity(3), &StatsConfig::default()).unwrap();
    assert_relative_eq!(s.mu, 1.0 / 3.0, epsilon = 1e-15);
    assert_relative_eq!(s.var, 2.0 / 9.0, epsilon = 1e-15);
    assert_relative_eq!(s.norm, 3f64.sqrt(), epsilon = 1e-15);
    for v in &s.singular {
        assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn normalized_features_have_unit_moments() {
    let arch = ArchSpec::mlp(&[5, 7, 6, 3]).unwrap();
    let ckpts: Vec<ModelCheckpoint> = (0..4).map(|s| ModelCheckpoint::init(arch.clone(), s)).collect();
    let cfg = StatsConfig::default();
    let table = stats_table(&ckpts, &cfg, MergeMode::LayerWise).unwrap();
    let f = feature_vector(&table, &cfg).unwrap();
    let n = 12.0;
    for c in 0..cfg.feature_len() {
        let vals: Vec<f64> = f.iter().flatten().map(|v| v[c]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-12, "channel {c} var {var}");
    }
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let cfg = DistillConfig {
        alpha: 0.5,
        temperature: 2.0,
        ..Default::default()
    };
    let teacher = Matrix::from_rows(&[vec![1.5, -0.5], vec![-2.0, 0.3], vec![0.2, 0.1]]).unwrap();
    let student = Matrix::from_rows(&[vec![0.3, 0.9], vec![-0.4, 1.1], vec![2.0, -1.0]]).unwrap();
    let labels = [0, 1, 0];
    let (_, grad) = distillation_loss(&student, &teacher, &labels, &cfg).unwrap();
    let h = 1e-6;
    for i in 0..student.len() {
        let mut up = student.clone();
        up.values_mut()[i] += h;
        let mut down = student.clone();
        down.values_mut()[i] -= h;
        let fd = (distillation_loss(&up, &teacher, &labels, &cfg).unwrap().0
            - distillation_loss(&down, &teacher, &labels, &cfg).unwrap().0)
            / (2.0 * h);
        assert_relative_eq!(grad.values()[i], fd, epsilon = 1e-8, max_relative = 1e-6);
    }
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = seeded(11);
    for _ in 0..100 {
        let n = rng.random_range(2..8);
        let p = softmax(&(0..n).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>());
        let q = softmax(&(0..n).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<_>>());
        assert!(kl_loss(&p, &q).unwrap() >= -1e-15);
        assert!(kl_loss(&p, &p).unwrap().abs() < 1e-15);
    }
}

#[test]
fn high_temperature_flattens_distributions() {
    let t = 1e6;
    let p = soften(&[5.0, -3.0, 1.0], t);
    let q = soften(&[-2.0, 4.0, 0.0], t);
    assert!(kl_loss(&p, &q).unwrap() < 1e-6);
}

fn merged(tasks: &[ModelCheckpoint], lambdas: &[f64], layer: usize) -> ModelCheckpoint {
    // Fixed layers use equal weights; only `layer` follows `lambdas`.
    let k = tasks.len() as f64;
    let tensors: Vec<Matrix> = (0..tasks[0].params().len())
        .map(|p| {
            let l = ModelCheckpoint::layer_of(p);
            let mut acc = Matrix::zeros(tasks[0].params()[p].tensor.rows(), tasks[0].params()[p].tensor.cols());
            for (i, t) in tasks.iter().enumerate() {
                let w = if l == layer { lambdas[i] } else { 1.0 / k };
                acc.add_scaled(&t.params()[p].tensor, w).unwrap();
            }
            acc
        })
        .collect();
    let meta = Meta {
        role: Role::Merged,
        ..tasks[0].meta.clone()
    };
    tasks[0].with_tensors(tensors, meta).unwrap()
}

#[test]
fn coefficient_gradient_matches_finite_differences() {
    let arch = ArchSpec::mlp(&[4, 6, 3]).unwrap();
    let tasks: Vec<ModelCheckpoint> = (0..3)
        .map(|s| ModelCheckpoint::init(arch.clone(), 40 + s).with_role(Role::Task))
        .collect();
    let mut rng = seeded(5);
    let x = Matrix::random_uniform(8, 4, 1.5, &mut rng);
    let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let loss = |m: &ModelCheckpoint| softmax_ce(&m.logits(&x).unwrap(), &y).0;
    for layer in 0..2 {
        let lambdas = [0.2, 0.5, 0.3];
        let m = merged(&tasks, &lambdas, layer);
        let (_, dlogits) = softmax_ce(&m.logits(&x).unwrap(), &y);
        let grads = m.backward(&x, &dlogits).unwrap();
        let analytic = coefficient_gradient(&tasks, &grads, layer).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut up = lambdas;
            up[k] += h;
            let mut down = lambdas;
            down[k] -= h;
            let fd = (loss(&merged(&tasks, &up, layer)) - loss(&merged(&tasks, &down, layer))) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-9, max_relative = 1e-5);
        }
    }
}
