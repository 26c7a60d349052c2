use std::collections::BTreeMap;

use approx::assert_relative_eq;
use statsmerge::checkpoint::{fine_tune, softmax_ce, ArchSpec, ModelCheckpoint, Role};
use statsmerge::distill::{distillation_loss, generate_pseudo_labels, DistillConfig};
use statsmerge::harness::{
    corrupt_gaussian, evaluate, export_heatmap, gen_tasks, run_experiment, train_task_models, ExperimentConfig,
    MethodTemplate, TaskSuiteConfig,
};
use statsmerge::learner::{train_sml, CoefficientTable, SmlTrainConfig, SupervisionSet};
use statsmerge::merge::{stats_merge, weight_average};
use statsmerge::numerics::{seeded, Matrix};
use statsmerge::stats::{layer_stats, task_stats, MergeMode, StatsConfig};

fn small_suite() -> TaskSuiteConfig {
    TaskSuiteConfig {
        num_tasks: 2,
        classes_per_task: 2,
        input_dim: 6,
        train_sizes: vec![120, 120],
        val_samples: 60,
        test_samples: 80,
        hidden: vec![16],
        finetune_epochs: 5,
        ..Default::default()
    }
}

#[test]
fn well_separated_tasks_are_learned() {
    let cfg = TaskSuiteConfig {
        cluster_separation: 10.0,
        hidden: vec![64],
        train_sizes: vec![800; 4],
        ..Default::default()
    };
    let suite = gen_tasks(&cfg).unwrap();
    let (_, tasks) = train_task_models(&suite, &cfg).unwrap();
    for (m, t) in tasks.iter().zip(&suite.tasks) {
        let acc = evaluate(m, &t.test).unwrap();
        assert!(acc >= 0.99, "{}: {acc}", t.task_id);
    }
}

#[test]
fn averaging_untouched_copies_matches_base() {
    let suite_cfg = TaskSuiteConfig {
        finetune_epochs: 0,
        ..small_suite()
    };
    let cfg = ExperimentConfig {
        suite: suite_cfg,
        methods: vec![MethodTemplate::WeightAvg],
        robustness_sigmas: vec![],
        ..Default::default()
    };
    let out = run_experiment(&cfg, false).unwrap();
    let pre = &out.report.row("Pre-Trained").unwrap().per_task;
    let wa = &out.report.row("Weight Averaging").unwrap().per_task;
    assert_eq!(pre, wa);
}

#[test]
fn single_task_learner_gets_all_the_weight() {
    let cfg = small_suite();
    let suite = gen_tasks(&cfg).unwrap();
    let (_, tasks) = train_task_models(&suite, &cfg).unwrap();
    let one = &tasks[..1];
    let pseudo = generate_pseudo_labels(one, &suite.val_inputs()[..1], 1.0, 3).unwrap();
    let sml = SmlTrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let out = train_sml(
        one,
        SupervisionSet::Pseudo(&pseudo),
        &sml,
        &StatsConfig::default(),
        MergeMode::LayerWise,
    )
    .unwrap();
    assert!(out.coefficients.values().iter().flatten().all(|&v| v == 1.0));
    assert_eq!(
        stats_merge(one, &out.coefficients).unwrap().flat_params(),
        tasks[0].flat_params()
    );
}

#[test]
fn learner_loss_decreases_early() {
    let cfg = small_suite();
    let suite = gen_tasks(&cfg).unwrap();
    let (_, tasks) = train_task_models(&suite, &cfg).unwrap();
    let pseudo = generate_pseudo_labels(&tasks, &suite.val_inputs(), 1.0, 3).unwrap();
    // Full-batch steps so each epoch is one deterministic descent step.
    let sml = SmlTrainConfig {
        epochs: 10,
        batch_size: pseudo.len(),
        ..Default::default()
    };
    let out = train_sml(
        &tasks,
        SupervisionSet::Pseudo(&pseudo),
        &sml,
        &StatsConfig::default(),
        MergeMode::LayerWise,
    )
    .unwrap();
    let mut prev = out.initial_loss;
    for rec in &out.history {
        assert!(
            rec.loss <= prev + 1e-12,
            "epoch {}: {} after {prev}",
            rec.epoch,
            rec.loss
        );
        prev = rec.loss;
    }
}

#[test]
fn identical_tasks_merge_to_themselves() {
    let cfg = small_suite();
    let suite = gen_tasks(&cfg).unwrap();
    let (_, tasks) = train_task_models(&suite, &cfg).unwrap();
    let twins = vec![tasks[0].clone(), tasks[0].clone()];
    let pseudo = generate_pseudo_labels(&twins, &suite.val_inputs(), 0.5, 1).unwrap();
    let sml = SmlTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let out = train_sml(
        &twins,
        SupervisionSet::Pseudo(&pseudo),
        &sml,
        &StatsConfig::default(),
        MergeMode::TaskWise,
    )
    .unwrap();
    assert_relative_eq!(out.coefficients.lambda(0, 0), 0.5, epsilon = 1e-15);
    let merged = stats_merge(&twins, &out.coefficients).unwrap();
    for (a, b) in merged.flat_params().iter().zip(tasks[0].flat_params()) {
        assert_relative_eq!(*a, b, epsilon = 1e-15);
    }
}

#[test]
fn report_average_is_mean_of_tasks() {
    let cfg = ExperimentConfig {
        suite: small_suite(),
        methods: vec![
            MethodTemplate::WeightAvg,
            MethodTemplate::TaskArithmetic { scaling: Some(0.3) },
        ],
        robustness_sigmas: vec![0.1],
        ..Default::default()
    };
    let out = run_experiment(&cfg, true).unwrap();
    for row in out
        .report
        .rows
        .iter()
        .chain(out.report.robustness.iter().flat_map(|b| &b.rows))
    {
        let mean = row.per_task.values().sum::<f64>() / row.per_task.len() as f64;
        assert!((row.avg_acc - mean).abs() <= 1e-12);
    }
    assert_eq!(out.report.selected_scaling.get("Task Arithmetic"), Some(&0.3));
    assert!(out.report.timings.as_ref().is_some_and(|t| t.contains_key("fine_tune")));
}

#[test]
fn heatmap_two_tasks_one_layer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.csv");
    let t = CoefficientTable::task_wise(vec![0.25, 0.75]).unwrap();
    export_heatmap(&t, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "task,layer,lambda\n0,0,0.25\n1,0,0.75\n");
}

#[test]
fn corruption_is_seeded() {
    let suite = gen_tasks(&small_suite()).unwrap();
    let test = &suite.tasks[0].test;
    let a = corrupt_gaussian(test, 0.2, 9).unwrap();
    assert_eq!(a, corrupt_gaussian(test, 0.2, 9).unwrap());
    assert_ne!(a, corrupt_gaussian(test, 0.2, 10).unwrap());
    assert_eq!(a.labels(), test.labels());
}

#[test]
fn pseudo_full_fraction_keeps_every_row() {
    let suite = gen_tasks(&small_suite()).unwrap();
    let arch = small_suite().arch().unwrap();
    let teacher = ModelCheckpoint::init(arch, 0);
    let p = generate_pseudo_labels(&[teacher], &suite.val_inputs()[..1], 1.0, 0).unwrap();
    assert_eq!(p.len(), suite.tasks[0].val.len());
}

#[test]
fn alpha_one_is_plain_cross_entropy() {
    let mut rng = seeded(2);
    let z = Matrix::random_uniform(5, 3, 2.0, &mut rng);
    let zt = Matrix::random_uniform(5, 3, 2.0, &mut rng);
    let y = [0, 2, 1, 1, 0];
    let cfg = DistillConfig {
        alpha: 1.0,
        ..Default::default()
    };
    let (l, g) = distillation_loss(&z, &zt, &y, &cfg).unwrap();
    let (l_ce, g_ce) = softmax_ce(&z, &y);
    assert_eq!(l, l_ce);
    assert_eq!(g, g_ce);
}

#[test]
fn task_stats_average_layer_records() {
    let arch = ArchSpec::mlp(&[5, 8, 6, 3]).unwrap();
    let m = ModelCheckpoint::init(arch, 21);
    let cfg = StatsConfig::default();
    let layers: Vec<_> = (0..3).map(|l| layer_stats(m.weight(l), &cfg).unwrap()).collect();
    let t = task_stats(&m, &cfg).unwrap();
    assert_relative_eq!(t.mu, layers.iter().map(|s| s.mu).sum::<f64>() / 3.0, epsilon = 1e-15);
    assert_relative_eq!(t.var, layers.iter().map(|s| s.var).sum::<f64>() / 3.0, epsilon = 1e-15);
    assert_relative_eq!(
        t.norm,
        layers.iter().map(|s| s.norm).sum::<f64>() / 3.0,
        epsilon = 1e-15
    );
    for i in 0..3 {
        let want = layers.iter().map(|s| s.singular[i]).sum::<f64>() / 3.0;
        assert_relative_eq!(t.singular[i], want, epsilon = 1e-12);
    }
}

#[test]
fn stats_scale_with_the_matrix() {
    let mut rng = seeded(4);
    let w = Matrix::random_uniform(7, 5, 1.0, &mut rng);
    let cfg = StatsConfig::default();
    let c = 2.5;
    let a = layer_stats(&w, &cfg).unwrap();
    let b = layer_stats(&w.scale(c), &cfg).unwrap();
    assert_relative_eq!(b.mu, c * a.mu, max_relative = 1e-12);
    assert_relative_eq!(b.var, c * c * a.var, max_relative = 1e-12);
    assert_relative_eq!(b.norm, c * a.norm, max_relative = 1e-12);
    for (x, y) in a.singular.iter().zip(&b.singular) {
        assert_relative_eq!(*y, c * x, max_relative = 1e-10);
    }
}

#[test]
fn merged_outputs_stay_compatible() {
    let cfg = small_suite();
    let suite = gen_tasks(&cfg).unwrap();
    let (base, tasks) = train_task_models(&suite, &cfg).unwrap();
    let wa = weight_average(&tasks).unwrap();
    assert_eq!(wa.role(), Role::Merged);
    assert!(wa.is_merge_compatible(&base));
    let again = fine_tune(&base, &suite.tasks[1].train, 5, 1e-3, 0).unwrap();
    assert!(again.is_merge_compatible(&tasks[0]));
    let ids: BTreeMap<_, _> = tasks.iter().map(|t| (t.task_id().unwrap().to_string(), ())).collect();
    assert_eq!(ids.len(), 2);
}
