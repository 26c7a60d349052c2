//! Command-line front end. Each subcommand loads its inputs, calls the
//! matching library operation and writes its outputs under `--workdir`.
//! Relative input and output paths resolve against the working directory;
//! `--config` resolves against the current directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::format::{checkpoint_to_container, dataset_to_container, Container};
use crate::checkpoint::{load, load_dataset, Dataset, ModelCheckpoint};
use crate::distill::{generate_pseudo_labels, hetero_distill, PseudoLabeledSet};
use crate::error::{Error, Result};
use crate::harness::{
    corrupt_gaussian, evaluate, export_heatmap, gen_tasks, ground_truth_subset, run_experiment, run_hetero,
    scaling_grid, select_scaling, task_id, train_task_models, ExperimentConfig, ExperimentReport, HeteroConfig,
    HeteroExperimentConfig, MethodTemplate, TaskData, TaskSuite, TaskSuiteConfig,
};
use crate::learner::{
    merge_features, predict_coefficients, train_sml, CoefficientTable, LabelMode, SmlParams, SmlTrainConfig,
    SupervisionSet,
};
use crate::merge::{MergeMethod, MergeRequest};
use crate::numerics::derive_seed;
use crate::stats::{layer_stats_all, task_stats, MergeMode, StatsConfig, WeightStats};

/// Output locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Used when `--workdir` is not given.
    pub workdir: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("."),
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

/// The one JSON config file. Every section is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub suite: TaskSuiteConfig,
    pub stats: StatsConfig,
    pub sml: SmlTrainConfig,
    pub distill: HeteroConfig,
    pub methods: Vec<MethodTemplate>,
    pub robustness_sigmas: Vec<f64>,
    pub paths: PathsConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            suite: e.suite,
            stats: e.stats,
            sml: e.sml,
            distill: HeteroConfig::default(),
            methods: e.methods,
            robustness_sigmas: e.robustness_sigmas,
            paths: PathsConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.suite.seed = seed;
        self.sml.seed = seed;
        self.distill.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.suite.seed
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            suite: self.suite.clone(),
            stats: self.stats,
            sml: self.sml,
            methods: self.methods.clone(),
            robustness_sigmas: self.robustness_sigmas.clone(),
        }
    }

    pub fn hetero(&self) -> HeteroExperimentConfig {
        HeteroExperimentConfig {
            suite: self.suite.clone(),
            stats: self.stats,
            sml: self.sml,
            distill: self.distill.clone(),
            ..HeteroExperimentConfig::default()
        }
    }
}

fn defaults_help() -> String {
    format!(
        "Exit status: 0 on success, 1 on a domain error (its category is printed to stderr), 2 on a usage error.\n\n\
         Default config (any subset may be given with --config):\n{}",
        serde_json::to_string_pretty(&CliConfig::default()).expect("config serializes")
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "statsmerge",
    version,
    about = "Statistics-guided model merging on a synthetic multi-task suite"
)]
#[command(after_help = defaults_help())]
pub struct Cli {
    /// Directory that relative paths resolve against [default: paths.workdir].
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task suite into the data directory.
    GenData,
    /// Pretrain the shared base and fine-tune one model per task.
    Finetune,
    /// Write weight statistics of checkpoints as CSV.
    Stats(StatsArgs),
    /// Pseudo-label each task's validation inputs with its own model.
    Pseudo(PseudoArgs),
    /// Train the coefficient learner on frozen task models.
    TrainSml(TrainSmlArgs),
    /// Merge compatible checkpoints.
    Merge(MergeArgs),
    /// Distill a teacher into a student of another architecture.
    Distill(DistillArgs),
    /// Accuracy of a checkpoint on datasets.
    Eval(EvalArgs),
    /// Run the full comparison and write the report.
    Experiment(ExperimentArgs),
    /// Export a coefficient table as task,layer,lambda CSV.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Checkpoints to describe [default: every task checkpoint].
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    /// Leading singular values kept [default: stats.rank].
    #[arg(long)]
    pub rank: Option<usize>,
    /// layer_wise (one row per weight tensor) or task_wise (one averaged row).
    #[arg(long, default_value = "layer_wise")]
    pub mode: MergeMode,
    #[arg(long, default_value = "stats.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PseudoArgs {
    /// Share of each validation set labeled [default: suite.pseudo_fraction].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, default_value = "pseudo.smrg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSmlArgs {
    #[arg(long, default_value = "layer_wise")]
    pub mode: MergeMode,
    /// kd_hard, kd_soft or ground_truth [default: sml.label_mode].
    #[arg(long)]
    pub label_mode: Option<LabelMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pseudo-labeled set for the kd modes.
    #[arg(long, default_value = "pseudo.smrg")]
    pub pseudo: PathBuf,
    #[arg(long, default_value = "sml.smrg")]
    pub out: PathBuf,
    /// Learned coefficients.
    #[arg(long, default_value = "coefficients.csv")]
    pub coeffs_out: PathBuf,
    /// Per-epoch learning rate and loss.
    #[arg(long, default_value = "sml_log.csv")]
    pub log: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// stats, weight_avg, task_arithmetic or ties.
    #[arg(long)]
    pub method: MergeMethod,
    /// Task checkpoints [default: every task checkpoint].
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    /// Pretrained base for task arithmetic, ties and delta mode [default: checkpoints/base.smrg].
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Coefficient CSV for stats merging.
    #[arg(long, conflicts_with = "sml")]
    pub coeffs: Option<PathBuf>,
    /// Trained learner for stats merging [default: sml.smrg].
    #[arg(long)]
    pub sml: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<MergeMode>,
    /// Task vector scaling; searched on the pseudo set when absent.
    #[arg(long)]
    pub scaling: Option<f64>,
    #[arg(long, default_value = "pseudo.smrg")]
    pub pseudo: PathBuf,
    /// Ties trim fraction.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Stats merging over task vectors instead of raw weights.
    #[arg(long)]
    pub delta: bool,
    #[arg(long, default_value = "merged.smrg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Pretrained checkpoint of the target architecture.
    #[arg(long)]
    pub student_init: PathBuf,
    /// Labeled training set.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "distilled.smrg")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Datasets [default: every task test set].
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    /// Gaussian input noise added before evaluation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Run the heterogeneous-architecture pipeline instead.
    #[arg(long)]
    pub hetero: bool,
    /// Include wall-clock seconds per stage (makes reports differ run to run).
    #[arg(long)]
    pub timings: bool,
    /// Report base name; writes <name>.json and <name>.txt.
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["report", "sml"])))]
pub struct HeatmapArgs {
    /// Experiment report holding learned tables.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Row label inside the report.
    #[arg(long, default_value = "StatsMerging (LW)")]
    pub method: String,
    /// Trained learner, applied to the task checkpoints.
    #[arg(long)]
    pub sml: Option<PathBuf>,
    #[arg(long = "ckpt")]
    pub ckpts: Vec<PathBuf>,
    #[arg(long, default_value = "heatmap.csv")]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            1
        }
    }
}

/// Resolved invocation context shared by every subcommand.
pub struct Context {
    pub config: CliConfig,
    pub workdir: PathBuf,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config = config.with_seed(seed);
        }
        let workdir = cli.workdir.clone().unwrap_or_else(|| config.paths.workdir.clone());
        Ok(Self { config, workdir })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed()
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.path(&self.config.paths.data_dir.join(format!("{name}.smrg")))
    }

    fn ckpt_path(&self, name: &str) -> PathBuf {
        self.path(&self.config.paths.checkpoint_dir.join(format!("{name}.smrg")))
    }

    fn task_ckpt_paths(&self) -> Vec<PathBuf> {
        (0..self.config.suite.num_tasks)
            .map(|k| self.ckpt_path(&task_id(k)))
            .collect()
    }

    fn resolve_all(&self, given: &[PathBuf]) -> Vec<PathBuf> {
        if given.is_empty() {
            self.task_ckpt_paths()
        } else {
            given.iter().map(|p| self.path(p)).collect()
        }
    }

    fn write_container(&self, c: Container, path: &Path) -> Result<()> {
        c.with_field("seed", self.seed()).write(path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// CSV outputs carry their seed in a `<file>.json` sidecar.
    fn write_csv_sidecar(&self, csv: &Path, command: &str) -> Result<()> {
        let mut name = csv.as_os_str().to_owned();
        name.push(".json");
        let meta = json!({ "command": command, "seed": self.seed() });
        self.write_text(Path::new(&name), &pretty(&meta))
    }

    pub fn load_suite(&self) -> Result<TaskSuite> {
        let tasks = (0..self.config.suite.num_tasks)
            .map(|k| {
                let id = task_id(k);
                Ok(TaskData {
                    train: load_dataset(self.data_path(&format!("{id}_train")))?,
                    val: load_dataset(self.data_path(&format!("{id}_val")))?,
                    test: load_dataset(self.data_path(&format!("{id}_test")))?,
                    task_id: id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSuite {
            tasks,
            pretrain: load_dataset(self.data_path("pretrain"))?,
        })
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ModelCheckpoint>> {
    paths.iter().map(load).collect()
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::Finetune => finetune(&ctx),
        Command::Stats(a) => stats(&ctx, a),
        Command::Pseudo(a) => pseudo(&ctx, a),
        Command::TrainSml(a) => train(&ctx, a),
        Command::Merge(a) => merge(&ctx, a),
        Command::Distill(a) => distill(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Experiment(a) => experiment(&ctx, a),
        Command::Heatmap(a) => heatmap(&ctx, a),
    }
}

fn gen_data(ctx: &Context) -> Result<()> {
    let suite = gen_tasks(&ctx.config.suite)?;
    for t in &suite.tasks {
        for (split, ds) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
            ctx.write_container(
                dataset_to_container(ds),
                &ctx.data_path(&format!("{}_{split}", t.task_id)),
            )?;
        }
    }
    ctx.write_container(dataset_to_container(&suite.pretrain), &ctx.data_path("pretrain"))
}

fn finetune(ctx: &Context) -> Result<()> {
    let suite = ctx.load_suite()?;
    let (base, tasks) = train_task_models(&suite, &ctx.config.suite)?;
    ctx.write_container(checkpoint_to_container(&base), &ctx.ckpt_path("base"))?;
    for (t, data) in tasks.iter().zip(&suite.tasks) {
        println!("{}: test accuracy {:.4}", data.task_id, evaluate(t, &data.test)?);
        ctx.write_container(checkpoint_to_container(t), &ctx.ckpt_path(&data.task_id))?;
    }
    Ok(())
}

/// `task_id,layer_name,mu,var,norm,sv1..svr` rows.
pub fn stats_rows(ckpt: &ModelCheckpoint, name: &str, cfg: &StatsConfig, mode: MergeMode) -> Result<Vec<Vec<String>>> {
    let entries: Vec<(String, WeightStats)> = match mode {
        MergeMode::LayerWise => layer_stats_all(ckpt, cfg)?
            .into_iter()
            .enumerate()
            .map(|(l, s)| (format!("layer{l}.weight"), s))
            .collect(),
        MergeMode::TaskWise => vec![("all".to_string(), task_stats(ckpt, cfg)?)],
    };
    Ok(entries
        .into_iter()
        .map(|(layer, s)| {
            let mut row = vec![name.to_string(), layer];
            row.extend(s.flatten().iter().map(|v| format!("{v:?}")));
            row
        })
        .collect())
}

fn stats(ctx: &Context, a: &StatsArgs) -> Result<()> {
    let cfg = StatsConfig {
        rank: a.rank.unwrap_or(ctx.config.stats.rank),
        ..ctx.config.stats
    };
    cfg.validate()?;
    let out = ctx.path(&a.out);
    let mut header = vec![
        "task_id".to_string(),
        "layer_name".into(),
        "mu".into(),
        "var".into(),
        "norm".into(),
    ];
    header.extend((1..=cfg.rank).map(|i| format!("sv{i}")));
    let mut text = header.join(",") + "\n";
    for p in ctx.resolve_all(&a.ckpts) {
        let ckpt = load(&p)?;
        let fallback = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let name = ckpt.task_id().map(str::to_string).unwrap_or(fallback);
        for row in stats_rows(&ckpt, &name, &cfg, a.mode)? {
            text.push_str(&row.join(","));
            text.push('\n');
        }
    }
    print!("{text}");
    ctx.write_text(&out, &text)?;
    ctx.write_csv_sidecar(&out, "stats")
}

fn pseudo(ctx: &Context, a: &PseudoArgs) -> Result<()> {
    let suite = ctx.load_suite()?;
    let tasks = load_all(&ctx.task_ckpt_paths())?;
    let fraction = a.fraction.unwrap_or(ctx.config.suite.pseudo_fraction);
    let set = generate_pseudo_labels(&tasks, &suite.val_inputs(), fraction, pseudo_seed(ctx))?;
    println!("{} pseudo-labeled rows", set.len());
    ctx.write_container(set.to_container(), &ctx.path(&a.out))
}

fn pseudo_seed(ctx: &Context) -> u64 {
    derive_seed(ctx.seed(), "pseudo", 0)
}

fn train(ctx: &Context, a: &TrainSmlArgs) -> Result<()> {
    let tasks = load_all(&ctx.task_ckpt_paths())?;
    let cfg = SmlTrainConfig {
        label_mode: a.label_mode.unwrap_or(ctx.config.sml.label_mode),
        epochs: a.epochs.unwrap_or(ctx.config.sml.epochs),
        ..ctx.config.sml
    };
    let pseudo_set;
    let truth;
    let set = match cfg.label_mode {
        LabelMode::GroundTruth => {
            truth = ground_truth_subset(&ctx.load_suite()?, ctx.config.suite.pseudo_fraction, pseudo_seed(ctx))?;
            SupervisionSet::GroundTruth(&truth)
        }
        LabelMode::KdHard | LabelMode::KdSoft => {
            pseudo_set = PseudoLabeledSet::load(ctx.path(&a.pseudo))?;
            SupervisionSet::Pseudo(&pseudo_set)
        }
    };
    let outcome = train_sml(&tasks, set, &cfg, &ctx.config.stats, a.mode)?;
    println!("initial loss {:.6}", outcome.initial_loss);
    let mut log = String::from("epoch,lr,loss\n");
    for r in &outcome.history {
        if r.epoch % 50 == 0 || r.epoch + 1 == outcome.history.len() {
            println!("epoch {:>4}  lr {:.0e}  loss {:.6}", r.epoch, r.lr, r.loss);
        }
        log.push_str(&format!("{},{:?},{:?}\n", r.epoch, r.lr, r.loss));
    }
    ctx.write_container(
        outcome.params.to_container(a.mode, &ctx.config.stats),
        &ctx.path(&a.out),
    )?;
    let coeffs = ctx.path(&a.coeffs_out);
    outcome.coefficients.write_csv(&coeffs)?;
    println!("wrote {}", coeffs.display());
    ctx.write_csv_sidecar(&coeffs, "train-sml")?;
    let log_path = ctx.path(&a.log);
    ctx.write_text(&log_path, &log)?;
    ctx.write_csv_sidecar(&log_path, "train-sml")
}

/// Coefficients a trained learner assigns to `tasks`.
pub fn sml_coefficients(sml_path: &Path, tasks: &[ModelCheckpoint]) -> Result<CoefficientTable> {
    let (params, mode, stats_cfg) = SmlParams::load(sml_path)?;
    predict_coefficients(&params, &merge_features(tasks, &stats_cfg, mode)?, mode)
}

fn merge(ctx: &Context, a: &MergeArgs) -> Result<()> {
    let paths = ctx.resolve_all(&a.ckpts);
    let tasks = load_all(&paths)?;
    let mut req = MergeRequest::new(a.method);
    req.mode = a.mode;
    req.keep_fraction = a.keep;
    req.delta = a.delta;
    let needs_base = matches!(a.method, MergeMethod::TaskArithmetic | MergeMethod::Ties) || a.delta;
    if needs_base {
        let p = a
            .base
            .as_ref()
            .map(|p| ctx.path(p))
            .unwrap_or_else(|| ctx.ckpt_path("base"));
        req.base = Some(load(p)?);
    }
    if a.method == MergeMethod::Stats {
        req.coefficients = Some(match (&a.coeffs, &a.sml) {
            (Some(c), _) => CoefficientTable::read_csv(&ctx.path(c), a.mode)?,
            (None, sml) => {
                let p = ctx.path(sml.as_deref().unwrap_or(Path::new("sml.smrg")));
                sml_coefficients(&p, &tasks)?
            }
        });
    }
    let merged = match (a.method, a.scaling) {
        (MergeMethod::TaskArithmetic | MergeMethod::Ties, None) => {
            let pseudo_set = PseudoLabeledSet::load(ctx.path(&a.pseudo))?;
            let (s, m) = select_scaling(&scaling_grid(), &pseudo_set, |s| {
                MergeRequest {
                    scaling: Some(s),
                    ..req.clone()
                }
                .run(&tasks)
            })?;
            println!("selected scaling {s}");
            req.scaling = Some(s);
            m
        }
        (_, s) => {
            req.scaling = s;
            req.run(&tasks)?
        }
    };
    let out = ctx.path(&a.out);
    ctx.write_container(checkpoint_to_container(&merged), &out)?;
    let inputs: Vec<_> = paths
        .iter()
        .zip(&tasks)
        .map(|(p, t)| {
            json!({
                "path": p,
                "task_id": t.task_id(),
                "fingerprint": format!("{:016x}", t.meta.base_fingerprint),
            })
        })
        .collect();
    let sidecar = json!({
        "method": a.method,
        "mode": req.coefficients.as_ref().map(|c| c.mode()).or(a.mode),
        "coefficients": req.coefficients.as_ref().map(|c| c.values()),
        "scaling": req.scaling,
        "keep_fraction": req.keep_fraction,
        "delta": a.delta,
        "inputs": inputs,
        "output_fingerprint": format!("{:016x}", merged.meta.base_fingerprint),
        "seed": ctx.seed(),
    });
    let mut name = out.into_os_string();
    name.push(".json");
    ctx.write_text(Path::new(&name), &pretty(&sidecar))
}

fn distill(ctx: &Context, a: &DistillArgs) -> Result<()> {
    let teacher = load(ctx.path(&a.teacher))?;
    let student = load(ctx.path(&a.student_init))?;
    let data = load_dataset(ctx.path(&a.data))?;
    let out = hetero_distill(&teacher, &student, &data, &ctx.config.distill.distill())?;
    println!(
        "teacher accuracy {:.4}, student accuracy {:.4} on the training set",
        evaluate(&teacher, &data)?,
        evaluate(&out, &data)?
    );
    ctx.write_container(checkpoint_to_container(&out), &ctx.path(&a.out))
}

fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let ckpt = load(ctx.path(&a.ckpt))?;
    let paths: Vec<PathBuf> = if a.data.is_empty() {
        (0..ctx.config.suite.num_tasks)
            .map(|k| ctx.data_path(&format!("{}_test", task_id(k))))
            .collect()
    } else {
        a.data.iter().map(|p| ctx.path(p)).collect()
    };
    let mut rows = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let ds: Dataset = load_dataset(p)?;
        let ds = corrupt_gaussian(&ds, a.noise, derive_seed(ctx.seed(), "eval-noise", i as u64))?;
        let acc = evaluate(&ckpt, &ds)?;
        println!("{}: {acc:.4}", p.display());
        rows.push(json!({ "data": p, "accuracy": acc }));
    }
    let avg = rows.iter().map(|r| r["accuracy"].as_f64().unwrap_or(0.0)).sum::<f64>() / rows.len().max(1) as f64;
    println!("average: {avg:.4}");
    let report =
        json!({ "ckpt": ctx.path(&a.ckpt), "noise": a.noise, "rows": rows, "avg_acc": avg, "seed": ctx.seed() });
    ctx.write_text(&ctx.path(&a.out), &pretty(&report))
}

/// File-name form of a report row label, e.g. `statsmerging_lw`.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

fn experiment(ctx: &Context, a: &ExperimentArgs) -> Result<()> {
    let base = ctx.path(&a.out);
    if a.hetero {
        let report = run_hetero(&ctx.config.hetero(), a.timings)?;
        print!("{}", report.to_text());
        ctx.write_text(&with_ext(&base, "json"), &(report.to_json() + "\n"))?;
        return ctx.write_text(&with_ext(&base, "txt"), &report.to_text());
    }
    let outcome = run_experiment(&ctx.config.experiment(), a.timings)?;
    let report = &outcome.report;
    print!("{}", report.to_text());
    ctx.write_text(&with_ext(&base, "json"), &(report.to_json() + "\n"))?;
    ctx.write_text(&with_ext(&base, "txt"), &report.to_text())?;
    for (label, table) in &report.coefficients {
        let p = ctx.path(Path::new(&format!("heatmap_{}.csv", slug(label))));
        export_heatmap(table, &p)?;
        println!("wrote {}", p.display());
        ctx.write_csv_sidecar(&p, "experiment")?;
    }
    Ok(())
}

fn heatmap(ctx: &Context, a: &HeatmapArgs) -> Result<()> {
    let table = match (&a.report, &a.sml) {
        (Some(r), _) => {
            let p = ctx.path(r);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| Error::format(0, e.to_string()))?;
            report
                .coefficients
                .get(&a.method)
                .cloned()
                .ok_or_else(|| Error::param(format!("report has no coefficients for `{}`", a.method)))?
        }
        (None, Some(s)) => sml_coefficients(&ctx.path(s), &load_all(&ctx.resolve_all(&a.ckpts))?)?,
        (None, None) => return Err(Error::param("heatmap needs --report or --sml")),
    };
    let out = ctx.path(&a.out);
    export_heatmap(&table, &out)?;
    println!("wrote {}", out.display());
    ctx.write_csv_sidecar(&out, "heatmap")
}
