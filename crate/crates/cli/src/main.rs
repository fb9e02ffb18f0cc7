//! `mtadapt`: data generation, training stages, full runs, sweeps and reports.
//!
//! Exit codes: 0 success, 1 I/O or model error, 2 invalid configuration or
//! arguments, 3 invariant violation, 4 training aborted, 5 corrupt checkpoint.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use mtadapt::checkpoint::{write_atomic, Checkpoint};
use mtadapt::data::save_dataset;
use mtadapt::eval::evaluate;
use mtadapt::experiment::pipeline::{self, load_split, run_dir, TRAIN_SPLIT};
use mtadapt::experiment::{build_report, render_table, ExperimentConfig};
use mtadapt::train::{run_stage, EpochBudget, Paradigm, StageConfig, StageKind};
use mtadapt::{Error, Result, Task};

const OUT_ENV: &str = "MTADAPT_OUT";
const PSEUDO_SPLIT: &str = "train_pseudo";

#[derive(Parser)]
#[command(name = "mtadapt", version, about = "Pretrain-adapt-finetune multi-task experiments")]
struct Cli {
    /// Output root; defaults to $MTADAPT_OUT, then ./mtadapt-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; defaults to <out>/data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic training and test splits.
    GenData(Common),
    /// Pretrain a backbone with the configured toy objective.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; defaults to <out>/pretrain/seed-<seed>.ckpt.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train single-task teachers and write a pseudo-labeled training split.
    Teach {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Backbone checkpoint; pretrains on the fly when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Run one adapt stage (adapter only) starting from a checkpoint.
    Adapt(StageArgs),
    /// Run one finetune stage (all parameters) starting from a checkpoint.
    Finetune(StageArgs),
    /// Full pipeline: pretrain, optional pseudo labels, paradigm, evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paradigm: Option<Paradigm>,
        /// Epoch split `adapt,finetune`, e.g. `1,35`.
        #[arg(long)]
        budget: Option<EpochBudget>,
        /// Seeds to run; defaults to the config's seed list.
        #[arg(long, num_args = 1..)]
        seed: Vec<u64>,
        /// Method label; defaults to the config's name.
        #[arg(long)]
        name: Option<String>,
        /// Where run directories go; defaults to <out>/runs.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Evaluate a model checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss-weight sweep, one weight at a time, as parallel processes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `lo:hi:step`, inclusive.
        #[arg(long, default_value = "0.1:1.0:0.1")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Only list the grid points.
        #[arg(long)]
        dry_run: bool,
    },
    /// Comparison table over finished runs.
    Report {
        /// Directory searched for metrics files; defaults to <out>/runs.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Starting checkpoint (backbone-only or full model).
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the epoch count from the config budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset split to train on.
    #[arg(long, default_value = TRAIN_SPLIT)]
    split: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Prompt(_) => 2,
        Error::Invariant(_) => 3,
        Error::TrainingAbort(_) => 4,
        Error::CorruptCheckpoint(_) => 5,
        Error::Model(_) | Error::Io { .. } | Error::Format { .. } => 1,
    }
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Prompt(_) => "config",
        Error::Invariant(_) => "invariant",
        Error::TrainingAbort(_) => "training",
        Error::CorruptCheckpoint(_) => "checkpoint",
        Error::Model(_) => "model",
        Error::Io { .. } | Error::Format { .. } => "io",
    }
}

struct Ctx {
    out: PathBuf,
}

impl Ctx {
    fn config(&self, c: &Common) -> Result<ExperimentConfig> {
        match &c.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }

    fn data_dir(&self, c: &Common) -> PathBuf {
        c.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| "mtadapt-out".into());
    match dispatch(&Ctx { out }, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(ctx: &Ctx, cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(c) => gen_data(ctx, &c),
        Cmd::Pretrain { common, seed, output } => {
            let cfg = ctx.config(&common)?;
            let path = output.unwrap_or_else(|| ctx.out.join("pretrain").join(format!("seed-{seed}.ckpt")));
            let outcome = pipeline::pretrain(&cfg, seed)?;
            outcome.checkpoint.save(&path)?;
            if let (Some(a), Some(b)) = (outcome.eval_before, outcome.eval_after) {
                println!("{} pretraining: eval loss {a:.4} -> {b:.4}", cfg.training.pretrain.kind);
            }
            println!("wrote {} ({})", path.display(), outcome.checkpoint.digest());
            Ok(())
        }
        Cmd::Teach { common, seed, init } => teach(ctx, &common, seed, init.as_deref()),
        Cmd::Adapt(a) => stage(ctx, StageKind::Adapt, a),
        Cmd::Finetune(a) => stage(ctx, StageKind::Finetune, a),
        Cmd::Run { common, paradigm, budget, seed, name, runs } => {
            let mut cfg = ctx.config(&common)?;
            if let Some(p) = paradigm {
                cfg.training.paradigm = p;
            }
            if let Some(b) = budget {
                cfg.training.budget = b;
            }
            if let Some(n) = name {
                cfg.name = n;
            }
            cfg.validate()?;
            let seeds = if seed.is_empty() { cfg.seeds.clone() } else { seed };
            let (train, test) = pipeline::load_data(&cfg, &ctx.data_dir(&common))?;
            let root = runs.unwrap_or_else(|| ctx.out.join("runs"));
            for s in seeds {
                let art = pipeline::run_experiment(&cfg, &train, &test, s)?;
                let dir = run_dir(&root, &cfg.name, s);
                pipeline::write_run(&dir, &art)?;
                println!("{} seed {s}: {} optimizer steps, metrics in {}", cfg.name, art.metrics.optimizer_steps, dir.display());
            }
            Ok(())
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = ctx.config(&common)?;
            let test = load_split(&cfg, &ctx.data_dir(&common), pipeline::TEST_SPLIT)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (model, report) = pipeline::init_model(&cfg, &ckpt, 0)?;
            if !report.initialized_fresh.is_empty() {
                eprintln!("warning: {} tensors were not in the checkpoint", report.initialized_fresh.len());
            }
            let m = evaluate(&model, &test)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            Ok(())
        }
        Cmd::Sweep { common, grid, jobs, dry_run } => sweep(ctx, &common, &grid, jobs, dry_run),
        Cmd::Report { runs, json } => {
            let root = runs.unwrap_or_else(|| ctx.out.join("runs"));
            if !root.is_dir() {
                return Err(Error::Config(format!("no runs directory at {}", root.display())));
            }
            let report = build_report(&pipeline::collect_metrics(&root)?)?;
            print!("{}", render_table(&report));
            if let Some(p) = json {
                write_atomic(&p, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
            }
            Ok(())
        }
    }
}

fn gen_data(ctx: &Ctx, c: &Common) -> Result<()> {
    let cfg = ctx.config(c)?;
    let dir = ctx.data_dir(c);
    let (train, test) = pipeline::generate_data(&cfg, &dir)?;
    let counts = train.labeled_counts();
    println!(
        "wrote {} training images (det {}, sem {}, driv {}) and {} test images to {}",
        train.len(),
        counts.det,
        counts.sem,
        counts.driv,
        test.len(),
        dir.display()
    );
    Ok(())
}

fn teach(ctx: &Ctx, c: &Common, seed: u64, init: Option<&Path>) -> Result<()> {
    let cfg = ctx.config(c)?;
    let dir = ctx.data_dir(c);
    let train = load_split(&cfg, &dir, TRAIN_SPLIT)?;
    let pretrained = match init {
        Some(p) => Checkpoint::load(p)?,
        None => pipeline::pretrain(&cfg, seed)?.checkpoint,
    };
    let (teachers, merged) = pipeline::teach(&cfg, &train, &pretrained, seed)?;
    let tdir = ctx.out.join("teachers").join(format!("seed-{seed}"));
    for task in Task::ALL {
        if let Some(t) = teachers.get(task) {
            let path = tdir.join(format!("{task}.ckpt"));
            t.checkpoint().save(&path)?;
            println!("{task} teacher: {}", path.display());
        }
    }
    save_dataset(&dir, PSEUDO_SPLIT, &cfg.dataset.scene, Some(&cfg.dataset.setting), &merged)?;
    println!("{} pseudo annotations written to the `{PSEUDO_SPLIT}` split in {}", merged.pseudo_count(), dir.display());
    Ok(())
}

fn stage(ctx: &Ctx, kind: StageKind, a: StageArgs) -> Result<()> {
    let cfg = ctx.config(&a.common)?;
    let data = load_split(&cfg, &ctx.data_dir(&a.common), &a.split)?;
    let init = Checkpoint::load(&a.init)?;
    let (mut model, report) = pipeline::init_model(&cfg, &init, a.seed)?;
    println!("loaded {} tensors, {} initialized fresh", report.loaded.len(), report.initialized_fresh.len());
    let (template, budget_epochs) = match kind {
        StageKind::Adapt => (&cfg.training.adapt, cfg.training.budget.adapt_epochs),
        StageKind::Finetune => (&cfg.training.finetune, cfg.training.budget.finetune_epochs),
    };
    let scfg = StageConfig { stage: kind, epochs: a.epochs.unwrap_or(budget_epochs), ..template.clone() };
    let run = run_stage(&mut model, &data, &scfg, cfg.training.schedule, &cfg.training.weights, a.seed)?;
    let mut ckpt = model.to_checkpoint(kind.name());
    ckpt.config_digest = Some(cfg.digest());
    ckpt.frozen_digest = Some(run.freeze.digest_after.clone());
    ckpt.save(&a.output)?;
    let last = run.log.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!("{} stage: {} steps, final batch loss {last:.4}, wrote {}", kind.name(), run.steps, a.output.display());
    Ok(())
}

fn sweep(ctx: &Ctx, c: &Common, grid: &str, jobs: usize, dry_run: bool) -> Result<()> {
    let cfg = ctx.config(c)?;
    let points = mtadapt::experiment::sweep_configs(&cfg, &mtadapt::experiment::parse_grid(grid)?);
    if dry_run {
        for (task, v, p) in &points {
            println!("{task}\t{v}\t{}", p.name);
        }
        return Ok(());
    }
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let data = ctx.data_dir(c);
    pipeline::load_data(&cfg, &data)?;
    let root = ctx.out.join("sweep");
    let runs = root.join("runs");
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let mut pending: Vec<Command> = Vec::new();
    for (_, _, p) in &points {
        let path = root.join("configs").join(format!("{}.toml", p.name));
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&root, e))?;
        write_atomic(&path, p.to_toml().as_bytes())?;
        let mut cmd = Command::new(&exe);
        cmd.arg("--out").arg(&ctx.out).arg("run").arg("--config").arg(&path).arg("--data").arg(&data).arg("--runs").arg(&runs);
        pending.push(cmd);
    }
    pending.reverse();
    let mut running: Vec<Child> = Vec::new();
    let mut failed = 0;
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(mut cmd) = pending.pop() else { break };
            running.push(cmd.spawn().map_err(|e| Error::io(&exe, e))?);
        }
        let child = running.remove(0);
        let status = child.wait_with_output().map_err(|e| Error::io(&exe, e))?.status;
        if !status.success() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Config(format!("{failed} of {} sweep runs failed", points.len())));
    }
    print!("{}", render_table(&build_report(&pipeline::collect_metrics(&runs)?)?));
    Ok(())
}
