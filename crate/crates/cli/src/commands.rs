use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use paramdiff::data::{read_run, write_run, Checkpoint, CheckpointDataset, Run, RunHeader};
use paramdiff::eval;
use paramdiff::gpt::GptModel;
use paramdiff::pretrain::{pretrain, PretrainIo, Split, TrainReport};
use paramdiff::seed::derive_seed;
use paramdiff::tasks::{init_params, InitScheme, ParamVector, Task};
use serde::Serialize;

use crate::config::Config;

/// Failures split by exit code: bad input before any work, or a failure
/// while working.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

pub fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

pub fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

pub const RAW_MODEL: &str = "model_raw.bin";
pub const EMA_MODEL: &str = "model_ema.bin";
pub const REPORT: &str = "report.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";

fn load_dataset(dir: &Path) -> Result<CheckpointDataset> {
    CheckpointDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_model(path: &Path) -> Result<GptModel> {
    GptModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_config(cfg: &Config, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(())
}

pub fn gen_data(cfg: &Config, out: &Path) -> Outcome {
    let task = usage(cfg.validate())?;
    let ds = runtime(CheckpointDataset::generate(&task, &cfg.data).map_err(Into::into))?;
    runtime(ds.save(out).with_context(|| format!("writing {}", out.display())))?;
    runtime(write_config(cfg, out))?;
    let m = &ds.manifest;
    println!(
        "wrote {} runs ({} train, {} test, {} failed) × {} checkpoints to {}",
        m.run_files.len(),
        ds.train.len(),
        ds.test.len(),
        m.failed_runs.len(),
        m.checkpoints_per_run,
        out.display()
    );
    for (i, name) in m.metric_names.iter().enumerate() {
        if let Ok((lo, hi)) = ds.metric_range(i) {
            println!("  {name}: [{lo:.4}, {hi:.4}]");
        }
    }
    Ok(())
}

pub fn train(cfg: &Config, data: &Path, out: &Path, snapshots: bool) -> Outcome {
    let task = usage(cfg.validate())?;
    let ds = usage(load_dataset(data))?;
    if ds.manifest.arch != task.arch {
        return Err(Failure::Usage(anyhow::anyhow!("task section architecture differs from the dataset's")));
    }
    usage(cfg.check_model(ds.arch()))?;
    runtime(std::fs::create_dir_all(out).map_err(Into::into))?;
    let snap_dir = out.join("snapshots");
    if snapshots {
        runtime(std::fs::create_dir_all(&snap_dir).map_err(Into::into))?;
    }
    let io = PretrainIo {
        task: Some(&task),
        snapshot_dir: snapshots.then_some(snap_dir.as_path()),
    };
    let trained = runtime(pretrain(&ds, &cfg.model, &cfg.train, io).context("training"))?;
    runtime((|| {
        trained.raw.save(&out.join(RAW_MODEL))?;
        trained.ema.save(&out.join(EMA_MODEL))?;
        trained.report.write_jsonl(&out.join(REPORT))?;
        write_config(cfg, out)
    })())?;
    for r in &trained.report.records {
        let align = r.prompt_alignment.map_or(String::new(), |a| format!(" alignment {a:.3}"));
        let tl = r.train_loss.map_or(String::from("-"), |l| format!("{l:.5}"));
        println!("iter {:>7} train {tl} test {:.5}{align}", r.iteration, r.test_loss);
    }
    println!("wrote {} and {} to {}", RAW_MODEL, EMA_MODEL, out.display());
    Ok(())
}

/// Where the starting parameters of `optimize` come from.
pub enum Start {
    Scheme(InitScheme),
    /// Last checkpoint of a run file.
    File(PathBuf),
}

pub struct OptimizeArgs<'a> {
    pub model: &'a Path,
    pub data: Option<&'a Path>,
    pub start: Option<Start>,
    pub prompt: Option<f64>,
    pub steps: usize,
    pub out: &'a Path,
}

pub fn optimize(cfg: &Config, args: OptimizeArgs<'_>) -> Outcome {
    if args.steps == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--steps must be ≥ 1")));
    }
    let model = usage(load_model(args.model))?;
    let ds = match args.data {
        Some(d) => Some(usage(load_dataset(d))?),
        None => None,
    };
    let task = usage(match &ds {
        Some(ds) => ds.manifest.task.load().map_err(Into::into),
        None => cfg.task.load().context("task section"),
    })?;
    if task.arch != model.arch {
        return Err(Failure::Usage(anyhow::anyhow!("model architecture differs from the task's")));
    }
    let idx = model.config().metric_index;
    let seed = cfg.eval_seed();
    let prompt = match (args.prompt, &ds) {
        (Some(p), _) => p,
        (None, Some(ds)) => usage(eval::best_observed(ds, &task, idx).map_err(Into::into))?,
        (None, None) => return Err(Failure::Usage(anyhow::anyhow!("--prompt is required without --data"))),
    };
    if let Some(ds) = &ds {
        if let Ok((lo, hi)) = ds.prompt_range(idx) {
            if prompt < lo || prompt > hi {
                eprintln!("warning: prompt {prompt} lies outside the observed range [{lo}, {hi}]; results extrapolate");
            }
        }
    }
    let theta0 = usage(match args.start.unwrap_or(Start::Scheme(task.init_scheme())) {
        Start::Scheme(s) => init_params(&task.arch, s, derive_seed(seed, &[0])).map(ParamVector::into_values).map_err(Into::into),
        Start::File(p) => read_run(&p)
            .with_context(|| format!("reading {}", p.display()))
            .and_then(|r| r.checkpoints.last().map(|c| c.theta.clone()).context("run file has no checkpoints")),
    })?;
    if theta0.len() != task.arch.param_count() {
        return Err(Failure::Usage(anyhow::anyhow!("starting vector has the wrong length")));
    }
    let tr = runtime(eval::recursive_prompt(&model, &task, &theta0, prompt, args.steps, derive_seed(seed, &[1])).map_err(Into::into))?;
    let run = runtime(trajectory_run(&task, &tr.thetas, seed))?;
    runtime(write_run(args.out, &run).with_context(|| format!("writing {}", args.out.display())))?;
    let names = task.metric_names();
    for (k, c) in run.checkpoints.iter().enumerate() {
        let vals: Vec<String> = names.iter().zip(&c.metrics).map(|(n, v)| format!("{n} {v:.5}")).collect();
        println!("step {k:>3}: {}", vals.join(", "));
    }
    println!("prompt {prompt}; wrote {}", args.out.display());
    Ok(())
}

fn trajectory_run(task: &Task, thetas: &[Vec<f32>], seed: u64) -> Result<Run> {
    let checkpoints = thetas
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let metrics = task.metrics(&ParamVector::new(task.arch.clone(), t.clone())?)?;
            Ok(Checkpoint {
                step: k as u64,
                metrics,
                theta: t.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Run {
        header: RunHeader {
            run_id: 0,
            seed,
            arch: task.arch.clone(),
            metric_names: task.metric_names(),
            num_checkpoints: checkpoints.len(),
            num_params: task.arch.param_count(),
            total_iterations: checkpoints.len() - 1,
            eval_seed: task.spec.eval_seed,
        },
        checkpoints,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Alignment,
    Onestep,
    Sweep,
    Ood,
    Nnscore,
    Variance,
    Surface,
    All,
}

impl Suite {
    const EACH: [Suite; 7] = [
        Suite::Alignment,
        Suite::Onestep,
        Suite::Sweep,
        Suite::Ood,
        Suite::Nnscore,
        Suite::Variance,
        Suite::Surface,
    ];

    fn name(self) -> &'static str {
        match self {
            Suite::Alignment => "alignment",
            Suite::Onestep => "onestep",
            Suite::Sweep => "sweep",
            Suite::Ood => "ood",
            Suite::Nnscore => "nnscore",
            Suite::Variance => "variance",
            Suite::Surface => "surface",
            Suite::All => "all",
        }
    }
}

fn save<R: Serialize, C: Serialize>(out: &Path, suite: Suite, result: &R, rows: &[C]) -> Result<()> {
    eval::write_outputs(out, suite.name(), result, rows)?;
    Ok(())
}

fn run_suite(cfg: &Config, model: &GptModel, task: &Task, ds: &CheckpointDataset, suite: Suite, out: &Path) -> Result<String> {
    let e = &cfg.eval;
    let idx = model.config().metric_index;
    let seed = derive_seed(cfg.eval_seed(), &[suite as u64]);
    let prompt = match e.prompt {
        Some(p) => p,
        None => eval::best_observed(ds, task, idx)?,
    };
    let summary = match suite {
        Suite::Alignment => {
            let nets = eval::random_inits(task, e.alignment_nets, derive_seed(seed, &[0]))?;
            let grid = eval::prompt_grid(ds, idx, e.num_prompts)?;
            let r = eval::prompt_alignment(model, task, &nets, &grid, seed)?;
            save(out, suite, &r, &r.csv_rows())?;
            format!("r2 {:.4}", r.r2)
        }
        Suite::Onestep => {
            let best = eval::best_observed(ds, task, idx)?;
            let r = eval::one_step_compare(model, task, best, &e.onestep, seed)?;
            save(out, suite, &r, &r.csv_rows())?;
            format!(
                "initial {:.4}, gpt {:.4}, best baseline {} {:.4}",
                r.initial.mean, r.gpt.mean, r.best_baseline.method, r.best_baseline.mean
            )
        }
        Suite::Sweep => {
            let inits = eval::split_initials(ds, Split::Test, e.sweep_inits);
            let grid = eval::prompt_grid(ds, idx, e.num_prompts)?;
            let r = eval::prompt_sweep(model, task, &inits, &grid, seed)?;
            save(out, suite, &r, &r.rows)?;
            format!("spearman {:.4}", r.spearman)
        }
        Suite::Ood => {
            let r = eval::ood_eval(model, task, &e.ood_schemes, e.ood_inits, prompt, e.ood_steps, seed)?;
            save(out, suite, &r, &r.rows)?;
            r.summaries
                .iter()
                .map(|s| format!("{} {:.4} -> {:.4}", s.scheme.name(), s.median_first, s.median_last))
                .collect::<Vec<_>>()
                .join(", ")
        }
        Suite::Nnscore => {
            let grid = eval::prompt_grid(ds, idx, e.nn_prompts)?;
            let r = eval::nearest_neighbor_score(model, ds, &grid, seed)?;
            save(out, suite, &r, &r.csv_rows())?;
            format!("scores {:?}", r.scores)
        }
        Suite::Variance => {
            let initials = eval::split_initials(ds, Split::Test, usize::MAX);
            let metric = eval::metrics_of(task, idx, &initials)?.iter().sum::<f64>() / initials.len() as f64;
            let r = eval::variance_decomposition(
                model,
                metric,
                prompt,
                task.init_scheme(),
                e.variance_outer,
                e.variance_inner,
                e.variance_top_k,
                seed,
            )?;
            save(out, suite, &r, &r.csv_rows())?;
            format!("init variance {:.3e}, noise variance {:.3e}", r.mean_init_variance, r.mean_noise_variance)
        }
        Suite::Surface => {
            let theta = eval::split_initials(ds, Split::Test, 1).remove(0);
            let r = eval::pca_surface_export(model, task, &theta, prompt, e.surface_samples, e.surface_grid, seed)?;
            save(out, suite, &r, &r.grid)?;
            format!("{} of {} samples on the plane", r.retained.len(), r.num_samples)
        }
        Suite::All => unreachable!("expanded by the caller"),
    };
    Ok(summary)
}

pub fn evaluate(cfg: &Config, model: &Path, data: &Path, suite: Suite, out: &Path) -> Outcome {
    let model = usage(load_model(model))?;
    let ds = usage(load_dataset(data))?;
    let task = usage(ds.manifest.task.load().map_err(Into::into))?;
    if model.arch != task.arch {
        return Err(Failure::Usage(anyhow::anyhow!("model architecture differs from the dataset's")));
    }
    let suites: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut failed = Vec::new();
    for s in suites {
        match run_suite(cfg, &model, &task, &ds, s, out) {
            Ok(summary) => println!("{}: {summary}", s.name()),
            Err(e) => {
                eprintln!("{} failed: {e:#}", s.name());
                failed.push(s.name());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("evaluations failed: {}", failed.join(", "))))
    }
}

#[derive(Debug, Serialize)]
struct SweepCell {
    cell: usize,
    hidden: usize,
    runs: usize,
    best_alignment: Option<f64>,
    best_iteration: Option<usize>,
    error: Option<String>,
}

fn sweep_cell(cfg: &Config, task: &Task, ds: &CheckpointDataset, hidden: usize, runs: usize, dir: &Path) -> Result<(f64, usize)> {
    let mut model = cfg.model.clone();
    model.hidden = hidden;
    model.layout_for(ds.arch())?;
    if runs > ds.train.len() {
        bail!("{runs} runs requested but the training split has {}", ds.train.len());
    }
    let subset = CheckpointDataset {
        manifest: ds.manifest.clone(),
        train: ds.train[..runs].to_vec(),
        test: ds.test.clone(),
    };
    let mut train = cfg.train.clone();
    if train.alignment_nets == 0 {
        train.alignment_nets = cfg.eval.alignment_nets;
        train.alignment_prompts = cfg.eval.num_prompts;
    }
    let io = PretrainIo {
        task: Some(task),
        snapshot_dir: None,
    };
    let trained = pretrain(&subset, &model, &train, io)?;
    std::fs::create_dir_all(dir)?;
    trained.ema.save(&dir.join(EMA_MODEL))?;
    trained.report.write_jsonl(&dir.join(REPORT))?;
    best_alignment(&trained.report).context("no alignment was recorded")
}

/// Highest prompt alignment over the report and the iteration reaching it.
pub fn best_alignment(report: &TrainReport) -> Option<(f64, usize)> {
    report
        .records
        .iter()
        .filter_map(|r| r.prompt_alignment.map(|a| (a, r.iteration)))
        .fold(None, |acc: Option<(f64, usize)>, (a, it)| match acc {
            Some((b, _)) if b >= a => acc,
            _ => Some((a, it)),
        })
}

pub fn sweep(cfg: &Config, data: &Path, out: &Path) -> Outcome {
    let task = usage(cfg.validate())?;
    let ds = usage(load_dataset(data))?;
    if ds.manifest.arch != task.arch {
        return Err(Failure::Usage(anyhow::anyhow!("task section architecture differs from the dataset's")));
    }
    let run_counts = if cfg.sweep.runs.is_empty() { vec![ds.train.len()] } else { cfg.sweep.runs.clone() };
    let mut cells = Vec::new();
    for &hidden in &cfg.sweep.hidden {
        for &runs in &run_counts {
            let k = cells.len();
            let dir = out.join(format!("cell_{k:03}"));
            let cell = match sweep_cell(cfg, &task, &ds, hidden, runs, &dir) {
                Ok((a, it)) => SweepCell {
                    cell: k,
                    hidden,
                    runs,
                    best_alignment: Some(a),
                    best_iteration: Some(it),
                    error: None,
                },
                Err(e) => SweepCell {
                    cell: k,
                    hidden,
                    runs,
                    best_alignment: None,
                    best_iteration: None,
                    error: Some(format!("{e:#}")),
                },
            };
            match (&cell.best_alignment, &cell.error) {
                (Some(a), _) => println!("cell {k}: hidden {hidden}, runs {runs}: best alignment {a:.4}"),
                (_, Some(e)) => eprintln!("cell {k}: hidden {hidden}, runs {runs}: failed: {e}"),
                _ => {}
            }
            cells.push(cell);
        }
    }
    runtime((|| {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
        for c in &cells {
            w.serialize(c)?;
        }
        w.flush()?;
        write_config(cfg, out)
    })())?;
    if cells.iter().all(|c| c.error.is_some()) {
        return Err(Failure::Runtime(anyhow::anyhow!("every sweep cell failed")));
    }
    Ok(())
}
