mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use commands::{OptimizeArgs, Start, Suite};
use config::Config;
use paramdiff::tasks::{InitScheme, TaskKind};

/// Generative pre-training over neural network checkpoints.
#[derive(Parser)]
#[command(name = "paramdiff", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; flags given here take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train task networks and save their checkpoints.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// blobs | image-grid | cartpole
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        ckpts: Option<usize>,
    },
    /// Pre-train a model on a checkpoint dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        eval_interval: Option<usize>,
        /// Disable permutation augmentation.
        #[arg(long)]
        no_augment: bool,
        /// Train on (first, last) checkpoint pairs only.
        #[arg(long)]
        final_only: bool,
        /// Save an EMA snapshot at every report record.
        #[arg(long)]
        snapshots: bool,
    },
    /// Prompt a model to update a parameter vector.
    Optimize {
        #[arg(long)]
        model: PathBuf,
        /// Dataset supplying the task and the default prompt.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initialization scheme for the starting vector.
        #[arg(long, conflicts_with = "init_file")]
        init: Option<InitArg>,
        /// Run file whose last checkpoint is the starting vector.
        #[arg(long)]
        init_file: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<f64>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Output run file holding the whole trajectory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run evaluations and write JSON and CSV results.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per grid cell and tabulate the best prompt alignment.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum InitArg {
    Uniform,
    Xavier,
    Kaiming,
    Orthogonal,
}

impl From<InitArg> for InitScheme {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Uniform => InitScheme::UniformFanIn,
            InitArg::Xavier => InitScheme::XavierUniform,
            InitArg::Kaiming => InitScheme::KaimingNormal,
            InitArg::Orthogonal => InitScheme::Orthogonal,
        }
    }
}

fn configure(common: &Common, command: &Command) -> anyhow::Result<Config> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    match command {
        Command::GenData { task, runs, ckpts, .. } => {
            if let Some(t) = task {
                let kind: TaskKind = t.parse()?;
                if kind != cfg.task.kind {
                    let base = match kind {
                        TaskKind::Cartpole => paramdiff::tasks::TaskSpec::cartpole(),
                        _ => paramdiff::tasks::TaskSpec::blobs(),
                    };
                    cfg.task = paramdiff::tasks::TaskSpec { kind, ..base };
                }
            }
            cfg.data.runs = runs.unwrap_or(cfg.data.runs);
            cfg.data.checkpoints_per_run = ckpts.unwrap_or(cfg.data.checkpoints_per_run);
        }
        Command::Train {
            iters,
            eval_interval,
            no_augment,
            final_only,
            ..
        } => {
            cfg.train.iterations = iters.unwrap_or(cfg.train.iterations);
            cfg.train.eval_interval = eval_interval.unwrap_or(cfg.train.eval_interval);
            cfg.train.augment &= !no_augment;
            cfg.train.final_only |= final_only;
        }
        Command::Sweep { iters, .. } => {
            cfg.train.iterations = iters.unwrap_or(cfg.train.iterations);
        }
        _ => {}
    }
    Ok(cfg.resolve())
}

fn dispatch(cfg: &Config, command: Command) -> commands::Outcome {
    match command {
        Command::GenData { out, .. } => commands::gen_data(cfg, &out),
        Command::Train { data, out, snapshots, .. } => commands::train(cfg, &data, &out, snapshots),
        Command::Optimize {
            model,
            data,
            init,
            init_file,
            prompt,
            steps,
            out,
        } => {
            let start = match (init, init_file) {
                (_, Some(f)) => Some(Start::File(f)),
                (Some(i), None) => Some(Start::Scheme(i.into())),
                (None, None) => None,
            };
            commands::optimize(
                cfg,
                OptimizeArgs {
                    model: &model,
                    data: data.as_deref(),
                    start,
                    prompt,
                    steps,
                    out: &out,
                },
            )
        }
        Command::Eval { model, data, suite, out } => commands::evaluate(cfg, &model, &data, suite, &out),
        Command::Sweep { data, out, .. } => commands::sweep(cfg, &data, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match configure(&cli.common, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let jobs = cli.common.jobs;
    match paramdiff::par::with_jobs(jobs, move || dispatch(&cfg, cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
