//! The experiment configuration file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use paramdiff::data::DataConfig;
use paramdiff::diffusion::ScheduleConfig;
use paramdiff::eval::OneStepConfig;
use paramdiff::gpt::GptConfig;
use paramdiff::pretrain::TrainConfig;
use paramdiff::seed::derive_seed;
use paramdiff::tasks::{ArchSpec, InitScheme, Task, TaskSpec};
use serde::{Deserialize, Serialize};

pub const STREAM_DATA: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Prompt for one-step, OOD, variance and surface; defaults to the best
    /// training-split value.
    pub prompt: Option<f64>,
    pub num_prompts: usize,
    pub alignment_nets: usize,
    pub onestep: OneStepConfig,
    pub sweep_inits: usize,
    pub ood_schemes: Vec<InitScheme>,
    pub ood_inits: usize,
    pub ood_steps: usize,
    pub nn_prompts: usize,
    pub variance_outer: usize,
    pub variance_inner: usize,
    pub variance_top_k: usize,
    pub surface_samples: usize,
    pub surface_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt: None,
            num_prompts: 20,
            alignment_nets: 128,
            onestep: OneStepConfig::default(),
            sweep_inits: 8,
            ood_schemes: vec![InitScheme::KaimingNormal, InitScheme::Orthogonal],
            ood_inits: 5,
            ood_steps: 10,
            nn_prompts: 5,
            variance_outer: 64,
            variance_inner: 64,
            variance_top_k: 10,
            surface_samples: 32,
            surface_grid: 15,
        }
    }
}

/// Grid for the `sweep` command: every hidden size crossed with every
/// training-run count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub hidden: Vec<usize>,
    /// Number of training-split runs kept; empty keeps them all.
    pub runs: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 64, 128],
            runs: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; the data, train and eval seeds derive from it.
    pub seed: u64,
    pub task: TaskSpec,
    pub data: DataConfig,
    pub diffusion: ScheduleConfig,
    pub model: GptConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::blobs(),
            data: DataConfig::default(),
            diffusion: ScheduleConfig::default(),
            model: GptConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Fills derived fields: section seeds from the master seed and the
    /// model schedule from the diffusion section.
    pub fn resolve(mut self) -> Self {
        self.data.seed = derive_seed(self.seed, &[STREAM_DATA]);
        self.train.seed = derive_seed(self.seed, &[STREAM_TRAIN]);
        self.model.schedule = self.diffusion;
        self
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, &[STREAM_EVAL])
    }

    /// The model section against an architecture.
    pub fn check_model(&self, arch: &ArchSpec) -> Result<()> {
        self.model.layout_for(arch).context("model section")?;
        Ok(())
    }

    /// Cross-section checks run before any work starts.
    pub fn validate(&self) -> Result<Task> {
        let task = self.task.load().context("task section")?;
        if self.data.runs < 2 || self.data.checkpoints_per_run < 2 {
            bail!("data section: need ≥ 2 runs and ≥ 2 checkpoints per run");
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            bail!("data section: test_fraction must lie in (0, 1)");
        }
        self.diffusion.build().context("diffusion section")?;
        self.check_model(&task.arch)?;
        if self.model.metric_index >= task.metric_names().len() {
            bail!("model section: metric_index {} but the task has {} metrics", self.model.metric_index, task.metric_names().len());
        }
        self.train.validate().context("train section")?;
        let e = &self.eval;
        if e.num_prompts < 2 || e.nn_prompts < 2 {
            bail!("eval section: prompt grids need ≥ 2 points");
        }
        if e.alignment_nets == 0 || e.sweep_inits == 0 || e.ood_inits == 0 || e.ood_steps == 0 {
            bail!("eval section: network counts and ood_steps must be ≥ 1");
        }
        if e.variance_outer < 2 || e.variance_inner < 2 || e.surface_samples < 3 || e.surface_grid < 2 {
            bail!("eval section: variance needs ≥ 2 × 2 samples, surface ≥ 3 samples and grid ≥ 2");
        }
        if self.sweep.hidden.is_empty() {
            bail!("sweep section: hidden must list at least one size");
        }
        Ok(task)
    }
}
