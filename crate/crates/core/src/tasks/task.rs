use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::arch::{Activation, ArchSpec, InitScheme, ParamVector};
use super::cartpole::{rollout_return, NUM_ACTIONS, OBS_DIM};
use super::dataset::{eval_metrics, make_blobs, read_image_grid, BlobsConfig, TaskDataset};
use super::train::{
    policy_gradient, run_policy_training, run_supervised_training, supervised_gradient, CheckpointSink, PolicyHyper, SupervisedHyper, TrainSummary,
    POLICY_METRICS, SUPERVISED_METRICS,
};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Blobs,
    ImageGrid,
    Cartpole,
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "image-grid" | "grid" => Ok(Self::ImageGrid),
            "cartpole" => Ok(Self::Cartpole),
            other => Err(invalid(format!("unknown task '{other}' (blobs | image-grid | cartpole)"))),
        }
    }
}

/// Serializable description of a task and how its networks are trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Hidden layer widths of the task MLP.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub blobs: BlobsConfig,
    /// Image-grid task file, required for `image-grid`.
    pub grid_path: Option<PathBuf>,
    pub supervised: SupervisedHyper,
    pub policy: PolicyHyper,
    /// Rollout seed used when scoring policies outside of data generation.
    pub eval_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::blobs()
    }
}

impl TaskSpec {
    pub fn blobs() -> Self {
        Self {
            kind: TaskKind::Blobs,
            hidden: vec![16],
            activation: Activation::Relu,
            blobs: BlobsConfig::default(),
            grid_path: None,
            supervised: SupervisedHyper::default(),
            policy: PolicyHyper::default(),
            eval_seed: 12_345,
        }
    }

    pub fn cartpole() -> Self {
        Self {
            kind: TaskKind::Cartpole,
            hidden: vec![16, 16],
            activation: Activation::Selu,
            ..Self::blobs()
        }
    }

    /// Loads datasets and fixes the architecture.
    pub fn load(&self) -> Result<Task> {
        let data = match self.kind {
            TaskKind::Blobs => Some(make_blobs(&self.blobs)?),
            TaskKind::ImageGrid => {
                let path = self
                    .grid_path
                    .as_ref()
                    .ok_or_else(|| invalid("image-grid task needs grid_path"))?;
                Some(read_image_grid(path)?)
            }
            TaskKind::Cartpole => None,
        };
        let (din, dout) = match &data {
            Some(d) => (d.input_dim, d.num_classes),
            None => (OBS_DIM, NUM_ACTIONS),
        };
        let mut widths = vec![din];
        widths.extend(&self.hidden);
        widths.push(dout);
        let arch = ArchSpec::mlp(&widths, self.activation)?;
        Ok(Task {
            spec: self.clone(),
            arch,
            data,
        })
    }
}

/// A loaded task: architecture plus whatever is needed to score parameters.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub arch: ArchSpec,
    pub data: Option<TaskDataset>,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    pub fn metric_names(&self) -> Vec<String> {
        let names: &[&str] = match self.kind() {
            TaskKind::Cartpole => &POLICY_METRICS,
            _ => &SUPERVISED_METRICS,
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// Whether larger values of metric `index` are better.
    pub fn higher_is_better(&self, index: usize) -> bool {
        self.kind() == TaskKind::Cartpole && index == 0
    }

    /// All metrics of `params`, in `metric_names` order.
    pub fn metrics(&self, params: &ParamVector) -> Result<Vec<f64>> {
        match &self.data {
            Some(d) => {
                let m = eval_metrics(params, d)?;
                Ok(vec![m.test_loss, m.test_error])
            }
            None => Ok(vec![rollout_return(
                params,
                &self.spec.policy.env,
                self.spec.policy.eval_episodes,
                self.spec.eval_seed,
            )?]),
        }
    }

    pub fn metric(&self, params: &ParamVector, index: usize) -> Result<f64> {
        self.metrics(params)?
            .get(index)
            .copied()
            .ok_or_else(|| invalid(format!("metric index {index} out of range")))
    }

    /// Trains one network from scratch, streaming checkpoints into `sink`.
    pub fn train(&self, seed: u64, sink: &mut dyn CheckpointSink) -> Result<TrainSummary> {
        match &self.data {
            Some(d) => run_supervised_training(&self.arch, d, &self.spec.supervised, seed, sink),
            None => run_policy_training(&self.arch, &self.spec.policy, seed, sink),
        }
    }

    /// Initialization used by the task's own training runs.
    pub fn init_scheme(&self) -> InitScheme {
        match &self.data {
            Some(_) => self.spec.supervised.init,
            None => self.spec.policy.init,
        }
    }

    /// Gradient of the differentiable surrogate the task trains on:
    /// full-batch cross-entropy, or one REINFORCE estimate seeded by `seed`.
    pub fn surrogate_gradient(&self, params: &ParamVector, seed: u64) -> Result<Vec<f32>> {
        match &self.data {
            Some(d) => supervised_gradient(params, d),
            None => policy_gradient(params, &self.spec.policy, seed),
        }
    }

    /// Number of optimizer updates in one training run.
    pub fn total_iterations(&self) -> usize {
        match &self.data {
            Some(d) => self.spec.supervised.iterations(d.train_len()),
            None => self.spec.policy.iterations,
        }
    }
}
