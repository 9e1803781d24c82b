//! Task networks, their data, metrics and per-run trainers.

mod arch;
mod cartpole;
mod dataset;
mod mlp;
mod task;
mod train;

pub use arch::{init_params, Activation, ArchSpec, InitScheme, LayerOffsets, LayerSpec, ParamVector};
pub use cartpole::{rollout_return, CartpoleConfig, CartpoleEnv, NUM_ACTIONS, OBS_DIM};
pub use dataset::{
    classification_metrics, eval_metrics, make_blobs, read_image_grid, write_image_grid, BlobsConfig,
    DatasetKind, ImageGridHeader, TaskDataset, TaskMetrics,
};
pub use mlp::{forward_task, MlpVars, RowForward};
pub use task::{Task, TaskKind, TaskSpec};
pub use train::{
    policy_gradient, run_policy_training, run_supervised_training, supervised_gradient, CheckpointSink, CollectAll, PolicyHyper, SupervisedHyper,
    TrainSummary, POLICY_METRICS, SUPERVISED_METRICS,
};
