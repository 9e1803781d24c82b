//! Checkpoint datasets: generation, storage, splitting, tuple sampling,
//! permutation augmentation and normalization.

mod dataset;
mod norm;
mod perm;
mod run;

pub use dataset::{
    generate_dataset, generate_run, generate_runs, run_file_name, sample_pair, sample_tuple, select_checkpoints,
    split_runs, CheckpointDataset, DataConfig, DatasetManifest, MANIFEST_FILE,
};
pub use norm::{NormStats, DEFAULT_TARGET_STD};
pub use perm::Permutation;
pub use run::{read_run, write_run, Checkpoint, Run, RunHeader, RUN_MAGIC};
pub(crate) use run::{read_f32s, read_header_json};
