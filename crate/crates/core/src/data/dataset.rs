use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::norm::{NormStats, DEFAULT_TARGET_STD};
use super::run::{read_run, write_run, Checkpoint, Run, RunHeader};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::seed::derive_seed;
use crate::tasks::{ArchSpec, CheckpointSink, ParamVector, Task, TaskSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Sorted checkpoint steps: `0`, `total`, and `count − 2` distinct steps
/// drawn uniformly from the open interval.
pub fn select_checkpoints(total: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count < 2 || total == 0 {
        return Err(invalid("need ≥ 2 checkpoints and ≥ 1 iteration"));
    }
    if count > total + 1 {
        return Err(invalid(format!("{count} checkpoints requested from {} steps", total + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps: Vec<usize> = index::sample(&mut rng, total - 1, count - 2)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    steps.push(0);
    steps.push(total);
    steps.sort_unstable();
    Ok(steps)
}

/// Disjoint train/test run-id lists, shuffled deterministically by `seed`.
pub fn split_runs(run_ids: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid("test_fraction must lie strictly between 0 and 1"));
    }
    let n_test = (run_ids.len() as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= run_ids.len() {
        return Err(invalid(format!(
            "test fraction {test_fraction} of {} runs leaves a side empty",
            run_ids.len()
        )));
    }
    let mut ids = run_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = ids.split_off(ids.len() - n_test);
    ids.sort_unstable();
    test.sort_unstable();
    Ok((ids, test))
}

/// Indices `(t1, t2)` of two distinct checkpoints with `t1 < t2`, uniform
/// over all such pairs.
pub fn sample_pair(num_checkpoints: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if num_checkpoints < 2 {
        return Err(invalid("run needs ≥ 2 checkpoints to form a tuple"));
    }
    let a = rng.random_range(0..num_checkpoints);
    let mut b = rng.random_range(0..num_checkpoints - 1);
    if b >= a {
        b += 1;
    }
    Ok((a.min(b), a.max(b)))
}

/// Training tuple from one run: the earlier and later checkpoint.
pub fn sample_tuple<'r>(run: &'r Run, rng: &mut impl Rng) -> Result<(&'r Checkpoint, &'r Checkpoint)> {
    let (i, j) = sample_pair(run.checkpoints.len(), rng)?;
    Ok((&run.checkpoints[i], &run.checkpoints[j]))
}

/// Persisted description of a generated checkpoint dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskSpec,
    pub arch: ArchSpec,
    pub metric_names: Vec<String>,
    pub seed: u64,
    pub runs_requested: usize,
    pub checkpoints_per_run: usize,
    /// Run files relative to the manifest, indexed by run id.
    pub run_files: Vec<(usize, String)>,
    pub failed_runs: Vec<usize>,
    pub train_runs: Vec<usize>,
    pub test_runs: Vec<usize>,
    pub norm: NormStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub runs: usize,
    pub checkpoints_per_run: usize,
    pub test_fraction: f64,
    pub target_std: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            runs: 500,
            checkpoints_per_run: 20,
            test_fraction: 0.1,
            target_std: DEFAULT_TARGET_STD,
            seed: 0,
        }
    }
}

struct Recorder {
    wanted: Vec<usize>,
    saved: Vec<Checkpoint>,
}

impl CheckpointSink for Recorder {
    fn wants(&self, step: usize) -> bool {
        self.wanted.binary_search(&step).is_ok()
    }

    fn save(&mut self, step: usize, params: &ParamVector, metrics: &[f64]) -> Result<()> {
        self.saved.push(Checkpoint {
            step: step as u64,
            // stored precision, so in-memory and on-disk runs agree exactly
            metrics: metrics.iter().map(|&m| m as f32 as f64).collect(),
            theta: params.values().to_vec(),
        });
        Ok(())
    }
}

/// Trains run `run_id` under the seed derived from `(seed, run_id)`.
pub fn generate_run(task: &Task, run_id: usize, checkpoints: usize, seed: u64) -> Result<Run> {
    let run_seed = derive_seed(seed, &[run_id as u64]);
    let total = task.total_iterations();
    let wanted = select_checkpoints(total, checkpoints, derive_seed(run_seed, &[3]))?;
    let mut rec = Recorder {
        wanted,
        saved: Vec::with_capacity(checkpoints),
    };
    let summary = task.train(run_seed, &mut rec)?;
    let run = Run {
        header: RunHeader {
            run_id,
            seed: run_seed,
            arch: task.arch.clone(),
            metric_names: task.metric_names(),
            num_checkpoints: rec.saved.len(),
            num_params: task.arch.param_count(),
            total_iterations: summary.iterations,
            eval_seed: summary.eval_seed,
        },
        checkpoints: rec.saved,
    };
    run.validate()?;
    Ok(run)
}

/// Trains `cfg.runs` runs in parallel. Diverged runs are dropped and their
/// ids returned separately; any other error aborts.
pub fn generate_runs(task: &Task, cfg: &DataConfig) -> Result<(Vec<Run>, Vec<usize>)> {
    if cfg.runs < 2 || cfg.checkpoints_per_run < 2 {
        return Err(invalid("need ≥ 2 runs and ≥ 2 checkpoints per run"));
    }
    let results = par::map(cfg.runs, |id| generate_run(task, id, cfg.checkpoints_per_run, cfg.seed));
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => runs.push(run),
            Err(Error::Diverged(_)) => failed.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok((runs, failed))
}

/// Runs split by run, with normalization fitted on the training side.
#[derive(Clone, Debug)]
pub struct CheckpointDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Run>,
    pub test: Vec<Run>,
}

impl CheckpointDataset {
    /// Splits `runs` and fits normalization on the training runs only.
    pub fn assemble(task: &Task, cfg: &DataConfig, runs: Vec<Run>, failed: Vec<usize>) -> Result<Self> {
        let ids: Vec<usize> = runs.iter().map(|r| r.header.run_id).collect();
        let (train_ids, test_ids) = split_runs(&ids, cfg.test_fraction, derive_seed(cfg.seed, &[u64::MAX]))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for run in runs {
            if train_ids.binary_search(&run.header.run_id).is_ok() {
                train.push(run);
            } else {
                test.push(run);
            }
        }
        let norm = NormStats::compute(
            train.iter().flat_map(|r| r.checkpoints.iter().map(|c| c.theta.as_slice())),
            cfg.target_std,
        )?;
        let manifest = DatasetManifest {
            task: task.spec.clone(),
            arch: task.arch.clone(),
            metric_names: task.metric_names(),
            seed: cfg.seed,
            runs_requested: cfg.runs,
            checkpoints_per_run: cfg.checkpoints_per_run,
            run_files: ids.iter().map(|&id| (id, run_file_name(id))).collect(),
            failed_runs: failed,
            train_runs: train_ids,
            test_runs: test_ids,
            norm,
        };
        Ok(Self { manifest, train, test })
    }

    /// Generates in memory without touching disk.
    pub fn generate(task: &Task, cfg: &DataConfig) -> Result<Self> {
        let (runs, failed) = generate_runs(task, cfg)?;
        Self::assemble(task, cfg, runs, failed)
    }

    pub fn norm(&self) -> NormStats {
        self.manifest.norm
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.manifest.arch
    }

    /// Writes run files, then the manifest last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for run in self.train.iter().chain(&self.test) {
            write_run(&dir.join(run_file_name(run.header.run_id)), run)?;
        }
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        std::fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (id, file) in &manifest.run_files {
            let run = read_run(&dir.join(file))?;
            if run.header.run_id != *id || run.header.arch != manifest.arch {
                return Err(Error::Format(format!("{file} does not belong to this dataset")));
            }
            if manifest.train_runs.contains(id) {
                train.push(run);
            } else if manifest.test_runs.contains(id) {
                test.push(run);
            } else {
                return Err(Error::Format(format!("run {id} is in neither split")));
            }
        }
        if train.len() != manifest.train_runs.len() || test.len() != manifest.test_runs.len() {
            return Err(Error::Format("manifest counts do not match run files".into()));
        }
        Ok(Self { manifest, train, test })
    }

    /// Observed (min, max) of metric `index` over the training split.
    pub fn metric_range(&self, index: usize) -> Result<(f64, f64)> {
        range_over(self.train.iter().flat_map(|r| &r.checkpoints), index)
    }

    /// Observed (min, max) of metric `index` over training-split checkpoints
    /// that can be the later member of a tuple, i.e. all but each run's first.
    pub fn prompt_range(&self, index: usize) -> Result<(f64, f64)> {
        range_over(self.train.iter().flat_map(|r| r.checkpoints.iter().skip(1)), index)
    }
}

fn range_over<'a>(checkpoints: impl Iterator<Item = &'a Checkpoint>, index: usize) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in checkpoints {
        let m = *c.metrics.get(index).ok_or_else(|| invalid("metric index out of range"))?;
        lo = lo.min(m);
        hi = hi.max(m);
    }
    if lo > hi {
        return Err(invalid("empty training split"));
    }
    Ok((lo, hi))
}

pub fn run_file_name(id: usize) -> String {
    format!("run_{id:05}.bin")
}

/// Writes a full dataset to `dir` and returns its manifest.
pub fn generate_dataset(spec: &TaskSpec, cfg: &DataConfig, dir: &Path) -> Result<DatasetManifest> {
    let task = spec.load()?;
    let ds = CheckpointDataset::generate(&task, cfg)?;
    ds.save(dir)?;
    Ok(ds.manifest)
}
