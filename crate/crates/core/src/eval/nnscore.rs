use serde::{Deserialize, Serialize};

use super::propose;
use crate::data::{CheckpointDataset, Run};
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Sampler};
use crate::par;
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnScoreResult {
    pub prompts: Vec<f64>,
    /// Percentage of test runs scored a success, per prompt.
    pub scores: Vec<f64>,
    /// `[prompt][test run]`.
    pub successes: Vec<Vec<bool>>,
}

impl NnScoreResult {
    pub fn csv_rows(&self) -> Vec<(f64, f64)> {
        self.prompts.iter().copied().zip(self.scores.iter().copied()).collect()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

fn min_dist<'a>(sample: &[f32], runs: impl IntoIterator<Item = &'a Run>) -> f64 {
    runs.into_iter()
        .flat_map(|r| &r.checkpoints)
        .map(|c| sq_dist(sample, &c.theta))
        .fold(f64::INFINITY, f64::min)
}

/// Whether `sample` is strictly closer to a checkpoint of `own` than to
/// every checkpoint of `train`.
pub fn nn_success(sample: &[f32], own: &Run, train: &[Run]) -> bool {
    min_dist(sample, [own]) < min_dist(sample, train)
}

/// Samples from each test run's first checkpoint under every prompt and
/// scores exact Euclidean nearest neighbours in raw parameter space.
pub fn nearest_neighbor_score(model: &GptModel, ds: &CheckpointDataset, prompts: &[f64], seed: u64) -> Result<NnScoreResult> {
    if ds.train.is_empty() || ds.test.is_empty() || prompts.is_empty() {
        return Err(invalid("nearest-neighbor score needs both splits and ≥ 1 prompt"));
    }
    if model.arch != ds.manifest.arch {
        return Err(invalid("model and dataset architectures differ"));
    }
    let idx = model.config().metric_index;
    let mut thetas = Vec::new();
    let mut metrics = Vec::new();
    let mut ps = Vec::new();
    let mut seeds = Vec::new();
    for (i, &p) in prompts.iter().enumerate() {
        for (r, run) in ds.test.iter().enumerate() {
            let c = &run.checkpoints[0];
            thetas.push(c.theta.as_slice());
            metrics.push(c.metrics[idx]);
            ps.push(p);
            seeds.push(derive_seed(seed, &[i as u64, r as u64]));
        }
    }
    let samples = propose(model, &thetas, &metrics, &ps, &seeds, Sampler::Ddpm)?;
    let n = ds.test.len();
    let flags = par::map(samples.len(), |k| nn_success(&samples[k], &ds.test[k % n], &ds.train));
    let successes: Vec<Vec<bool>> = flags.chunks(n).map(<[bool]>::to_vec).collect();
    let scores = successes
        .iter()
        .map(|s| 100.0 * s.iter().filter(|&&b| b).count() as f64 / n as f64)
        .collect();
    Ok(NnScoreResult {
        prompts: prompts.to_vec(),
        scores,
        successes,
    })
}
