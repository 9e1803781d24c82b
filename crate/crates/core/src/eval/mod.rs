//! Evaluations of a trained model: prompt alignment, one-step comparison
//! with gradient baselines, prompt sweeps, recursive prompting from unseen
//! initializations, nearest-neighbor memorization, variance decomposition
//! and PCA surfaces.
//!
//! Every evaluation is a pure function of its inputs and seed and leaves the
//! model untouched. Results serialize to JSON; each also provides CSV rows.

mod alignment;
mod nnscore;
mod onestep;
mod recursive;
mod stats;
mod surface;
mod variance;

use std::path::Path;

use serde::Serialize;

pub use alignment::{prompt_alignment, prompt_sweep, PromptAlignmentResult, SweepResult, SweepRow};
pub use nnscore::{nearest_neighbor_score, nn_success, NnScoreResult};
pub use onestep::{one_step_compare, OneStepConfig, OneStepResult, OneStepRow};
pub use recursive::{ood_eval, recursive_prompt, recursive_prompt_many, OodResult, OodRow, OodSummary, Trajectory};
pub use stats::{r2_score, spearman};
pub use surface::{pca_surface_export, principal_plane, SurfacePoint, SurfaceResult, SurfaceSample};
pub use variance::{decompose_variance, variance_decomposition, VarianceResult};

use crate::data::CheckpointDataset;
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Proposal, Sampler};
use crate::par;
use crate::pretrain::Split;
use crate::seed::derive_seed;
use crate::tasks::{init_params, ArchSpec, InitScheme, ParamVector, Task};

/// `n` fresh networks from the task's own initialization scheme.
pub fn random_inits(task: &Task, n: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    scheme_inits(&task.arch, task.init_scheme(), n, seed)
}

pub fn scheme_inits(arch: &ArchSpec, scheme: InitScheme, n: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    (0..n)
        .map(|i| init_params(arch, scheme, derive_seed(seed, &[i as u64])).map(ParamVector::into_values))
        .collect()
}

/// Initial checkpoints of the first `n` runs of a split.
pub fn split_initials(ds: &CheckpointDataset, split: Split, n: usize) -> Vec<Vec<f32>> {
    split.runs(ds).iter().take(n).map(|r| r.checkpoints[0].theta.clone()).collect()
}

/// `n` prompts evenly spaced from the worst to the best value observed
/// among training-split tuple targets.
pub fn prompt_grid(ds: &CheckpointDataset, metric_index: usize, n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(invalid("prompt grid needs ≥ 2 points"));
    }
    let (lo, hi) = ds.prompt_range(metric_index)?;
    if hi <= lo {
        return Err(invalid("degenerate metric range"));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

/// Best value of `metric_index` in the training split.
pub fn best_observed(ds: &CheckpointDataset, task: &Task, metric_index: usize) -> Result<f64> {
    let (lo, hi) = ds.metric_range(metric_index)?;
    Ok(if task.higher_is_better(metric_index) { hi } else { lo })
}

/// Metric `index` of every vector, in parallel.
pub fn metrics_of(task: &Task, index: usize, thetas: &[Vec<f32>]) -> Result<Vec<f64>> {
    par::map(thetas.len(), |i| {
        let p = ParamVector::new(task.arch.clone(), thetas[i].clone())?;
        task.metric(&p, index)
    })
    .into_iter()
    .collect()
}

/// `a` is strictly better than `b` under the task's metric direction.
pub fn better(task: &Task, index: usize, a: f64, b: f64) -> bool {
    if task.higher_is_better(index) {
        a > b
    } else {
        a < b
    }
}

/// One batched sampler call over parallel lists of inputs.
fn propose(
    model: &GptModel,
    thetas: &[&[f32]],
    metrics: &[f64],
    prompts: &[f64],
    seeds: &[u64],
    sampler: Sampler,
) -> Result<Vec<Vec<f32>>> {
    let props: Vec<Proposal> = (0..thetas.len())
        .map(|i| Proposal {
            theta: thetas[i],
            metric: metrics[i],
            prompt: prompts[i],
            seed: seeds[i],
        })
        .collect();
    model.sample(&props, sampler)
}

fn check_task(model: &GptModel, task: &Task) -> Result<()> {
    if model.arch != task.arch {
        return Err(invalid("model and task architectures differ"));
    }
    if model.config().metric_index >= task.metric_names().len() {
        return Err(invalid("model conditions on a metric the task does not define"));
    }
    Ok(())
}

/// Writes `<name>.json` and `<name>.csv` into `dir`.
pub fn write_outputs<R: Serialize, C: Serialize>(dir: &Path, name: &str, result: &R, rows: &[C]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.json")), serde_json::to_vec_pretty(result)?)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{name}.csv"))).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("csv: {e}"))
}
