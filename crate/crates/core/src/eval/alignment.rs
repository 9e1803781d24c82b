use serde::{Deserialize, Serialize};

use super::{check_task, metrics_of, propose, r2_score, spearman};
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Sampler};
use crate::seed::derive_seed;
use crate::tasks::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAlignmentResult {
    pub prompts: Vec<f64>,
    /// Achieved metric per prompt, averaged over input networks.
    pub achieved: Vec<f64>,
    pub r2: f64,
    pub num_nets: usize,
}

impl PromptAlignmentResult {
    pub fn csv_rows(&self) -> Vec<(f64, f64)> {
        self.prompts.iter().copied().zip(self.achieved.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub init: usize,
    pub prompt: f64,
    pub achieved: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Rank correlation of prompt and achieved value over all rows.
    pub spearman: f64,
    pub per_init_spearman: Vec<Option<f64>>,
}

/// Achieved metric of one DDPM sample per (prompt, net), `[prompt][net]`.
fn achieved_grid(model: &GptModel, task: &Task, nets: &[Vec<f32>], prompts: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    check_task(model, task)?;
    let idx = model.config().metric_index;
    let input_metrics = metrics_of(task, idx, nets)?;
    let mut thetas = Vec::new();
    let mut metrics = Vec::new();
    let mut ps = Vec::new();
    let mut seeds = Vec::new();
    for (i, &p) in prompts.iter().enumerate() {
        for (k, net) in nets.iter().enumerate() {
            thetas.push(net.as_slice());
            metrics.push(input_metrics[k]);
            ps.push(p);
            seeds.push(derive_seed(seed, &[i as u64, k as u64]));
        }
    }
    let samples = propose(model, &thetas, &metrics, &ps, &seeds, Sampler::Ddpm)?;
    let achieved = metrics_of(task, idx, &samples)?;
    Ok(achieved.chunks(nets.len()).map(<[f64]>::to_vec).collect())
}

/// Samples every net under every prompt and scores the prompt-averaged
/// achieved metric against the prompts by r².
pub fn prompt_alignment(
    model: &GptModel,
    task: &Task,
    nets: &[Vec<f32>],
    prompts: &[f64],
    seed: u64,
) -> Result<PromptAlignmentResult> {
    if nets.is_empty() {
        return Err(invalid("prompt alignment needs ≥ 1 network"));
    }
    let grid = achieved_grid(model, task, nets, prompts, seed)?;
    let achieved: Vec<f64> = grid.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    let r2 = r2_score(prompts, &achieved)?;
    Ok(PromptAlignmentResult {
        prompts: prompts.to_vec(),
        achieved,
        r2,
        num_nets: nets.len(),
    })
}

/// Achieved-vs-prompt curve for each input network.
pub fn prompt_sweep(model: &GptModel, task: &Task, inits: &[Vec<f32>], grid: &[f64], seed: u64) -> Result<SweepResult> {
    let achieved = achieved_grid(model, task, inits, grid, seed)?;
    let mut rows = Vec::with_capacity(inits.len() * grid.len());
    for k in 0..inits.len() {
        for (i, &p) in grid.iter().enumerate() {
            rows.push(SweepRow {
                init: k,
                prompt: p,
                achieved: achieved[i][k],
            });
        }
    }
    let prompts: Vec<f64> = rows.iter().map(|r| r.prompt).collect();
    let got: Vec<f64> = rows.iter().map(|r| r.achieved).collect();
    let per_init_spearman = (0..inits.len())
        .map(|k| {
            let col: Vec<f64> = achieved.iter().map(|row| row[k]).collect();
            spearman(grid, &col).ok()
        })
        .collect();
    Ok(SweepResult {
        spearman: spearman(&prompts, &got)?,
        rows,
        per_init_spearman,
    })
}
