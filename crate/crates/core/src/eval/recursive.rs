use serde::{Deserialize, Serialize};

use super::{better, check_task, metrics_of, propose, scheme_inits};
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Sampler};
use crate::seed::derive_seed;
use crate::tasks::{InitScheme, Task};

/// Parameters and metric after each step, starting with the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub thetas: Vec<Vec<f32>>,
    pub metrics: Vec<f64>,
}

/// Feeds each sample back in as the next input. Step `k` of chain `i` is
/// seeded by `derive_seed(seeds[i], [k])`.
pub fn recursive_prompt_many(
    model: &GptModel,
    task: &Task,
    starts: &[Vec<f32>],
    prompt: f64,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Trajectory>> {
    check_task(model, task)?;
    if steps == 0 {
        return Err(invalid("recursive prompting needs ≥ 1 step"));
    }
    if seeds.len() != starts.len() {
        return Err(invalid("one seed per starting point"));
    }
    let idx = model.config().metric_index;
    let mut current = starts.to_vec();
    let mut metrics = metrics_of(task, idx, &current)?;
    let mut out: Vec<Trajectory> = current
        .iter()
        .zip(&metrics)
        .map(|(t, &m)| Trajectory {
            thetas: vec![t.clone()],
            metrics: vec![m],
        })
        .collect();
    let prompts = vec![prompt; starts.len()];
    for k in 0..steps {
        let refs: Vec<&[f32]> = current.iter().map(Vec::as_slice).collect();
        let step_seeds: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, &[k as u64])).collect();
        current = propose(model, &refs, &metrics, &prompts, &step_seeds, Sampler::Ddpm)?;
        metrics = metrics_of(task, idx, &current)?;
        for ((tr, t), &m) in out.iter_mut().zip(&current).zip(&metrics) {
            tr.thetas.push(t.clone());
            tr.metrics.push(m);
        }
    }
    Ok(out)
}

pub fn recursive_prompt(
    model: &GptModel,
    task: &Task,
    theta0: &[f32],
    prompt: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut v = recursive_prompt_many(model, task, &[theta0.to_vec()], prompt, steps, &[seed])?;
    Ok(v.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub scheme: InitScheme,
    pub init: usize,
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSummary {
    pub scheme: InitScheme,
    /// Median over inits of the metric after one step.
    pub median_first: f64,
    /// Median over inits of the metric after the last step.
    pub median_last: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub prompt: f64,
    pub steps: usize,
    pub summaries: Vec<OodSummary>,
    pub rows: Vec<OodRow>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Recursive prompting from initializations drawn with other schemes than
/// the training runs used.
pub fn ood_eval(
    model: &GptModel,
    task: &Task,
    schemes: &[InitScheme],
    num_inits: usize,
    prompt: f64,
    steps: usize,
    seed: u64,
) -> Result<OodResult> {
    if num_inits == 0 {
        return Err(invalid("ood evaluation needs ≥ 1 init"));
    }
    let idx = model.config().metric_index;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (s, &scheme) in schemes.iter().enumerate() {
        let starts = scheme_inits(&task.arch, scheme, num_inits, derive_seed(seed, &[s as u64, 0]))?;
        let seeds: Vec<u64> = (0..num_inits).map(|i| derive_seed(seed, &[s as u64, 1, i as u64])).collect();
        let trajs = recursive_prompt_many(model, task, &starts, prompt, steps, &seeds)?;
        for (i, t) in trajs.iter().enumerate() {
            for (k, &m) in t.metrics.iter().enumerate() {
                rows.push(OodRow {
                    scheme,
                    init: i,
                    step: k,
                    metric: m,
                });
            }
        }
        let first: Vec<f64> = trajs.iter().map(|t| t.metrics[1]).collect();
        let last: Vec<f64> = trajs.iter().map(|t| t.metrics[steps]).collect();
        let (median_first, median_last) = (median(&first), median(&last));
        summaries.push(OodSummary {
            scheme,
            median_first,
            median_last,
            improved: better(task, idx, median_last, median_first),
        });
    }
    Ok(OodResult {
        prompt,
        steps,
        summaries,
        rows,
    })
}
