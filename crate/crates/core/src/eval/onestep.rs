use serde::{Deserialize, Serialize};

use super::{better, check_task, metrics_of, propose, random_inits};
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Sampler};
use crate::par;
use crate::seed::derive_seed;
use crate::tasks::{ParamVector, Task};
use crate::tensor::{AdamW, SgdMomentum, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneStepConfig {
    pub num_inits: usize,
    /// Prompt = best observed training-split value, moved this far in the
    /// improving direction.
    pub prompt_offset: f64,
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for OneStepConfig {
    fn default() -> Self {
        Self {
            num_inits: 5,
            prompt_offset: 0.0,
            lrs: vec![1e-4, 1e-3, 1e-2],
            weight_decays: vec![0.0, 5e-5, 5e-4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepRow {
    pub method: String,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub mean: f64,
    pub per_init: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStepResult {
    pub metric: String,
    pub higher_is_better: bool,
    pub prompt: f64,
    pub initial: OneStepRow,
    pub gpt: OneStepRow,
    /// Grid cell with the best mean among all gradient baselines.
    pub best_baseline: OneStepRow,
    /// Every baseline cell.
    pub baselines: Vec<OneStepRow>,
}

impl OneStepResult {
    pub fn csv_rows(&self) -> Vec<(String, Option<f64>, Option<f64>, f64)> {
        std::iter::once(&self.initial)
            .chain(std::iter::once(&self.gpt))
            .chain(&self.baselines)
            .map(|r| (r.method.clone(), r.lr, r.weight_decay, r.mean))
            .collect()
    }
}

const METHODS: [&str; 3] = ["sgd", "sgd-momentum", "adam"];

fn apply_step(theta: &[f32], grad: &[f32], method: &str, lr: f64, wd: f64) -> Result<Vec<f32>> {
    let mut p = [Tensor::from_vec(theta.to_vec())];
    let g = [Tensor::from_vec(grad.to_vec())];
    match method {
        "sgd" => SgdMomentum::new(lr, 0.0, wd).step(&mut p, &g)?,
        "sgd-momentum" => SgdMomentum::new(lr, 0.9, wd).step(&mut p, &g)?,
        "adam" => AdamW::new(lr, 0.9, 0.999, 1e-8, wd).step(&mut p, &g)?,
        other => return Err(invalid(format!("unknown baseline `{other}`"))),
    }
    let [t] = p;
    Ok(t.into_data())
}

fn row(method: &str, lr: Option<f64>, wd: Option<f64>, per_init: Vec<f64>) -> OneStepRow {
    OneStepRow {
        method: method.into(),
        lr,
        weight_decay: wd,
        mean: per_init.iter().sum::<f64>() / per_init.len() as f64,
        per_init,
    }
}

/// One prompted sample against one gradient step of each optimizer on the
/// task's differentiable surrogate, over fresh random initializations.
pub fn one_step_compare(
    model: &GptModel,
    task: &Task,
    best: f64,
    cfg: &OneStepConfig,
    seed: u64,
) -> Result<OneStepResult> {
    check_task(model, task)?;
    if cfg.num_inits == 0 || cfg.lrs.is_empty() || cfg.weight_decays.is_empty() {
        return Err(invalid("one-step comparison needs ≥ 1 init, lr and weight decay"));
    }
    let idx = model.config().metric_index;
    let up = task.higher_is_better(idx);
    let prompt = if up { best + cfg.prompt_offset } else { best - cfg.prompt_offset };
    let inits = random_inits(task, cfg.num_inits, derive_seed(seed, &[0]))?;
    let initial = metrics_of(task, idx, &inits)?;

    let refs: Vec<&[f32]> = inits.iter().map(Vec::as_slice).collect();
    let seeds: Vec<u64> = (0..inits.len()).map(|i| derive_seed(seed, &[1, i as u64])).collect();
    let samples = propose(model, &refs, &initial, &vec![prompt; inits.len()], &seeds, Sampler::Ddpm)?;
    let gpt = metrics_of(task, idx, &samples)?;

    let grads = par::map(inits.len(), |i| {
        let p = ParamVector::new(task.arch.clone(), inits[i].clone())?;
        task.surrogate_gradient(&p, derive_seed(seed, &[2, i as u64]))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut baselines = Vec::new();
    for method in METHODS {
        for &lr in &cfg.lrs {
            for &wd in &cfg.weight_decays {
                let stepped = inits
                    .iter()
                    .zip(&grads)
                    .map(|(t, g)| apply_step(t, g, method, lr, wd))
                    .collect::<Result<Vec<_>>>()?;
                baselines.push(row(method, Some(lr), Some(wd), metrics_of(task, idx, &stepped)?));
            }
        }
    }
    let best_baseline = baselines
        .iter()
        .fold(None::<&OneStepRow>, |acc, r| match acc {
            Some(b) if !better(task, idx, r.mean, b.mean) => Some(b),
            _ => Some(r),
        })
        .cloned()
        .expect("grid is nonempty");
    Ok(OneStepResult {
        metric: task.metric_names()[idx].clone(),
        higher_is_better: up,
        prompt,
        initial: row("initial", None, None, initial),
        gpt: row("gpt", None, None, gpt),
        best_baseline,
        baselines,
    })
}
