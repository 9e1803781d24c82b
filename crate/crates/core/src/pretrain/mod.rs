//! Pre-training the diffusion transformer on checkpoint tuples.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{sample_tuple, CheckpointDataset, NormStats, Permutation, Run};
use crate::diffusion::{diffusion_loss, q_sample, DiffusionSchedule};
use crate::error::{invalid, Error, Result};
use crate::eval;
use crate::gpt::{ForwardInputs, GptConfig, GptModel};
use crate::par;
use crate::seed::derive_seed;
use crate::tasks::{ArchSpec, Task};
use crate::tensor::{clip_grad_norm, ema_update, lr_at, AdamW, Graph, Tensor};

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_ALIGN: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of `iterations` spent in linear warmup.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta2: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub augment: bool,
    /// Train only on (first, last) checkpoint pairs.
    pub final_only: bool,
    /// Iterations between report records; 0 records only the end.
    pub eval_interval: usize,
    /// Batches used for each split-loss estimate in the report.
    pub eval_batches: usize,
    /// Networks used for the prompt-alignment column; 0 skips it.
    pub alignment_nets: usize,
    pub alignment_prompts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 32,
            lr: 1e-3,
            warmup_fraction: 0.05,
            weight_decay: 0.1,
            beta2: 0.999,
            grad_clip: 1.0,
            ema_decay: 0.998,
            augment: true,
            final_only: false,
            eval_interval: 500,
            eval_batches: 4,
            alignment_nets: 0,
            alignment_prompts: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(invalid("weight_decay and grad_clip must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("beta2 and ema_decay must lie in [0, 1)"));
        }
        if self.eval_batches == 0 {
            return Err(invalid("eval_batches must be ≥ 1"));
        }
        if self.alignment_nets > 0 && self.alignment_prompts < 2 {
            return Err(invalid("prompt alignment needs ≥ 2 prompts"));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.iterations as f64 * self.warmup_fraction).round() as usize
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub iteration: usize,
    /// Mean batch loss since the previous record; absent before any step.
    pub train_loss: Option<f64>,
    pub test_loss: f64,
    pub prompt_alignment: Option<f64>,
    pub ema_path: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<ReportRecord>,
}

impl TrainReport {
    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

/// Optional side outputs of [`pretrain`].
#[derive(Clone, Copy, Default)]
pub struct PretrainIo<'a> {
    /// Needed for the prompt-alignment column.
    pub task: Option<&'a Task>,
    /// EMA snapshots are written here at each record when set.
    pub snapshot_dir: Option<&'a Path>,
}

pub struct Pretrained {
    pub raw: GptModel,
    pub ema: GptModel,
    pub report: TrainReport,
    /// Batch loss of every iteration.
    pub losses: Vec<f64>,
}

/// A drawn training tuple in raw parameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTuple {
    pub earlier: Vec<f32>,
    pub later: Vec<f32>,
    pub metric: f64,
    pub prompt: f64,
}

/// Uniform run, then an ordered checkpoint pair (or first/last), with an
/// optional permutation shared by both members.
pub fn draw_tuple(
    runs: &[Run],
    arch: &ArchSpec,
    metric_index: usize,
    augment: bool,
    final_only: bool,
    rng: &mut impl Rng,
) -> Result<RawTuple> {
    if runs.is_empty() {
        return Err(invalid("no runs to sample from"));
    }
    let run = &runs[rng.random_range(0..runs.len())];
    let (a, b) = if final_only {
        let c = &run.checkpoints;
        if c.len() < 2 {
            return Err(invalid("run needs ≥ 2 checkpoints"));
        }
        (&c[0], &c[c.len() - 1])
    } else {
        sample_tuple(run, rng)?
    };
    let metric = *a.metrics.get(metric_index).ok_or_else(|| invalid("metric index out of range"))?;
    let prompt = b.metrics[metric_index];
    let (earlier, later) = if augment {
        let p = Permutation::sample(arch, rng);
        (p.apply_slice(arch, &a.theta)?, p.apply_slice(arch, &b.theta)?)
    } else {
        (a.theta.clone(), b.theta.clone())
    };
    Ok(RawTuple {
        earlier,
        later,
        metric,
        prompt,
    })
}

/// A normalized, noised training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<f32>,
    pub theta: Vec<f32>,
    pub target: Vec<f32>,
    pub metric: Vec<f64>,
    pub prompt: Vec<f64>,
    pub step: Vec<usize>,
}

impl Batch {
    pub fn inputs(&self) -> ForwardInputs<'_, f32> {
        ForwardInputs {
            x: &self.x,
            theta: &self.theta,
            metric: &self.metric,
            prompt: &self.prompt,
            step: &self.step,
        }
    }
}

pub struct BatchSpec<'a> {
    pub runs: &'a [Run],
    pub arch: &'a ArchSpec,
    pub norm: NormStats,
    pub sched: &'a DiffusionSchedule,
    pub metric_index: usize,
    pub augment: bool,
    pub final_only: bool,
}

/// Row `k` depends only on `derive_seed(seed, [k])`, so the batch is the
/// same regardless of worker count.
pub fn sample_batch(spec: &BatchSpec<'_>, rows: usize, seed: u64) -> Result<Batch> {
    let d = spec.arch.param_count();
    let drawn = par::map(rows, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]));
        let t = draw_tuple(spec.runs, spec.arch, spec.metric_index, spec.augment, spec.final_only, &mut rng)?;
        let theta = spec.norm.normalize(&t.earlier);
        let target = spec.norm.normalize(&t.later);
        let j = rng.random_range(1..=spec.sched.steps());
        let z: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = q_sample(spec.sched, &target, j, &z)?;
        Ok::<_, Error>((x, theta, target, t.metric, t.prompt, j))
    });
    let mut b = Batch {
        x: Vec::with_capacity(rows * d),
        theta: Vec::with_capacity(rows * d),
        target: Vec::with_capacity(rows * d),
        metric: Vec::with_capacity(rows),
        prompt: Vec::with_capacity(rows),
        step: Vec::with_capacity(rows),
    };
    for r in drawn {
        let (x, theta, target, m, p, j) = r?;
        b.x.extend(x);
        b.theta.extend(theta);
        b.target.extend(target);
        b.metric.push(m);
        b.prompt.push(p);
        b.step.push(j);
    }
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn runs(self, ds: &CheckpointDataset) -> &[Run] {
        match self {
            Split::Train => &ds.train,
            Split::Test => &ds.test,
        }
    }
}

/// Mean diffusion loss of frozen weights over `num_batches` unaugmented
/// batches drawn from `split`.
pub fn loss_on_split(
    model: &GptModel,
    ds: &CheckpointDataset,
    split: Split,
    num_batches: usize,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let runs = split.runs(ds);
    if runs.is_empty() || num_batches == 0 || batch == 0 {
        return Err(invalid("loss_on_split needs a nonempty split and ≥ 1 batch"));
    }
    let sched = model.schedule()?;
    let spec = BatchSpec {
        runs,
        arch: &model.arch,
        norm: model.norm,
        sched: &sched,
        metric_index: model.config().metric_index,
        augment: false,
        final_only: false,
    };
    let mut total = 0.0;
    for i in 0..num_batches {
        let b = sample_batch(&spec, batch, derive_seed(seed, &[i as u64]))?;
        total += diffusion_loss(&model.predict(&b.inputs())?, &b.target)?;
    }
    Ok(total / num_batches as f64)
}

fn check_compatible(ds: &CheckpointDataset, gpt: &GptConfig) -> Result<()> {
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(invalid("dataset needs nonempty train and test splits"));
    }
    if gpt.metric_index >= ds.manifest.metric_names.len() {
        return Err(invalid(format!(
            "metric_index {} but the dataset records {} metrics",
            gpt.metric_index,
            ds.manifest.metric_names.len()
        )));
    }
    for run in ds.train.iter().chain(&ds.test) {
        if run.header.arch != ds.manifest.arch {
            return Err(invalid(format!("run {} architecture differs from the manifest", run.header.run_id)));
        }
    }
    Ok(())
}

/// Trains a fresh model on `ds` and returns raw and EMA weights.
pub fn pretrain(ds: &CheckpointDataset, gpt: &GptConfig, cfg: &TrainConfig, io: PretrainIo<'_>) -> Result<Pretrained> {
    cfg.validate()?;
    check_compatible(ds, gpt)?;
    let arch = ds.arch().clone();
    let mut raw = GptModel::init(gpt.clone(), arch, ds.norm(), derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let mut ema = raw.clone();
    let sched = raw.schedule()?;
    let spec = BatchSpec {
        runs: &ds.train,
        arch: ds.arch(),
        norm: ds.norm(),
        sched: &sched,
        metric_index: gpt.metric_index,
        augment: cfg.augment,
        final_only: cfg.final_only,
    };
    let mut opt = AdamW::new(cfg.lr, 0.9, cfg.beta2, 1e-8, cfg.weight_decay);
    let warmup = cfg.warmup_steps();
    let mut report = TrainReport::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut since_record = Vec::new();

    for it in 0..cfg.iterations {
        let batch = sample_batch(&spec, cfg.batch, derive_seed(cfg.seed, &[STREAM_TRAIN, it as u64]))?;
        let mut g = Graph::new();
        let vars: Vec<_> = raw.weights.iter().map(|w| g.param(w.clone())).collect();
        let pred = raw.spec.forward(&mut g, &vars, &batch.inputs())?;
        let rows = batch.metric.len();
        let target = g.constant(Tensor::matrix(rows, raw.spec.dim(), batch.target)?);
        let loss_var = g.mse(pred, target)?;
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at iteration {it}")));
        }
        let mut grads = g.backward(loss_var)?;
        let mut grad_tensors = vars.iter().map(|&v| grads.take(v, &g)).collect::<Result<Vec<_>>>()?;
        drop(g);
        if cfg.grad_clip > 0.0 {
            let norm = clip_grad_norm(&mut grad_tensors, cfg.grad_clip)?;
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {norm} at iteration {it}")));
            }
        }
        opt.lr = lr_at(it + 1, cfg.iterations, warmup, cfg.lr)?;
        opt.step(&mut raw.weights, &grad_tensors)?;
        ema_update(&mut ema.weights, &raw.weights, cfg.ema_decay)?;
        losses.push(loss);
        since_record.push(loss);

        let done = it + 1;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done != cfg.iterations {
            report.records.push(record(ds, &ema, cfg, io, done, &mut since_record)?);
        }
    }
    report.records.push(record(ds, &ema, cfg, io, cfg.iterations, &mut since_record)?);
    Ok(Pretrained {
        raw,
        ema,
        report,
        losses,
    })
}

fn record(
    ds: &CheckpointDataset,
    ema: &GptModel,
    cfg: &TrainConfig,
    io: PretrainIo<'_>,
    iteration: usize,
    since: &mut Vec<f64>,
) -> Result<ReportRecord> {
    let train_loss = (!since.is_empty()).then(|| since.iter().sum::<f64>() / since.len() as f64);
    since.clear();
    let test_loss = loss_on_split(ema, ds, Split::Test, cfg.eval_batches, cfg.batch, derive_seed(cfg.seed, &[STREAM_EVAL]))?;
    let prompt_alignment = match io.task {
        Some(task) if cfg.alignment_nets > 0 => {
            let seed = derive_seed(cfg.seed, &[STREAM_ALIGN]);
            let nets = eval::random_inits(task, cfg.alignment_nets, seed)?;
            let prompts = eval::prompt_grid(ds, ema.config().metric_index, cfg.alignment_prompts)?;
            Some(eval::prompt_alignment(ema, task, &nets, &prompts, seed)?.r2)
        }
        _ => None,
    };
    let ema_path = match io.snapshot_dir {
        Some(dir) => {
            let path = dir.join(format!("ema_{iteration:07}.bin"));
            ema.save(&path)?;
            Some(path.to_string_lossy().into_owned())
        }
        None => None,
    };
    Ok(ReportRecord {
        iteration,
        train_loss,
        test_loss,
        prompt_alignment,
        ema_path,
    })
}

#[cfg(test)]
mod tests;
