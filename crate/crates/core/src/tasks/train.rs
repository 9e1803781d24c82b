use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{init_params, ArchSpec, InitScheme, ParamVector};
use super::cartpole::{argmax, check_policy_arch, rollout_return, CartpoleConfig, CartpoleEnv, OBS_DIM};
use super::dataset::{eval_metrics, TaskDataset};
use super::mlp::{MlpVars, RowForward};
use crate::error::{invalid, Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{lr_at, AdamW, Graph, Optimizer, OptimizerKind, SgdMomentum, Tensor};

pub const SUPERVISED_METRICS: [&str; 2] = ["test_loss", "test_error"];
pub const POLICY_METRICS: [&str; 1] = ["return"];

/// Receives checkpoints while a task network trains.
pub trait CheckpointSink {
    /// Whether `step` should be saved; metrics are only computed when true.
    fn wants(&self, _step: usize) -> bool {
        true
    }

    fn save(&mut self, step: usize, params: &ParamVector, metrics: &[f64]) -> Result<()>;
}

/// Keeps every checkpoint in memory.
#[derive(Default)]
pub struct CollectAll(pub Vec<(usize, ParamVector, Vec<f64>)>);

impl CheckpointSink for CollectAll {
    fn save(&mut self, step: usize, params: &ParamVector, metrics: &[f64]) -> Result<()> {
        self.0.push((step, params.clone(), metrics.to_vec()));
        Ok(())
    }
}

/// Outcome of one task-level training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    /// Seed under which recorded metrics are reproducible (rollout seed for
    /// policies, unused for supervised runs).
    pub eval_seed: u64,
    pub initial_metrics: Vec<f64>,
    pub final_metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedHyper {
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init: InitScheme,
}

impl Default for SupervisedHyper {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            epochs: 8,
            batch_size: 64,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            init: InitScheme::UniformFanIn,
        }
    }
}

impl SupervisedHyper {
    pub fn iterations(&self, train_len: usize) -> usize {
        self.epochs * train_len.div_ceil(self.batch_size.max(1))
    }
}

fn make_optimizer(kind: OptimizerKind, lr: f64, momentum: f64, wd: f64) -> Optimizer<f32> {
    match kind {
        OptimizerKind::SgdMomentum => Optimizer::Sgd(SgdMomentum::new(lr, momentum, wd)),
        OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(lr, 0.9, 0.999, 1e-8, wd)),
    }
}

fn diverged(step: usize, what: &str) -> Error {
    Error::Diverged(format!("non-finite {what} at iteration {step}"))
}

/// Mean cross-entropy and its gradient on the given rows.
fn minibatch_grad(params: &ParamVector, x: Vec<f32>, y: &[usize]) -> Result<(f64, Vec<f32>)> {
    let arch = params.arch();
    let mut g = Graph::new();
    let vars = MlpVars::attach(&mut g, params)?;
    let xin = g.constant(Tensor::matrix(y.len(), arch.input_dim(), x)?);
    let logits = vars.forward(&mut g, arch, xin)?;
    let loss = g.cross_entropy(logits, y)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0] as f64, vars.flat_grad(&g, &grads)?))
}

/// Minibatch classifier training with a half-period cosine learning rate.
/// Checkpoint `s` holds the parameters after `s` updates, `s = 0..=N`.
pub fn run_supervised_training(
    arch: &ArchSpec,
    data: &TaskDataset,
    hyper: &SupervisedHyper,
    seed: u64,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainSummary> {
    data.validate()?;
    if data.train_len() == 0 || data.test_len() == 0 {
        return Err(invalid("dataset split is empty"));
    }
    if hyper.batch_size == 0 {
        return Err(invalid("batch_size must be ≥ 1"));
    }
    if arch.input_dim() != data.input_dim || arch.output_dim() != data.num_classes {
        return Err(crate::error::shape("run_supervised_training", "architecture does not fit dataset"));
    }
    let total = hyper.iterations(data.train_len());
    let mut params = init_params(arch, hyper.init, derive_seed(seed, &[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut opt = make_optimizer(hyper.optimizer, hyper.lr, hyper.momentum, hyper.weight_decay);
    let mut order: Vec<usize> = (0..data.train_len()).collect();
    let mut cursor = order.len();
    let metrics_of = |p: &ParamVector| eval_metrics(p, data).map(|m| vec![m.test_loss, m.test_error]);

    let initial_metrics = metrics_of(&params)?;
    if sink.wants(0) {
        sink.save(0, &params, &initial_metrics)?;
    }
    let mut final_metrics = initial_metrics.clone();
    let din = data.input_dim;
    for step in 1..=total {
        let mut x = Vec::with_capacity(hyper.batch_size * din);
        let mut y = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            x.extend_from_slice(&data.train_x[i * din..(i + 1) * din]);
            y.push(data.train_y[i]);
        }
        let (loss, grad) = minibatch_grad(&params, x, &y).map_err(|e| match e {
            Error::NonFinite(_) => diverged(step, "loss"),
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(diverged(step, "loss"));
        }
        opt.set_lr(lr_at(step - 1, total, 0, hyper.lr)?);
        let mut flat = [Tensor::from_vec(params.values().to_vec())];
        opt.step(&mut flat, &[Tensor::from_vec(grad)])?;
        params.values_mut().copy_from_slice(flat[0].data());
        if !params.values().iter().all(|v| v.is_finite()) {
            return Err(diverged(step, "parameters"));
        }
        if step == total || sink.wants(step) {
            let m = metrics_of(&params)?;
            if sink.wants(step) {
                sink.save(step, &params, &m)?;
            }
            if step == total {
                final_metrics = m;
            }
        }
    }
    Ok(TrainSummary {
        iterations: total,
        eval_seed: 0,
        initial_metrics,
        final_metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyHyper {
    pub iterations: usize,
    pub episodes_per_update: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub gamma: f64,
    /// Decay of the moving-average return baseline.
    pub baseline_decay: f64,
    /// Greedy rollouts averaged into each recorded return.
    pub eval_episodes: usize,
    pub init: InitScheme,
    pub env: CartpoleConfig,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        Self {
            iterations: 60,
            episodes_per_update: 8,
            lr: 0.01,
            optimizer: OptimizerKind::AdamW,
            gamma: 0.99,
            baseline_decay: 0.9,
            eval_episodes: 4,
            init: InitScheme::UniformFanIn,
            env: CartpoleConfig::default(),
        }
    }
}

/// REINFORCE with a moving-average baseline. Actions are sampled from the
/// softmax of the action scores; recorded returns use greedy rollouts under
/// a fixed per-run evaluation seed.
pub fn run_policy_training(
    arch: &ArchSpec,
    hyper: &PolicyHyper,
    seed: u64,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainSummary> {
    if hyper.episodes_per_update == 0 || hyper.eval_episodes == 0 {
        return Err(invalid("episode counts must be ≥ 1"));
    }
    if !(0.0..=1.0).contains(&hyper.gamma) || !(0.0..1.0).contains(&hyper.baseline_decay) {
        return Err(invalid("gamma must lie in [0, 1] and baseline_decay in [0, 1)"));
    }
    let mut params = init_params(arch, hyper.init, derive_seed(seed, &[0]))?;
    check_policy_arch(&params)?;
    let eval_seed = derive_seed(seed, &[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut opt = make_optimizer(hyper.optimizer, hyper.lr, 0.0, 0.0);
    let metric = |p: &ParamVector| rollout_return(p, &hyper.env, hyper.eval_episodes, eval_seed).map(|r| vec![r]);

    let initial_metrics = metric(&params)?;
    if sink.wants(0) {
        sink.save(0, &params, &initial_metrics)?;
    }
    let mut final_metrics = initial_metrics.clone();
    let mut env = CartpoleEnv::new(hyper.env.clone());
    let mut fwd = RowForward::new(arch);
    let mut baseline: Option<f64> = None;
    for step in 1..=hyper.iterations {
        let ep = collect_episodes(&params, hyper, &mut env, &mut fwd, &mut rng);
        let mean = ep.to_go.iter().sum::<f64>() / ep.to_go.len() as f64;
        let b = *baseline.get_or_insert(mean);
        baseline = Some(hyper.baseline_decay * b + (1.0 - hyper.baseline_decay) * mean);
        let grad = reinforce_grad(&params, &ep, b).map_err(|e| match e {
            Error::NonFinite(_) => diverged(step, "surrogate loss"),
            e => e,
        })?;
        let mut flat = [Tensor::from_vec(params.values().to_vec())];
        opt.step(&mut flat, &[Tensor::from_vec(grad)])?;
        params.values_mut().copy_from_slice(flat[0].data());
        if !params.values().iter().all(|v| v.is_finite()) {
            return Err(diverged(step, "parameters"));
        }
        let last = step == hyper.iterations;
        if last || sink.wants(step) {
            let m = metric(&params)?;
            if sink.wants(step) {
                sink.save(step, &params, &m)?;
            }
            if last {
                final_metrics = m;
            }
        }
    }
    Ok(TrainSummary {
        iterations: hyper.iterations,
        eval_seed,
        initial_metrics,
        final_metrics,
    })
}

struct Episodes {
    obs: Vec<f32>,
    actions: Vec<usize>,
    to_go: Vec<f64>,
}

/// Rolls out `episodes_per_update` stochastic episodes with discounted
/// returns-to-go per visited state.
fn collect_episodes(
    params: &ParamVector,
    hyper: &PolicyHyper,
    env: &mut CartpoleEnv,
    fwd: &mut RowForward,
    rng: &mut impl Rng,
) -> Episodes {
    let mut ep = Episodes {
        obs: Vec::new(),
        actions: Vec::new(),
        to_go: Vec::new(),
    };
    for _ in 0..hyper.episodes_per_update {
        env.reset(rng);
        let mut rewards = Vec::new();
        loop {
            let o = env.observation();
            let a = sample_softmax(fwd.run(params, &o), rng);
            ep.obs.extend_from_slice(&o);
            ep.actions.push(a);
            let (r, done) = env.step(a);
            rewards.push(r);
            if done {
                break;
            }
        }
        let mut g = 0.0;
        let start = ep.to_go.len();
        ep.to_go.resize(start + rewards.len(), 0.0);
        for t in (0..rewards.len()).rev() {
            g = rewards[t] + hyper.gamma * g;
            ep.to_go[start + t] = g;
        }
    }
    ep
}

/// Gradient of the advantage-weighted cross-entropy surrogate, with
/// advantages divided by their root mean square.
fn reinforce_grad(params: &ParamVector, ep: &Episodes, baseline: f64) -> Result<Vec<f32>> {
    let adv: Vec<f64> = ep.to_go.iter().map(|g| g - baseline).collect();
    let rms = (adv.iter().map(|a| a * a).sum::<f64>() / adv.len() as f64).sqrt().max(1e-8);
    let weights: Vec<f32> = adv.iter().map(|a| (a / rms) as f32).collect();
    let arch = params.arch();
    let mut g = Graph::new();
    let vars = MlpVars::attach(&mut g, params)?;
    let xin = g.constant(Tensor::matrix(ep.actions.len(), OBS_DIM, ep.obs.clone())?);
    let logits = vars.forward(&mut g, arch, xin)?;
    let loss = g.weighted_cross_entropy(logits, &ep.actions, &weights)?;
    let grads = g.backward(loss)?;
    vars.flat_grad(&g, &grads)
}

/// One REINFORCE gradient estimate at `params`, with the batch mean return
/// as baseline (the first update of a training run).
pub fn policy_gradient(params: &ParamVector, hyper: &PolicyHyper, seed: u64) -> Result<Vec<f32>> {
    check_policy_arch(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = CartpoleEnv::new(hyper.env.clone());
    let mut fwd = RowForward::new(params.arch());
    let ep = collect_episodes(params, hyper, &mut env, &mut fwd, &mut rng);
    let mean = ep.to_go.iter().sum::<f64>() / ep.to_go.len() as f64;
    reinforce_grad(params, &ep, mean)
}

/// Full-batch cross-entropy gradient over the training inputs.
pub fn supervised_gradient(params: &ParamVector, data: &TaskDataset) -> Result<Vec<f32>> {
    minibatch_grad(params, data.train_x.clone(), &data.train_y).map(|(_, g)| g)
}

fn sample_softmax(scores: &[f32], rng: &mut impl Rng) -> usize {
    let max = scores[argmax(scores)];
    let w: Vec<f64> = scores.iter().map(|&s| ((s - max) as f64).exp()).collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::arch::Activation;
    use crate::tasks::dataset::{make_blobs, BlobsConfig};

    fn blobs_arch() -> ArchSpec {
        ArchSpec::mlp(&[2, 16, 4], Activation::Relu).unwrap()
    }

    fn policy_arch() -> ArchSpec {
        ArchSpec::mlp(&[4, 32, 32, 2], Activation::Selu).unwrap()
    }

    #[test]
    fn zero_iterations_give_initial_checkpoint_only() {
        let ds = make_blobs(&BlobsConfig::default()).unwrap();
        let hyper = SupervisedHyper {
            epochs: 0,
            ..Default::default()
        };
        let mut sink = CollectAll::default();
        run_supervised_training(&blobs_arch(), &ds, &hyper, 1, &mut sink).unwrap();
        assert_eq!(sink.0.len(), 1);
        assert_eq!(sink.0[0].0, 0);

        let hyper = PolicyHyper {
            iterations: 0,
            ..Default::default()
        };
        let mut sink = CollectAll::default();
        run_policy_training(&policy_arch(), &hyper, 1, &mut sink).unwrap();
        assert_eq!(sink.0.len(), 1);
    }

    #[test]
    fn supervised_training_improves_and_is_reproducible() {
        let ds = make_blobs(&BlobsConfig::default()).unwrap();
        let hyper = SupervisedHyper::default();
        let mut better = 0;
        for seed in 0..5 {
            let mut sink = CollectAll::default();
            let s = run_supervised_training(&blobs_arch(), &ds, &hyper, seed, &mut sink).unwrap();
            assert_eq!(sink.0.len(), s.iterations + 1);
            assert!(s.final_metrics[0] < s.initial_metrics[0]);
            if s.final_metrics[1] < s.initial_metrics[1] {
                better += 1;
            }
            if seed == 0 {
                let mut again = CollectAll::default();
                run_supervised_training(&blobs_arch(), &ds, &hyper, seed, &mut again).unwrap();
                assert_eq!(sink.0, again.0);
            }
        }
        assert!(better >= 4, "{better}/5 runs reduced test error");
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let ds = make_blobs(&BlobsConfig::default()).unwrap();
        let hyper = SupervisedHyper {
            lr: 1e30,
            ..Default::default()
        };
        let err = run_supervised_training(&blobs_arch(), &ds, &hyper, 0, &mut CollectAll::default());
        assert!(matches!(err, Err(Error::Diverged(_))), "{err:?}");
    }

    #[test]
    fn recorded_return_matches_reevaluation() {
        let hyper = PolicyHyper {
            iterations: 3,
            ..Default::default()
        };
        let mut sink = CollectAll::default();
        let s = run_policy_training(&policy_arch(), &hyper, 5, &mut sink).unwrap();
        for (_, p, m) in &sink.0 {
            let r = rollout_return(p, &hyper.env, hyper.eval_episodes, s.eval_seed).unwrap();
            assert_eq!(r, m[0]);
        }
    }

    #[test]
    fn softmax_sampler_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = [0.0f32, 2f32.ln()];
        let n = 30_000;
        let ones = (0..n).filter(|_| sample_softmax(&scores, &mut rng) == 1).count();
        let p = ones as f64 / n as f64;
        // expected 2/3, binomial sd ≈ 0.0027
        assert!((p - 2.0 / 3.0).abs() < 0.015, "{p}");
    }
}
