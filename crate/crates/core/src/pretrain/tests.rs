use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::DataConfig;
use crate::diffusion::ScheduleConfig;
use crate::tasks::{forward_task, ParamVector, TaskSpec};

fn task() -> Task {
    let mut spec = TaskSpec::blobs();
    spec.hidden = vec![4];
    spec.supervised.epochs = 2;
    spec.load().unwrap()
}

fn dataset(task: &Task, runs: usize, checkpoints: usize) -> CheckpointDataset {
    let cfg = DataConfig {
        runs,
        checkpoints_per_run: checkpoints,
        test_fraction: 0.25,
        seed: 3,
        ..Default::default()
    };
    CheckpointDataset::generate(task, &cfg).unwrap()
}

fn gpt() -> GptConfig {
    GptConfig {
        hidden: 32,
        layers: 1,
        heads: 2,
        num_freqs: 8,
        schedule: ScheduleConfig::scaled(10),
        ..Default::default()
    }
}

fn quick(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 8,
        eval_interval: 0,
        eval_batches: 1,
        ..Default::default()
    }
}

fn no_io() -> PretrainIo<'static> {
    PretrainIo {
        task: None,
        snapshot_dir: None,
    }
}

#[test]
fn zero_iterations_keeps_identity_init() {
    let t = task();
    let ds = dataset(&t, 8, 3);
    let cfg = quick(0);
    let out = pretrain(&ds, &gpt(), &cfg, no_io()).unwrap();
    let fresh = GptModel::init(gpt(), ds.arch().clone(), ds.norm(), derive_seed(cfg.seed, &[STREAM_INIT])).unwrap();
    assert_eq!(out.raw.weights, fresh.weights);
    assert_eq!(out.ema.weights, fresh.weights);
    assert!(out.losses.is_empty());
    assert_eq!(out.report.records.len(), 1);
    assert_eq!(out.report.records[0].train_loss, None);
}

#[test]
fn identity_model_has_zero_loss_on_stationary_tuples() {
    let t = task();
    let mut ds = dataset(&t, 8, 3);
    for run in ds.train.iter_mut().chain(ds.test.iter_mut()) {
        let first = run.checkpoints[0].theta.clone();
        for c in &mut run.checkpoints {
            c.theta = first.clone();
        }
    }
    let model = GptModel::init(gpt(), ds.arch().clone(), ds.norm(), 1).unwrap();
    let loss = loss_on_split(&model, &ds, Split::Test, 3, 16, 9).unwrap();
    assert!(loss.abs() < 1e-10, "{loss}");
}

#[test]
fn loss_on_split_is_deterministic_and_split_specific() {
    let t = task();
    let ds = dataset(&t, 8, 4);
    let model = GptModel::init(gpt(), ds.arch().clone(), ds.norm(), 1).unwrap();
    let a = loss_on_split(&model, &ds, Split::Test, 2, 8, 5).unwrap();
    let b = loss_on_split(&model, &ds, Split::Test, 2, 8, 5).unwrap();
    let c = loss_on_split(&model, &ds, Split::Train, 2, 8, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(loss_on_split(&model, &ds, Split::Test, 0, 8, 5).is_err());
}

#[test]
fn overfits_a_single_run() {
    let t = task();
    let mut ds = dataset(&t, 4, 2);
    ds.train.truncate(1);
    let cfg = TrainConfig {
        iterations: 500,
        batch: 16,
        lr: 3e-3,
        weight_decay: 0.0,
        augment: false,
        eval_interval: 0,
        eval_batches: 1,
        ..Default::default()
    };
    let out = pretrain(&ds, &gpt(), &cfg, no_io()).unwrap();
    let head: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = out.losses[490..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.1 * head, "loss {head} -> {tail}");
}

#[test]
fn same_seed_reproduces_training() {
    let t = task();
    let ds = dataset(&t, 8, 3);
    let cfg = TrainConfig {
        eval_interval: 5,
        ..quick(12)
    };
    let a = pretrain(&ds, &gpt(), &cfg, no_io()).unwrap();
    let b = pretrain(&ds, &gpt(), &cfg, no_io()).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.report, b.report);
    assert_eq!(a.ema.weights, b.ema.weights);
    let iters: Vec<usize> = a.report.records.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![5, 10, 12]);
    let c = pretrain(&ds, &gpt(), &TrainConfig { seed: 1, ..cfg }, no_io()).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn ema_lags_raw_weights() {
    let t = task();
    let ds = dataset(&t, 8, 3);
    let out = pretrain(&ds, &gpt(), &quick(3), no_io()).unwrap();
    assert_ne!(out.raw.weights, out.ema.weights);
    let fresh = GptModel::init(gpt(), ds.arch().clone(), ds.norm(), derive_seed(0, &[STREAM_INIT])).unwrap();
    assert_ne!(out.ema.weights, fresh.weights);
}

#[test]
fn augmentation_shares_one_permutation() {
    let t = task();
    let ds = dataset(&t, 8, 5);
    let arch = ds.arch().clone();
    let mut probe = ChaCha8Rng::seed_from_u64(77);
    let inputs: Vec<f32> = (0..2 * 32).map(|_| probe.random_range(-2.0..2.0)).collect();
    for seed in 0..20 {
        let plain = draw_tuple(&ds.train, &arch, 0, false, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = draw_tuple(&ds.train, &arch, 0, true, false, &mut rng).unwrap();
        assert_eq!((plain.metric, plain.prompt), (aug.metric, aug.prompt));

        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let run = &ds.train[replay.random_range(0..ds.train.len())];
        sample_tuple(run, &mut replay).unwrap();
        let p = Permutation::sample(&arch, &mut replay);
        assert_eq!(aug.earlier, p.apply_slice(&arch, &plain.earlier).unwrap());
        assert_eq!(aug.later, p.apply_slice(&arch, &plain.later).unwrap());

        for (a, b) in [(&plain.earlier, &aug.earlier), (&plain.later, &aug.later)] {
            let fa = forward_task(&ParamVector::new(arch.clone(), a.clone()).unwrap(), &inputs).unwrap();
            let fb = forward_task(&ParamVector::new(arch.clone(), b.clone()).unwrap(), &inputs).unwrap();
            for (x, y) in fa.iter().zip(&fb) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn final_only_pairs_first_and_last() {
    let t = task();
    let ds = dataset(&t, 8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let tup = draw_tuple(&ds.train, ds.arch(), 0, false, true, &mut rng).unwrap();
        let run = ds.train.iter().find(|r| r.checkpoints[0].theta == tup.earlier).unwrap();
        assert_eq!(tup.later, run.checkpoints[4].theta);
        assert_eq!(tup.prompt, run.checkpoints[4].metrics[0]);
    }
}

#[test]
fn batches_do_not_depend_on_worker_count() {
    let t = task();
    let ds = dataset(&t, 8, 4);
    let sched = gpt().schedule.build().unwrap();
    let spec = BatchSpec {
        runs: &ds.train,
        arch: ds.arch(),
        norm: ds.norm(),
        sched: &sched,
        metric_index: 0,
        augment: true,
        final_only: false,
    };
    let a = par::with_jobs(1, || sample_batch(&spec, 12, 4).unwrap());
    let b = par::with_jobs(4, || sample_batch(&spec, 12, 4).unwrap());
    assert_eq!(a, b);
    assert!(a.step.iter().all(|&j| (1..=10).contains(&j)));
}

#[test]
fn report_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let t = task();
    let ds = dataset(&t, 8, 3);
    let cfg = TrainConfig {
        eval_interval: 2,
        alignment_nets: 2,
        alignment_prompts: 3,
        ..quick(4)
    };
    let io = PretrainIo {
        task: Some(&t),
        snapshot_dir: Some(dir.path()),
    };
    let out = pretrain(&ds, &gpt(), &cfg, io).unwrap();
    assert!(out.report.records.iter().all(|r| r.prompt_alignment.is_some()));
    let snap = out.report.records.last().unwrap().ema_path.clone().unwrap();
    assert_eq!(GptModel::load(Path::new(&snap)).unwrap().weights, out.ema.weights);
    let path = dir.path().join("report.jsonl");
    out.report.write_jsonl(&path).unwrap();
    assert_eq!(TrainReport::read_jsonl(&path).unwrap(), out.report);
}

#[test]
fn rejects_bad_configs() {
    let t = task();
    let ds = dataset(&t, 8, 3);
    assert!(pretrain(&ds, &gpt(), &TrainConfig { batch: 0, ..quick(1) }, no_io()).is_err());
    assert!(pretrain(&ds, &gpt(), &TrainConfig { lr: -1.0, ..quick(1) }, no_io()).is_err());
    let bad_metric = GptConfig { metric_index: 9, ..gpt() };
    assert!(pretrain(&ds, &bad_metric, &quick(1), no_io()).is_err());
}
