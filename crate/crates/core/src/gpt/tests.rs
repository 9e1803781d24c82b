use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::NormStats;
use crate::diffusion::ScheduleConfig;
use crate::tasks::{Activation, ArchSpec};
use crate::tensor::{Graph, Tensor};

fn blobs_arch() -> ArchSpec {
    ArchSpec::mlp(&[2, 16, 4], Activation::Relu).unwrap()
}

fn small_config() -> GptConfig {
    GptConfig {
        hidden: 72,
        layers: 2,
        heads: 3,
        num_freqs: 16,
        schedule: ScheduleConfig::scaled(8),
        ..Default::default()
    }
}

fn tiny() -> (GptSpec, ArchSpec) {
    let arch = ArchSpec::mlp(&[2, 3, 2], Activation::Relu).unwrap();
    let cfg = GptConfig {
        hidden: 8,
        layers: 1,
        heads: 1,
        num_freqs: 3,
        max_freq_exp: 4.0,
        schedule: ScheduleConfig::scaled(10),
        ..Default::default()
    };
    (GptSpec::new(cfg, &arch).unwrap(), arch)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn identity_at_init_is_exact() {
    let arch = blobs_arch();
    let model = GptModel::init(small_config(), arch.clone(), NormStats::identity(), 4).unwrap();
    let d = arch.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows = 100;
    let x: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let theta: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let metric: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..3.0)).collect();
    let prompt: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..3.0)).collect();
    let step: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=8)).collect();
    let out = model
        .predict(&ForwardInputs {
            x: &x,
            theta: &theta,
            metric: &metric,
            prompt: &prompt,
            step: &step,
        })
        .unwrap();
    assert_eq!(out, theta);
}

#[test]
fn samplers_return_input_for_identity_model() {
    let arch = blobs_arch();
    let norm = NormStats {
        scale_factor: 3.7,
        target_std: 0.458,
    };
    let model = GptModel::init(small_config(), arch.clone(), norm, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let thetas: Vec<Vec<f32>> = (0..6)
        .map(|_| (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let props: Vec<Proposal> = thetas
        .iter()
        .enumerate()
        .map(|(i, t)| Proposal {
            theta: t,
            metric: 1.2,
            prompt: 0.3,
            seed: i as u64,
        })
        .collect();
    for sampler in [Sampler::Ddpm, Sampler::Ddim { eta: 0.0 }, Sampler::Ddim { eta: 1.0 }] {
        let out = model.sample(&props, sampler).unwrap();
        assert_eq!(out, thetas, "{sampler:?}");
    }
}

#[test]
fn init_zeroes_decoders_and_positions() {
    let arch = blobs_arch();
    let spec = GptSpec::new(small_config(), &arch).unwrap();
    let w = spec.init_weights(9);
    for ((name, _), t) in spec.weight_shapes().iter().zip(&w) {
        if name.starts_with("decoder") || name == "positional" {
            assert_eq!(t.data().iter().map(|v| v.abs()).sum::<f32>(), 0.0, "{name}");
        }
        if name.ends_with("gain") {
            assert!(t.data().iter().all(|&v| v == 1.0));
        }
    }
    assert_eq!(w, spec.init_weights(9));
    assert_ne!(w, spec.init_weights(10));
    // 4 parameter tokens per stream and 3 scalar tokens, each with a unique encoder
    assert_eq!(spec.num_tokens(), 11);
    let encoders = spec.weight_shapes().iter().filter(|(n, _)| n.ends_with("weight") && n.starts_with("encoder")).count();
    assert_eq!(encoders, 11);
}

#[test]
fn config_validation() {
    let arch = blobs_arch();
    // largest token is the 64-value second weight matrix
    let narrow = GptConfig {
        hidden: 64,
        heads: 4,
        ..small_config()
    };
    let err = GptSpec::new(narrow, &arch).unwrap_err().to_string();
    assert!(err.contains("M < hidden"), "{err}");
    let bad_heads = GptConfig {
        heads: 5,
        ..small_config()
    };
    assert!(GptSpec::new(bad_heads, &arch).is_err());
    let chunked = GptConfig {
        hidden: 64,
        heads: 4,
        token_mode: TokenMode::Chunked,
        chunk: 40,
        ..small_config()
    };
    let spec = GptSpec::new(chunked, &arch).unwrap();
    assert_eq!(spec.layout.len(), 5);
}

#[test]
fn forward_rejects_bad_inputs() {
    let (spec, arch) = tiny();
    let d = arch.param_count();
    let w32 = spec.init_weights(0);
    let mut g = Graph::new();
    let w: Vec<_> = w32.into_iter().map(|t| g.constant(t)).collect();
    let v = vec![0f32; d];
    let bad_step = ForwardInputs {
        x: &v,
        theta: &v,
        metric: &[0.0],
        prompt: &[0.0],
        step: &[11],
    };
    assert!(spec.forward(&mut g, &w, &bad_step).is_err());
    let short = vec![0f32; d - 1];
    let bad_dim = ForwardInputs {
        x: &short,
        theta: &v,
        metric: &[0.0],
        prompt: &[0.0],
        step: &[1],
    };
    assert!(spec.forward(&mut g, &w, &bad_dim).is_err());
}

/// MSE of the forward pass against a fixed target, in f64.
fn loss_at(spec: &GptSpec, weights: &[Tensor<f64>], inp: &ForwardInputs<'_, f64>, target: &[f64]) -> f64 {
    let mut g = Graph::new();
    let w: Vec<_> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let out = spec.forward(&mut g, &w, inp).unwrap();
    g.value(out).data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64
}

#[test]
fn forward_gradients_match_finite_differences() {
    let (spec, arch) = tiny();
    let d = arch.param_count();
    let rows = 3;
    for case in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        // random weights everywhere so every path carries gradient
        let weights: Vec<Tensor<f64>> = spec
            .weight_shapes()
            .into_iter()
            .map(|(_, dims)| {
                let n = dims.iter().product();
                Tensor::new(dims, rand_vec(&mut rng, n, 0.5)).unwrap()
            })
            .collect();
        let x = rand_vec(&mut rng, rows * d, 1.0);
        let theta = rand_vec(&mut rng, rows * d, 1.0);
        let target = rand_vec(&mut rng, rows * d, 1.0);
        let metric = rand_vec(&mut rng, rows, 1.0);
        let prompt = rand_vec(&mut rng, rows, 1.0);
        let step: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=10)).collect();
        let inp = ForwardInputs {
            x: &x,
            theta: &theta,
            metric: &metric,
            prompt: &prompt,
            step: &step,
        };

        let mut g = Graph::new();
        let vars: Vec<_> = weights.iter().map(|t| g.param(t.clone())).collect();
        let out = spec.forward(&mut g, &vars, &inp).unwrap();
        let tgt = g.constant(Tensor::matrix(rows, d, target.clone()).unwrap());
        let loss = g.mse(out, tgt).unwrap();
        let grads = g.backward(loss).unwrap();

        let h = 1e-5;
        for (i, ((name, _), v)) in spec.weight_shapes().iter().zip(&vars).enumerate() {
            let analytic = grads.get(*v, &g).unwrap();
            let mut numeric = vec![0.0; weights[i].len()];
            for k in 0..weights[i].len() {
                let mut w = weights.clone();
                w[i].data_mut()[k] += h;
                let up = loss_at(&spec, &w, &inp, &target);
                w[i].data_mut()[k] -= 2.0 * h;
                let down = loss_at(&spec, &w, &inp, &target);
                numeric[k] = (up - down) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / norm < 1e-4, "case {case} {name}: rel err {}", diff / norm);
        }
    }
}

#[test]
fn model_file_round_trip() {
    let arch = blobs_arch();
    let norm = NormStats {
        scale_factor: 4.185,
        target_std: 0.458,
    };
    let mut model = GptModel::init(small_config(), arch, norm, 3).unwrap();
    // make decoders nonzero so the whole file carries information
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in &mut model.weights {
        for v in t.data_mut() {
            *v += rng.random_range(-1e-3..1e-3);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let back = GptModel::load(&path).unwrap();
    assert_eq!(back.weights, model.weights);
    assert_eq!(back.spec, model.spec);
    assert_eq!(back.norm, model.norm);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(GptModel::load(&path).is_err());
}
