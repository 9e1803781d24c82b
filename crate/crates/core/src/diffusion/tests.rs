use super::*;
use rand::Rng;

struct Identity(usize);

impl Denoiser for Identity {
    fn dim(&self) -> usize {
        self.0
    }

    fn predict_x0(&self, batch: &DenoiseBatch<'_>) -> Result<Vec<f32>> {
        Ok(batch.theta.to_vec())
    }
}

/// x̂₀ = a·x + c·θ + p·prompt, elementwise.
struct Linear {
    d: usize,
    a: f32,
    c: f32,
    p: f32,
}

impl Denoiser for Linear {
    fn dim(&self) -> usize {
        self.d
    }

    fn predict_x0(&self, batch: &DenoiseBatch<'_>) -> Result<Vec<f32>> {
        Ok(batch
            .x
            .iter()
            .zip(batch.theta)
            .enumerate()
            .map(|(i, (&x, &t))| self.a * x + self.c * t + self.p * batch.prompt[i / self.d])
            .collect())
    }
}

fn default_schedule() -> DiffusionSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn requests(n: usize, d: usize, seed: u64) -> Vec<SampleRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| SampleRequest {
            theta: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            metric: rng.random_range(0.0..2.0),
            prompt: rng.random_range(0.0..2.0),
            seed: seed * 1000 + i as u64,
        })
        .collect()
}

#[test]
fn schedule_basics() {
    let s = default_schedule();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    assert!((1..=1000).all(|j| s.alpha_bar(j) < s.alpha_bar(j - 1)));
    assert!(s.alpha_bar(1000) < 1e-3);
    // iterative product against a direct one
    for j in [1, 17, 500, 1000] {
        let direct: f64 = (1..=j).map(|i| 1.0 - s.beta(i)).product();
        assert!((direct - s.alpha_bar(j)).abs() < 1e-12);
    }
    assert!(make_linear_schedule(10, 0.02, 1e-4).is_err());
    assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
    assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
    let short = ScheduleConfig::scaled(50).build().unwrap();
    assert!((1..=50).all(|j| short.alpha_bar(j) < short.alpha_bar(j - 1)));
}

#[test]
fn q_sample_examples_and_moments() {
    let s = default_schedule();
    let theta = [0.5f32, -1.0, 2.0];
    let zero = q_sample(&s, &theta, 300, &[0.0; 3]).unwrap();
    for (a, b) in zero.iter().zip(theta) {
        assert!((*a as f64 - s.alpha_bar(300).sqrt() * b as f64).abs() < 1e-6);
    }
    assert!(q_sample(&s, &theta, 0, &[0.0; 3]).is_err());
    assert!(q_sample(&s, &theta, 1001, &[0.0; 3]).is_err());

    let j = 250;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for _ in 0..n {
        let z: Vec<f32> = (0..3).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let x = q_sample(&s, &theta, j, &z).unwrap();
        for k in 0..3 {
            sum[k] += x[k] as f64;
            sq[k] += (x[k] as f64).powi(2);
        }
    }
    let var = 1.0 - s.alpha_bar(j);
    for k in 0..3 {
        let mean = sum[k] / n as f64;
        let emp_var = sq[k] / n as f64 - mean * mean;
        let want = s.alpha_bar(j).sqrt() * theta[k] as f64;
        assert!((mean - want).abs() < 3.0 * (var / n as f64).sqrt(), "mean {mean} vs {want}");
        // sample variance has standard error var·√(2/n)
        assert!((emp_var - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
    }
}

#[test]
fn loss_examples_and_oracle() {
    let t = [1.0f32, -2.0, 0.25];
    assert_eq!(diffusion_loss(&t, &t).unwrap(), 0.0);
    let shifted: Vec<f32> = t.iter().map(|v| v + 0.5).collect();
    assert!((diffusion_loss(&shifted, &t).unwrap() - 0.25).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let a: Vec<f32> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f32> = (0..37).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..37 {
            acc += (a[i] as f64 - b[i] as f64) * (a[i] as f64 - b[i] as f64);
        }
        assert!((diffusion_loss(&a, &b).unwrap() - acc / 37.0).abs() < 1e-12);
    }
    assert!(diffusion_loss(&a_short(), &t).is_err());
}

fn a_short() -> Vec<f32> {
    vec![0.0; 2]
}

#[test]
fn identity_denoiser_returns_theta_exactly() {
    let s = ScheduleConfig::scaled(40).build().unwrap();
    let reqs = requests(5, 9, 1);
    let out = ddpm_sample(&Identity(9), &s, &reqs).unwrap();
    let noise: Vec<Vec<f32>> = requests(5, 9, 2).into_iter().map(|r| r.theta).collect();
    let ddim = ddim_sample(&Identity(9), &s, &reqs, 0.0, &noise).unwrap();
    let ddim1 = ddim_sample(&Identity(9), &s, &reqs, 1.0, &noise).unwrap();
    for i in 0..5 {
        assert_eq!(out[i], reqs[i].theta);
        assert_eq!(ddim[i], reqs[i].theta);
        assert_eq!(ddim1[i], reqs[i].theta);
    }
}

#[test]
fn samplers_are_deterministic_and_batch_independent() {
    let s = ScheduleConfig::scaled(30).build().unwrap();
    let m = Linear {
        d: 6,
        a: 0.3,
        c: 0.6,
        p: 0.2,
    };
    let reqs = requests(4, 6, 7);
    let a = ddpm_sample(&m, &s, &reqs).unwrap();
    assert_eq!(a, ddpm_sample(&m, &s, &reqs).unwrap());
    let single = ddpm_sample(&m, &s, &reqs[2..3]).unwrap();
    assert_eq!(single[0], a[2]);
    assert_eq!(a[0].len(), 6);

    let noise: Vec<Vec<f32>> = requests(4, 6, 9).into_iter().map(|r| r.theta).collect();
    let d1 = ddim_sample(&m, &s, &reqs, 0.0, &noise).unwrap();
    let d2 = ddim_sample(&m, &s, &reqs, 0.0, &noise).unwrap();
    assert_eq!(d1, d2);
    let other: Vec<Vec<f32>> = requests(4, 6, 10).into_iter().map(|r| r.theta).collect();
    assert_ne!(d1, ddim_sample(&m, &s, &reqs, 0.0, &other).unwrap());
    assert!(ddim_sample(&m, &s, &reqs, 1.5, &noise).is_err());
    assert!(ddim_sample(&m, &s, &reqs, 0.0, &noise[..2]).is_err());
}

#[test]
fn ddpm_and_ddim_eta_one_agree_in_distribution() {
    let s = ScheduleConfig::scaled(20).build().unwrap();
    let m = Linear {
        d: 2,
        a: 0.4,
        c: 0.7,
        p: 0.0,
    };
    let base = SampleRequest {
        theta: vec![0.8, -0.5],
        metric: 0.0,
        prompt: 0.0,
        seed: 0,
    };
    let n = 10_000;
    let reqs: Vec<SampleRequest> = (0..n)
        .map(|i| SampleRequest {
            seed: i as u64,
            ..base.clone()
        })
        .collect();
    let p = ddpm_sample(&m, &s, &reqs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..2).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    let reqs2: Vec<SampleRequest> = (0..n)
        .map(|i| SampleRequest {
            seed: 1_000_000 + i as u64,
            ..base.clone()
        })
        .collect();
    let q = ddim_sample(&m, &s, &reqs2, 1.0, &noise).unwrap();
    let moments = |xs: &[Vec<f32>], k: usize| {
        let mean = xs.iter().map(|x| x[k] as f64).sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x[k] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var)
    };
    for k in 0..2 {
        let (m1, v1) = moments(&p, k);
        let (m2, v2) = moments(&q, k);
        let se_mean = ((v1 + v2) / n as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se_mean, "means {m1} {m2}");
        let se_var = ((2.0 * v1 * v1 + 2.0 * v2 * v2) / n as f64).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se_var, "vars {v1} {v2}");
    }
}

#[test]
fn sampling_leaves_inputs_untouched() {
    let s = ScheduleConfig::scaled(10).build().unwrap();
    let reqs = requests(3, 4, 5);
    let copy = reqs.clone();
    let m = Linear {
        d: 4,
        a: 0.5,
        c: 0.5,
        p: 0.1,
    };
    ddpm_sample(&m, &s, &reqs).unwrap();
    assert_eq!(reqs, copy);
}

#[test]
fn kl_examples() {
    assert_eq!(noised_kl_bits(0.0, 0.0, 1.0), 0.0);
    assert!(noised_kl_bits(0.0, 3.0, 0.1).abs() < 1e-15);
    // direct formula for a nontrivial case
    let (ab, mu, var) = (0.3f64, 0.7f64, 0.2f64);
    let (m, v) = (ab.sqrt() * mu, ab * var + 1.0 - ab);
    let want = 0.5 * (v + m * m - 1.0 - v.ln()) / 2f64.ln();
    assert!((noised_kl_bits(ab, mu, var) - want).abs() < 1e-12);
    let s = default_schedule();
    let data: Vec<Vec<f32>> = requests(50, 8, 3).into_iter().map(|r| r.theta).collect();
    let kl = signal_destruction_kl(&s, data.iter().map(|v| v.as_slice())).unwrap();
    assert!(kl > 0.0 && kl < 1e-3, "{kl}");
    assert!(signal_destruction_kl(&s, std::iter::empty::<&[f32]>()).is_err());
}
