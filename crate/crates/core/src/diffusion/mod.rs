//! Gaussian diffusion over flat parameter vectors with signal (x̂₀)
//! prediction: forward noising, the training objective, and DDPM / DDIM
//! reverse samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Linear β schedule settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// Shorter schedule whose β endpoints scale by `1000 / steps`, keeping
    /// the total noise injected comparable to the 1000-step default.
    pub fn scaled(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * k,
            beta_end: (0.02 * k).min(0.999),
        }
    }

    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// β, α = 1 − β and ᾱ for steps `1..=J`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs ≥ 1 step"));
    }
    let ordered = if steps == 1 { beta_start <= beta_end } else { beta_start < beta_end };
    if !(beta_start > 0.0 && ordered && beta_end < 1.0) {
        return Err(invalid(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * a);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.steps() {
            return Err(invalid(format!("diffusion step {j} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, j: usize) -> f64 {
        self.betas[j - 1]
    }

    pub fn alpha(&self, j: usize) -> f64 {
        self.alphas[j - 1]
    }

    /// Defined for `0..=J`.
    pub fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bars[j]
    }

    /// Fixed posterior variance `β̃_j = (1 − ᾱ_{j−1}) / (1 − ᾱ_j) · β_j`.
    pub fn posterior_variance(&self, j: usize) -> f64 {
        (1.0 - self.alpha_bar(j - 1)) / (1.0 - self.alpha_bar(j)) * self.beta(j)
    }
}

/// `√ᾱ_j·θ + √(1 − ᾱ_j)·z`.
pub fn q_sample(sched: &DiffusionSchedule, theta: &[f32], j: usize, z: &[f32]) -> Result<Vec<f32>> {
    sched.check(j)?;
    if theta.len() != z.len() {
        return Err(shape("q_sample", format!("θ has {} entries, z has {}", theta.len(), z.len())));
    }
    let (a, b) = (sched.alpha_bar(j).sqrt(), (1.0 - sched.alpha_bar(j)).sqrt());
    Ok(theta
        .iter()
        .zip(z)
        .map(|(&t, &n)| (a * t as f64 + b * n as f64) as f32)
        .collect())
}

/// Mean squared error between a prediction and the clean target.
pub fn diffusion_loss(prediction: &[f32], target: &[f32]) -> Result<f64> {
    if prediction.len() != target.len() || target.is_empty() {
        return Err(shape("diffusion_loss", "prediction and target differ in length"));
    }
    let s: f64 = prediction
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    Ok(s / target.len() as f64)
}

/// Inputs for one batched denoiser call; row `b` of each matrix belongs to
/// request `b`. All rows share the diffusion step.
pub struct DenoiseBatch<'a> {
    /// Noised future parameters `[B, D]`.
    pub x: &'a [f32],
    /// Conditioning parameters `[B, D]`.
    pub theta: &'a [f32],
    /// Metric of `theta`, one per row.
    pub metric: &'a [f32],
    /// Prompted metric, one per row.
    pub prompt: &'a [f32],
    pub step: usize,
}

impl DenoiseBatch<'_> {
    pub fn rows(&self) -> usize {
        self.metric.len()
    }
}

/// A conditional x̂₀ predictor, operating in normalized parameter space.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// Returns `[B, D]` predictions of the clean future parameters.
    fn predict_x0(&self, batch: &DenoiseBatch<'_>) -> Result<Vec<f32>>;
}

/// One sampling request, in the denoiser's (normalized) space.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub theta: Vec<f32>,
    pub metric: f32,
    pub prompt: f32,
    /// Seeds this request's private noise stream, so results do not depend
    /// on which other requests share the batch.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reverse {
    Ddpm,
    Ddim { eta: f64 },
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn reverse(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    reqs: &[SampleRequest],
    kind: Reverse,
    noise_init: Option<&[Vec<f32>]>,
) -> Result<Vec<Vec<f32>>> {
    let d = model.dim();
    let b = reqs.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    if reqs.iter().any(|r| r.theta.len() != d) {
        return Err(shape("sample", format!("request θ length differs from model dim {d}")));
    }
    let mut rngs: Vec<ChaCha8Rng> = reqs.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut x: Vec<f64> = match noise_init {
        Some(init) => {
            if init.len() != b || init.iter().any(|n| n.len() != d) {
                return Err(shape("sample", "noise_init must hold one length-D vector per request"));
            }
            init.iter().flatten().map(|&v| v as f64).collect()
        }
        None => rngs.iter_mut().flat_map(|r| gaussian(r, d)).collect(),
    };
    let theta: Vec<f32> = reqs.iter().flat_map(|r| r.theta.iter().copied()).collect();
    let metric: Vec<f32> = reqs.iter().map(|r| r.metric).collect();
    let prompt: Vec<f32> = reqs.iter().map(|r| r.prompt).collect();
    let mut xf = vec![0f32; b * d];
    for j in (1..=sched.steps()).rev() {
        for (o, &v) in xf.iter_mut().zip(&x) {
            *o = v as f32;
        }
        let x0 = model.predict_x0(&DenoiseBatch {
            x: &xf,
            theta: &theta,
            metric: &metric,
            prompt: &prompt,
            step: j,
        })?;
        if x0.len() != b * d {
            return Err(shape("sample", "denoiser returned the wrong number of values"));
        }
        if j == 1 {
            // ᾱ₀ = 1: the posterior mean is x̂₀ itself and no noise is added
            x = x0.iter().map(|&v| v as f64).collect();
            break;
        }
        let (ab, ab_prev) = (sched.alpha_bar(j), sched.alpha_bar(j - 1));
        match kind {
            Reverse::Ddpm => {
                let c0 = ab_prev.sqrt() * sched.beta(j) / (1.0 - ab);
                let ct = sched.alpha(j).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let sd = sched.posterior_variance(j).sqrt();
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let z = gaussian(rng, d);
                    for k in 0..d {
                        let i = r * d + k;
                        x[i] = c0 * x0[i] as f64 + ct * x[i] + sd * z[k];
                    }
                }
            }
            Reverse::Ddim { eta } => {
                let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
                let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let z = if sigma > 0.0 { gaussian(rng, d) } else { vec![0.0; d] };
                    for k in 0..d {
                        let i = r * d + k;
                        let x0i = x0[i] as f64;
                        let eps = (x[i] - ab.sqrt() * x0i) / (1.0 - ab).sqrt();
                        x[i] = ab_prev.sqrt() * x0i + dir * eps + sigma * z[k];
                    }
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {j}")));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampler output".into()));
    }
    Ok(x.chunks(d).map(|c| c.iter().map(|&v| v as f32).collect()).collect())
}

/// Ancestral sampling from pure noise with fixed variance `β̃_j`.
pub fn ddpm_sample(model: &dyn Denoiser, sched: &DiffusionSchedule, reqs: &[SampleRequest]) -> Result<Vec<Vec<f32>>> {
    reverse(model, sched, reqs, Reverse::Ddpm, None)
}

/// DDIM sampling from explicit starting noise. `eta = 0` is deterministic;
/// `eta = 1` injects the DDPM posterior variance, drawn from each request's
/// seed.
pub fn ddim_sample(
    model: &dyn Denoiser,
    sched: &DiffusionSchedule,
    reqs: &[SampleRequest],
    eta: f64,
    noise_init: &[Vec<f32>],
) -> Result<Vec<Vec<f32>>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid("eta must lie in [0, 1]"));
    }
    reverse(model, sched, reqs, Reverse::Ddim { eta }, Some(noise_init))
}

/// Mean per-dimension `KL(q(x_J) ‖ N(0, 1))` in bits, with `q(x_J)` the
/// Gaussian fitted per coordinate to the noised normalized training data.
pub fn signal_destruction_kl<'a>(
    sched: &DiffusionSchedule,
    vectors: impl IntoIterator<Item = &'a [f32]>,
) -> Result<f64> {
    let mut n = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut sum_sq: Vec<f64> = Vec::new();
    for v in vectors {
        if n == 0 {
            sum = vec![0.0; v.len()];
            sum_sq = vec![0.0; v.len()];
        } else if v.len() != sum.len() {
            return Err(shape("signal_destruction_kl", "vectors differ in length"));
        }
        for (k, &x) in v.iter().enumerate() {
            sum[k] += x as f64;
            sum_sq[k] += x as f64 * x as f64;
        }
        n += 1;
    }
    if n == 0 || sum.is_empty() {
        return Err(invalid("empty split"));
    }
    let ab = sched.alpha_bar(sched.steps());
    let total: f64 = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, s2)| {
            let mu = s / n as f64;
            noised_kl_bits(ab, mu, (s2 / n as f64 - mu * mu).max(0.0))
        })
        .sum();
    Ok(total / sum.len() as f64)
}

/// `KL(N(√ᾱ·μ, ᾱσ² + 1 − ᾱ) ‖ N(0, 1))` in bits.
fn noised_kl_bits(alpha_bar: f64, mu: f64, var: f64) -> f64 {
    let m = alpha_bar.sqrt() * mu;
    let dv = alpha_bar * (var - 1.0);
    // ln_1p keeps precision when the variance is within rounding of 1
    0.5 * (m * m + dv - dv.ln_1p()) / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests;
