use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scheme_inits;
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Proposal, Sampler};
use crate::seed::derive_seed;
use crate::tasks::InitScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceResult {
    pub n_outer: usize,
    pub n_inner: usize,
    /// Per parameter: mean over inputs of the variance over sampling noise.
    pub noise_variance: Vec<f64>,
    /// Per parameter: mean over sampling noise of the variance over inputs.
    pub init_variance: Vec<f64>,
    pub mean_noise_variance: f64,
    pub mean_init_variance: f64,
    /// Parameter indices sorted by decreasing input variance.
    pub top_init_params: Vec<usize>,
}

impl VarianceResult {
    pub fn csv_rows(&self) -> Vec<(usize, f64, f64)> {
        (0..self.noise_variance.len())
            .map(|i| (i, self.noise_variance[i], self.init_variance[i]))
            .collect()
    }
}

fn unbiased_var(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// `(noise_variance, init_variance)` of a grid `samples[input][noise]`.
pub fn decompose_variance(samples: &[Vec<Vec<f32>>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let outer = samples.len();
    let inner = samples.first().map_or(0, Vec::len);
    if outer < 2 || inner < 2 {
        return Err(invalid("variance decomposition needs ≥ 2 samples per axis"));
    }
    if samples.iter().any(|row| row.len() != inner) {
        return Err(invalid("ragged sample grid"));
    }
    let d = samples[0][0].len();
    if samples.iter().flatten().any(|s| s.len() != d) {
        return Err(invalid("samples differ in length"));
    }
    let noise = (0..d)
        .map(|p| {
            (0..outer)
                .map(|a| unbiased_var(samples[a].iter().map(move |s| s[p] as f64)))
                .sum::<f64>()
                / outer as f64
        })
        .collect();
    let init = (0..d)
        .map(|p| {
            (0..inner)
                .map(|b| unbiased_var(samples.iter().map(move |row| row[b][p] as f64)))
                .sum::<f64>()
                / inner as f64
        })
        .collect();
    Ok((noise, init))
}

/// Deterministic DDIM samples over `n_outer` inputs × `n_inner` starting
/// noises, all conditioned on the same `metric` and `prompt`.
#[allow(clippy::too_many_arguments)]
pub fn variance_decomposition(
    model: &GptModel,
    metric: f64,
    prompt: f64,
    scheme: InitScheme,
    n_outer: usize,
    n_inner: usize,
    top_k: usize,
    seed: u64,
) -> Result<VarianceResult> {
    if n_outer < 2 || n_inner < 2 {
        return Err(invalid("variance decomposition needs ≥ 2 samples per axis"));
    }
    let d = model.spec.dim();
    let inits = scheme_inits(&model.arch, scheme, n_outer, derive_seed(seed, &[0]))?;
    let noises: Vec<Vec<f32>> = (0..n_inner)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, b as u64]));
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    let mut props = Vec::with_capacity(n_outer * n_inner);
    let mut noise = Vec::with_capacity(n_outer * n_inner);
    for init in &inits {
        for (b, z) in noises.iter().enumerate() {
            props.push(Proposal {
                theta: init,
                metric,
                prompt,
                seed: b as u64,
            });
            noise.push(z.clone());
        }
    }
    let flat = model.sample_with_noise(&props, Sampler::Ddim { eta: 0.0 }, Some(&noise))?;
    let grid: Vec<Vec<Vec<f32>>> = flat.chunks(n_inner).map(<[Vec<f32>]>::to_vec).collect();
    let (noise_variance, init_variance) = decompose_variance(&grid)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| init_variance[b].total_cmp(&init_variance[a]));
    order.truncate(top_k.min(d));
    Ok(VarianceResult {
        n_outer,
        n_inner,
        mean_noise_variance: mean(&noise_variance),
        mean_init_variance: mean(&init_variance),
        noise_variance,
        init_variance,
        top_init_params: order,
    })
}
