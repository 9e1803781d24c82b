use serde::{Deserialize, Serialize};

use super::{check_task, metrics_of, propose};
use crate::error::{invalid, Result};
use crate::gpt::{GptModel, Sampler};
use crate::seed::derive_seed;
use crate::tasks::Task;

/// Samples farther than this from the principal plane are not exported.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-3;

const POWER_ITERS: usize = 500;
const GRID_MARGIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub a: f64,
    pub b: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub index: usize,
    pub a: f64,
    pub b: f64,
    pub reconstruction: f64,
    /// Metric of the sample itself.
    pub metric: f64,
    /// Metric of its projection onto the plane.
    pub projected_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceResult {
    pub prompt: f64,
    pub num_samples: usize,
    pub mean: Vec<f32>,
    pub directions: [Vec<f64>; 2],
    /// Sample variance captured by each direction.
    pub explained: [f64; 2],
    pub grid: Vec<SurfacePoint>,
    /// Samples within the reconstruction tolerance.
    pub retained: Vec<SurfaceSample>,
    /// Largest |metric − projected_metric| over retained samples.
    pub max_metric_gap: Option<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean and top-two principal directions of the rows, by power iteration
/// with deflation. Errors when the rows span fewer than two dimensions.
pub fn principal_plane(rows: &[Vec<f32>]) -> Result<(Vec<f64>, [Vec<f64>; 2], [f64; 2])> {
    if rows.len() < 3 {
        return Err(invalid("principal plane needs ≥ 3 samples"));
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64 / n;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();
    let total: f64 = centered.iter().map(|c| dot(c, c)).sum::<f64>() / n;
    let scale = mean.iter().map(|m| m * m).sum::<f64>() / d as f64 + 1.0;
    let floor = 1e-12 * scale;
    if total <= floor {
        return Err(invalid("samples are rank-deficient: all samples are identical"));
    }
    // covariance-vector product without forming the D×D matrix
    let cov_mul = |v: &[f64], found: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for c in &centered {
            let w = dot(c, v) / n;
            out.iter_mut().zip(c).for_each(|(o, x)| *o += w * x);
        }
        for u in found {
            let w = dot(u, &out);
            out.iter_mut().zip(u).for_each(|(o, x)| *o -= w * x);
        }
        out
    };
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let mut explained = [0.0; 2];
    for (k, slot) in explained.iter_mut().enumerate() {
        // deterministic start with weight on every coordinate
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + k * 13) % 11) as f64 / 11.0).collect();
        for u in &dirs {
            let w = dot(u, &v);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= w * y);
        }
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut next = cov_mul(&v, &dirs);
            lambda = normalize(&mut next);
            if lambda <= floor {
                break;
            }
            v = next;
        }
        if lambda <= floor {
            return Err(invalid(format!("samples are rank-deficient: fewer than {} directions", k + 1)));
        }
        *slot = lambda;
        dirs.push(v);
    }
    let [u1, u2]: [Vec<f64>; 2] = dirs.try_into().expect("two directions");
    Ok((mean, [u1, u2], explained))
}

/// Draws `n_samples` with fixed inputs and varying sampling noise, fits
/// the principal plane and evaluates the metric on a grid in that plane.
pub fn pca_surface_export(
    model: &GptModel,
    task: &Task,
    theta: &[f32],
    prompt: f64,
    n_samples: usize,
    grid_res: usize,
    seed: u64,
) -> Result<SurfaceResult> {
    check_task(model, task)?;
    if n_samples < 3 || grid_res < 2 {
        return Err(invalid("surface needs ≥ 3 samples and grid_res ≥ 2"));
    }
    let idx = model.config().metric_index;
    let metric = metrics_of(task, idx, &[theta.to_vec()])?[0];
    let thetas = vec![theta; n_samples];
    let seeds: Vec<u64> = (0..n_samples).map(|i| derive_seed(seed, &[i as u64])).collect();
    let samples = propose(model, &thetas, &vec![metric; n_samples], &vec![prompt; n_samples], &seeds, Sampler::Ddpm)?;
    let (mean, dirs, explained) = principal_plane(&samples)?;

    let to_point = |a: f64, b: f64| -> Vec<f32> {
        (0..mean.len()).map(|i| (mean[i] + a * dirs[0][i] + b * dirs[1][i]) as f32).collect()
    };
    let mut coords = Vec::with_capacity(n_samples);
    for s in &samples {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
        let (a, b) = (dot(&c, &dirs[0]), dot(&c, &dirs[1]));
        let resid: f64 = (0..c.len())
            .map(|i| (c[i] - a * dirs[0][i] - b * dirs[1][i]).powi(2))
            .sum::<f64>()
            .sqrt();
        coords.push((a, b, resid));
    }
    let span = |f: fn(&(f64, f64, f64)) -> f64| {
        let lo = coords.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = GRID_MARGIN * (hi - lo).max(1e-12);
        (lo - pad, hi + pad)
    };
    let ((a_lo, a_hi), (b_lo, b_hi)) = (span(|c| c.0), span(|c| c.1));
    let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (grid_res - 1) as f64;
    let mut ab = Vec::with_capacity(grid_res * grid_res);
    for i in 0..grid_res {
        for j in 0..grid_res {
            ab.push((step(a_lo, a_hi, i), step(b_lo, b_hi, j)));
        }
    }
    let grid_params: Vec<Vec<f32>> = ab.iter().map(|&(a, b)| to_point(a, b)).collect();
    let grid_metrics = metrics_of(task, idx, &grid_params)?;
    let grid = ab
        .iter()
        .zip(grid_metrics)
        .map(|(&(a, b), metric)| SurfacePoint { a, b, metric })
        .collect();

    let keep: Vec<usize> = (0..n_samples).filter(|&i| coords[i].2 < RECONSTRUCTION_TOLERANCE).collect();
    let kept: Vec<Vec<f32>> = keep.iter().map(|&i| samples[i].clone()).collect();
    let projected: Vec<Vec<f32>> = keep.iter().map(|&i| to_point(coords[i].0, coords[i].1)).collect();
    let (m_kept, m_proj) = (metrics_of(task, idx, &kept)?, metrics_of(task, idx, &projected)?);
    let retained: Vec<SurfaceSample> = keep
        .iter()
        .enumerate()
        .map(|(k, &i)| SurfaceSample {
            index: i,
            a: coords[i].0,
            b: coords[i].1,
            reconstruction: coords[i].2,
            metric: m_kept[k],
            projected_metric: m_proj[k],
        })
        .collect();
    let max_metric_gap = retained
        .iter()
        .map(|s| (s.metric - s.projected_metric).abs())
        .reduce(f64::max);
    Ok(SurfaceResult {
        prompt,
        num_samples: n_samples,
        mean: mean.iter().map(|&m| m as f32).collect(),
        directions: dirs,
        explained,
        grid,
        retained,
        max_metric_gap,
    })
}
