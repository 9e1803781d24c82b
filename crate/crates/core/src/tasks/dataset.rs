use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::ParamVector;
use super::mlp::forward_task;
use crate::error::{invalid, shape, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    ImageGrid,
}

/// A supervised classification task with a fixed train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub kind: DatasetKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub train_x: Vec<f32>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f32>,
    pub test_y: Vec<usize>,
}

impl TaskDataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_x.len() != self.train_y.len() * self.input_dim
            || self.test_x.len() != self.test_y.len() * self.input_dim
        {
            return Err(shape("dataset", "input array does not match label count"));
        }
        if self
            .train_y
            .iter()
            .chain(&self.test_y)
            .any(|&y| y >= self.num_classes)
        {
            return Err(invalid("label outside [0, num_classes)"));
        }
        Ok(())
    }
}

/// Gaussian blobs on a circle, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 128,
            test_per_class: 128,
            radius: 1.5,
            std: 0.8,
            seed: 0,
        }
    }
}

pub fn make_blobs(cfg: &BlobsConfig) -> Result<TaskDataset> {
    if cfg.num_classes < 2 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(invalid("blobs need ≥ 2 classes and a nonempty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.std).map_err(|e| invalid(e.to_string()))?;
    let mut draw = |per_class: usize| {
        let mut x = Vec::with_capacity(per_class * cfg.num_classes * 2);
        let mut y = Vec::with_capacity(per_class * cfg.num_classes);
        // interleave classes so any prefix is balanced
        for _ in 0..per_class {
            for c in 0..cfg.num_classes {
                let a = std::f64::consts::TAU * c as f64 / cfg.num_classes as f64;
                x.push((cfg.radius * a.cos() + noise.sample(&mut rng)) as f32);
                x.push((cfg.radius * a.sin() + noise.sample(&mut rng)) as f32);
                y.push(c);
            }
        }
        (x, y)
    };
    let (train_x, train_y) = draw(cfg.train_per_class);
    let (test_x, test_y) = draw(cfg.test_per_class);
    Ok(TaskDataset {
        kind: DatasetKind::Blobs,
        input_dim: 2,
        num_classes: cfg.num_classes,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

/// Header of an image-grid task file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGridHeader {
    pub train_count: usize,
    pub test_count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

/// Writes `[u64 header_len][header JSON][f32 LE pixels: train then test][u8 labels: train then test]`.
pub fn write_image_grid(path: &Path, ds: &TaskDataset, height: usize, width: usize) -> Result<()> {
    ds.validate()?;
    if height * width != ds.input_dim || ds.num_classes > 256 {
        return Err(invalid("grid dims must match input width; at most 256 classes"));
    }
    let header = ImageGridHeader {
        train_count: ds.train_len(),
        test_count: ds.test_len(),
        height,
        width,
        num_classes: ds.num_classes,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in ds.train_x.iter().chain(&ds.test_x) {
        out.write_all(&v.to_le_bytes())?;
    }
    let labels: Vec<u8> = ds.train_y.iter().chain(&ds.test_y).map(|&y| y as u8).collect();
    out.write_all(&labels)?;
    out.flush()?;
    Ok(())
}

pub fn read_image_grid(path: &Path) -> Result<TaskDataset> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Format("image-grid header too large".into()));
    }
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    let h: ImageGridHeader = serde_json::from_slice(&json)?;
    let dim = h.height * h.width;
    let total = h.train_count + h.test_count;
    let mut raw = vec![0u8; total * dim * 4];
    f.read_exact(&mut raw)?;
    let pixels: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut labels = vec![0u8; total];
    f.read_exact(&mut labels)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let split = h.train_count * dim;
    let ds = TaskDataset {
        kind: DatasetKind::ImageGrid,
        input_dim: dim,
        num_classes: h.num_classes,
        train_x: pixels[..split].to_vec(),
        train_y: labels[..h.train_count].to_vec(),
        test_x: pixels[split..].to_vec(),
        test_y: labels[h.train_count..].to_vec(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Test-split metrics of a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// Mean cross-entropy.
    pub test_loss: f64,
    /// Percent misclassified, in [0, 100].
    pub test_error: f64,
}

/// Mean cross-entropy and percent error of `params` on rows `x`, labels `y`.
pub fn classification_metrics(params: &ParamVector, x: &[f32], y: &[usize]) -> Result<TaskMetrics> {
    if y.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let logits = forward_task(params, x)?;
    let c = params.arch().output_dim();
    if logits.len() != y.len() * c {
        return Err(shape("eval_metrics", "architecture output does not match labels"));
    }
    let mut loss = 0.0f64;
    let mut wrong = 0usize;
    for (row, &label) in logits.chunks(c).zip(y) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[label] as f64;
        // first maximal index wins ties
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if pred != label {
            wrong += 1;
        }
    }
    let n = y.len() as f64;
    Ok(TaskMetrics {
        test_loss: loss / n,
        test_error: 100.0 * wrong as f64 / n,
    })
}

pub fn eval_metrics(params: &ParamVector, ds: &TaskDataset) -> Result<TaskMetrics> {
    classification_metrics(params, &ds.test_x, &ds.test_y)
}
