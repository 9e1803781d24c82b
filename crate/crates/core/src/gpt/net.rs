use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::GptConfig;
use super::model::{ForwardInputs, GptSpec};
use crate::data::{read_f32s, read_header_json, NormStats};
use crate::diffusion::{ddim_sample, ddpm_sample, DenoiseBatch, Denoiser, DiffusionSchedule, SampleRequest};
use crate::error::{shape, Error, Result};
use crate::par;
use crate::seed::derive_seed;
use crate::tasks::ArchSpec;
use crate::tensor::{Graph, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"GPTMODL1";

/// Rows per inference graph; bounds peak memory during sampling.
const INFER_CHUNK: usize = 64;

/// Weights plus everything needed to run them on raw parameters.
#[derive(Clone, Debug)]
pub struct GptModel {
    pub spec: GptSpec,
    pub arch: ArchSpec,
    pub norm: NormStats,
    pub weights: Vec<Tensor<f32>>,
}

/// Which reverse process turns noise into parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    /// Starting noise drawn from the request seed.
    Ddim { eta: f64 },
}

/// One "optimize these parameters toward `prompt`" request on raw values.
#[derive(Clone, Copy, Debug)]
pub struct Proposal<'a> {
    pub theta: &'a [f32],
    pub metric: f64,
    pub prompt: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: GptConfig,
    arch: ArchSpec,
    norm: NormStats,
    tensors: Vec<(String, Vec<usize>)>,
}

impl GptModel {
    pub fn new(config: GptConfig, arch: ArchSpec, norm: NormStats, weights: Vec<Tensor<f32>>) -> Result<Self> {
        let spec = GptSpec::new(config, &arch)?;
        spec.check_weights(&weights)?;
        Ok(Self {
            spec,
            arch,
            norm,
            weights,
        })
    }

    /// Freshly initialized (identity) model.
    pub fn init(config: GptConfig, arch: ArchSpec, norm: NormStats, seed: u64) -> Result<Self> {
        let spec = GptSpec::new(config, &arch)?;
        let weights = spec.init_weights(seed);
        Ok(Self {
            spec,
            arch,
            norm,
            weights,
        })
    }

    pub fn config(&self) -> &GptConfig {
        &self.spec.config
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        self.spec.config.schedule.build()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// x̂₀ predictions `[rows, D]` without recording gradients.
    pub fn predict(&self, inp: &ForwardInputs<'_, f32>) -> Result<Vec<f32>> {
        let rows = inp.rows();
        let d = self.spec.dim();
        let chunks = rows.div_ceil(INFER_CHUNK);
        let outs = par::map(chunks, |c| {
            let (lo, hi) = (c * INFER_CHUNK, ((c + 1) * INFER_CHUNK).min(rows));
            let sub = ForwardInputs {
                x: &inp.x[lo * d..hi * d],
                theta: &inp.theta[lo * d..hi * d],
                metric: &inp.metric[lo..hi],
                prompt: &inp.prompt[lo..hi],
                step: &inp.step[lo..hi],
            };
            let mut g = Graph::new();
            let w: Vec<_> = self.weights.iter().map(|t| g.constant(t.clone())).collect();
            let out = self.spec.forward(&mut g, &w, &sub)?;
            Ok::<_, Error>(g.value(out).data().to_vec())
        });
        let mut all = Vec::with_capacity(rows * d);
        for o in outs {
            all.extend(o?);
        }
        Ok(all)
    }

    /// Samples updated raw parameters. The decoded update is mapped back to
    /// raw scale and added to the raw input, so a zero update returns the
    /// input bit-exactly.
    pub fn sample(&self, props: &[Proposal<'_>], sampler: Sampler) -> Result<Vec<Vec<f32>>> {
        let noise = match sampler {
            Sampler::Ddpm => None,
            Sampler::Ddim { .. } => Some(
                props
                    .iter()
                    .map(|p| {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, &[0x4e01_5e]));
                        (0..self.spec.dim()).map(|_| StandardNormal.sample(&mut rng)).collect()
                    })
                    .collect::<Vec<Vec<f32>>>(),
            ),
        };
        self.sample_with_noise(props, sampler, noise.as_deref())
    }

    /// Like [`GptModel::sample`] with explicit DDIM starting noise.
    pub fn sample_with_noise(
        &self,
        props: &[Proposal<'_>],
        sampler: Sampler,
        noise: Option<&[Vec<f32>]>,
    ) -> Result<Vec<Vec<f32>>> {
        let d = self.spec.dim();
        if props.iter().any(|p| p.theta.len() != d) {
            return Err(shape("sample", format!("input parameters must have length {d}")));
        }
        let sched = self.schedule()?;
        let reqs: Vec<SampleRequest> = props
            .iter()
            .map(|p| SampleRequest {
                theta: self.norm.normalize(p.theta),
                metric: p.metric as f32,
                prompt: p.prompt as f32,
                seed: p.seed,
            })
            .collect();
        let out = match (sampler, noise) {
            (Sampler::Ddpm, _) => ddpm_sample(self, &sched, &reqs)?,
            (Sampler::Ddim { eta }, Some(n)) => ddim_sample(self, &sched, &reqs, eta, n)?,
            (Sampler::Ddim { .. }, None) => return Err(shape("sample", "DDIM needs starting noise")),
        };
        let s = self.norm.scale_factor;
        Ok(out
            .iter()
            .zip(&reqs)
            .zip(props)
            .map(|((x0, r), p)| {
                x0.iter()
                    .zip(&r.theta)
                    .zip(p.theta)
                    .map(|((&x, &tn), &t)| (t as f64 + (x as f64 - tn as f64) / s) as f32)
                    .collect()
            })
            .collect())
    }

    /// `[magic][u64 header_len][header JSON][f32 LE tensor data in header order]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            config: self.spec.config.clone(),
            arch: self.arch.clone(),
            norm: self.norm,
            tensors: self.spec.weight_shapes(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for t in &self.weights {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let header: ModelHeader = serde_json::from_slice(&read_header_json(&mut f, MODEL_MAGIC)?)?;
        let mut weights = Vec::with_capacity(header.tensors.len());
        for (_, dims) in &header.tensors {
            let n = dims.iter().product();
            weights.push(Tensor::new(dims.clone(), read_f32s(&mut f, n)?)?);
        }
        let mut rest = [0u8; 1];
        if std::io::Read::read(&mut f, &mut rest)? != 0 {
            return Err(Error::Format("trailing bytes in model file".into()));
        }
        let model = Self::new(header.config, header.arch, header.norm, weights)?;
        if model.spec.weight_shapes() != header.tensors {
            return Err(Error::Format("tensor list does not match config".into()));
        }
        Ok(model)
    }
}

impl Denoiser for GptModel {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn predict_x0(&self, batch: &DenoiseBatch<'_>) -> Result<Vec<f32>> {
        let metric: Vec<f64> = batch.metric.iter().map(|&v| v as f64).collect();
        let prompt: Vec<f64> = batch.prompt.iter().map(|&v| v as f64).collect();
        let step = vec![batch.step; batch.rows()];
        self.predict(&ForwardInputs {
            x: batch.x,
            theta: batch.theta,
            metric: &metric,
            prompt: &prompt,
            step: &step,
        })
    }
}
