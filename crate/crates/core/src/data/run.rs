use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tasks::{ArchSpec, ParamVector};

pub const RUN_MAGIC: &[u8; 8] = b"GPTCKPT1";

/// One saved snapshot of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Metric values in the run's `metric_names` order.
    pub metrics: Vec<f64>,
    pub theta: Vec<f32>,
}

/// Run-level header stored at the top of every run file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: usize,
    pub seed: u64,
    pub arch: ArchSpec,
    pub metric_names: Vec<String>,
    /// Number of checkpoint records.
    pub num_checkpoints: usize,
    /// Parameters per checkpoint.
    pub num_params: usize,
    /// Optimizer updates in the full run.
    pub total_iterations: usize,
    /// Seed that reproduces the recorded metrics (policy rollouts).
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub header: RunHeader,
    pub checkpoints: Vec<Checkpoint>,
}

impl Run {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if self.checkpoints.len() != h.num_checkpoints || h.num_params != h.arch.param_count() {
            return Err(Error::Format(format!("run {} header does not match contents", h.run_id)));
        }
        for w in self.checkpoints.windows(2) {
            if w[0].step >= w[1].step {
                return Err(Error::Format(format!("run {} steps not strictly increasing", h.run_id)));
            }
        }
        for c in &self.checkpoints {
            if c.theta.len() != h.num_params || c.metrics.len() != h.metric_names.len() {
                return Err(Error::Format(format!("run {} record has wrong width", h.run_id)));
            }
            if c.metrics.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite(format!("run {} metrics", h.run_id)));
            }
        }
        Ok(())
    }

    pub fn params(&self, index: usize) -> Result<ParamVector> {
        let c = self
            .checkpoints
            .get(index)
            .ok_or_else(|| invalid(format!("checkpoint {index} out of range")))?;
        ParamVector::new(self.header.arch.clone(), c.theta.clone())
    }
}

/// Little-endian layout: magic, u64 header length, header JSON, then per
/// checkpoint `[u64 step][f32 metric × m][f32 θ × D]`.
pub fn write_run(path: &Path, run: &Run) -> Result<()> {
    run.validate()?;
    let json = serde_json::to_vec(&run.header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(RUN_MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for c in &run.checkpoints {
        out.write_all(&c.step.to_le_bytes())?;
        for &m in &c.metrics {
            out.write_all(&(m as f32).to_le_bytes())?;
        }
        for v in &c.theta {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn read_header_json(r: &mut impl Read, magic: &[u8; 8]) -> Result<Vec<u8>> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 24 {
        return Err(Error::Format("header too large".into()));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    Ok(json)
}

pub fn read_run(path: &Path) -> Result<Run> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let header: RunHeader = serde_json::from_slice(&read_header_json(&mut f, RUN_MAGIC)?)?;
    let m = header.metric_names.len();
    let mut checkpoints = Vec::with_capacity(header.num_checkpoints);
    for _ in 0..header.num_checkpoints {
        let mut step = [0u8; 8];
        f.read_exact(&mut step)?;
        let metrics = read_f32s(&mut f, m)?.into_iter().map(f64::from).collect();
        let theta = read_f32s(&mut f, header.num_params)?;
        checkpoints.push(Checkpoint {
            step: u64::from_le_bytes(step),
            metrics,
            theta,
        });
    }
    let mut rest = [0u8; 1];
    if f.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last checkpoint".into()));
    }
    let run = Run { header, checkpoints };
    run.validate()?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Activation;

    pub(crate) fn toy_run() -> Run {
        let arch = ArchSpec::mlp(&[2, 3, 2], Activation::Relu).unwrap();
        let d = arch.param_count();
        let checkpoints = (0..4u64)
            .map(|i| Checkpoint {
                step: i * 7,
                metrics: vec![1.5 - i as f64 * 0.25, 40.0],
                theta: (0..d).map(|k| (k as f32 * 0.1 + i as f32).sin() * 1e-3 + f32::EPSILON).collect(),
            })
            .collect();
        Run {
            header: RunHeader {
                run_id: 3,
                seed: 99,
                arch,
                metric_names: vec!["test_loss".into(), "test_error".into()],
                num_checkpoints: 4,
                num_params: d,
                total_iterations: 21,
                eval_seed: 5,
            },
            checkpoints,
        }
    }

    #[test]
    fn run_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        let run = toy_run();
        write_run(&path, &run).unwrap();
        let back = read_run(&path).unwrap();
        assert_eq!(back, run);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"GPTCKPT1");
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        write_run(&path, &toy_run()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_run(&path).is_err());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_run(&path), Err(Error::Format(_))));
    }

    #[test]
    fn non_increasing_steps_invalid() {
        let mut run = toy_run();
        run.checkpoints[2].step = run.checkpoints[1].step;
        assert!(run.validate().is_err());
    }
}
