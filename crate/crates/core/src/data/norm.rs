use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TARGET_STD: f64 = 0.458;

/// Single global parameter scale: `θ̂ = s·θ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub scale_factor: f64,
    pub target_std: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            scale_factor: 1.0,
            target_std: 1.0,
        }
    }

    /// `s = target_std / std(values)` over every value yielded.
    pub fn compute<'a>(vectors: impl IntoIterator<Item = &'a [f32]>, target_std: f64) -> Result<Self> {
        if !(target_std > 0.0 && target_std.is_finite()) {
            return Err(invalid("target_std must be positive"));
        }
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for v in vectors {
            for &x in v {
                // Welford
                n += 1;
                let d = x as f64 - mean;
                mean += d / n as f64;
                m2 += d * (x as f64 - mean);
            }
        }
        if n == 0 {
            return Err(invalid("no training parameters to normalize"));
        }
        let std = (m2 / n as f64).sqrt();
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::InvalidArgument("training parameters have zero variance".into()));
        }
        Ok(Self {
            scale_factor: target_std / std,
            target_std,
        })
    }

    pub fn normalize(&self, theta: &[f32]) -> Vec<f32> {
        let s = self.scale_factor;
        theta.iter().map(|&v| (v as f64 * s) as f32).collect()
    }

    pub fn denormalize(&self, theta: &[f32]) -> Vec<f32> {
        let s = self.scale_factor;
        theta.iter().map(|&v| (v as f64 / s) as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_of(v: &[f32]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        (v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn normalized_std_hits_target() {
        let a: Vec<f32> = (0..500).map(|i| ((i * 37) % 101) as f32 * 0.01 - 0.3).collect();
        let b: Vec<f32> = (0..300).map(|i| (i as f32 * 0.7).cos() * 0.2).collect();
        let s = NormStats::compute([a.as_slice(), b.as_slice()], DEFAULT_TARGET_STD).unwrap();
        let mut all = s.normalize(&a);
        all.extend(s.normalize(&b));
        assert!((std_of(&all) - DEFAULT_TARGET_STD).abs() < 1e-6);
        let back = s.denormalize(&s.normalize(&a));
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let z = [0.5f32; 10];
        assert!(NormStats::compute([z.as_slice()], 0.458).is_err());
        assert!(NormStats::compute(std::iter::empty::<&[f32]>(), 0.458).is_err());
        assert!(NormStats::compute([[1.0f32, 2.0].as_slice()], 0.0).is_err());
    }
}
