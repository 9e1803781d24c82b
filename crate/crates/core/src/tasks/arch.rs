use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
    None,
}

/// One fully-connected layer. Weights are stored `[fan_out, fan_in]`
/// row-major, so row `i` holds the incoming weights of output unit `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.fan_out } else { 0 }
    }
}

/// Location of one layer's parameter groups inside a flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOffsets {
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
}

/// Layer list of a task MLP.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Self { layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Biased MLP through `widths`, `hidden` activation on every layer but the last.
    pub fn mlp(widths: &[usize], hidden: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("an MLP needs at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec {
                fan_in: widths[i],
                fan_out: widths[i + 1],
                has_bias: true,
                activation: if i + 1 == n { Activation::None } else { hidden },
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("architecture has no layers"));
        }
        if self.layers.iter().any(|l| l.fan_in == 0 || l.fan_out == 0) {
            return Err(invalid("layer with zero width"));
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].fan_out != w[1].fan_in {
                return Err(invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].fan_out,
                    i + 1,
                    w[1].fan_in
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn offsets(&self) -> Vec<LayerOffsets> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let weight = at..at + l.weight_count();
                at = weight.end;
                let bias = l.has_bias.then(|| {
                    let b = at..at + l.fan_out;
                    at = b.end;
                    b
                });
                LayerOffsets { weight, bias }
            })
            .collect()
    }
}

/// Flat parameter vector θ of one task network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    arch: ArchSpec,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn new(arch: ArchSpec, values: Vec<f32>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(shape(
                "param_vector",
                format!("{} values for {} parameters", values.len(), arch.param_count()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: ArchSpec) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every weight and bias of a layer from U[−1/√fan_in, 1/√fan_in].
    UniformFanIn,
    XavierUniform,
    KaimingNormal,
    Orthogonal,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        Self::UniformFanIn,
        Self::XavierUniform,
        Self::KaimingNormal,
        Self::Orthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::UniformFanIn => "uniform-fan-in",
            Self::XavierUniform => "xavier-uniform",
            Self::KaimingNormal => "kaiming-normal",
            Self::Orthogonal => "orthogonal",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-fan-in" | "uniform" | "default" => Ok(Self::UniformFanIn),
            "xavier-uniform" | "xavier" => Ok(Self::XavierUniform),
            "kaiming-normal" | "kaiming" => Ok(Self::KaimingNormal),
            "orthogonal" => Ok(Self::Orthogonal),
            other => Err(invalid(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Draws a fresh parameter vector; deterministic in `seed`.
pub fn init_params(arch: &ArchSpec, scheme: InitScheme, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0f32; arch.param_count()];
    for (layer, off) in arch.layers.iter().zip(arch.offsets()) {
        let (fi, fo) = (layer.fan_in as f64, layer.fan_out as f64);
        let w = &mut values[off.weight.clone()];
        match scheme {
            InitScheme::UniformFanIn => {
                let a = 1.0 / fi.sqrt();
                w.iter_mut().for_each(|x| *x = rng.random_range(-a..=a) as f32);
                if let Some(b) = &off.bias {
                    values[b.clone()]
                        .iter_mut()
                        .for_each(|x| *x = rng.random_range(-a..=a) as f32);
                }
            }
            InitScheme::XavierUniform => {
                let a = (6.0 / (fi + fo)).sqrt();
                w.iter_mut().for_each(|x| *x = rng.random_range(-a..=a) as f32);
            }
            InitScheme::KaimingNormal => {
                let dist = Normal::new(0.0, (2.0 / fi).sqrt()).expect("positive std");
                w.iter_mut().for_each(|x| *x = dist.sample(&mut rng) as f32);
            }
            InitScheme::Orthogonal => {
                let q = orthogonal(layer.fan_out, layer.fan_in, &mut rng);
                w.iter_mut().zip(q).for_each(|(x, v)| *x = v as f32);
            }
        }
    }
    ParamVector::new(arch.clone(), values)
}

/// `[rows, cols]` matrix whose rows (if rows ≤ cols) or columns are orthonormal.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Gram-Schmidt over the vectors of the smaller dimension.
    let (count, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs_arch() -> ArchSpec {
        ArchSpec::mlp(&[2, 16, 4], Activation::Relu).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(blobs_arch().param_count(), 116);
        let grid = ArchSpec::mlp(&[64, 10, 10], Activation::Relu).unwrap();
        assert_eq!(grid.param_count(), 760);
        let offs = blobs_arch().offsets();
        assert_eq!(offs[0].weight, 0..32);
        assert_eq!(offs[0].bias, Some(32..48));
        assert_eq!(offs[1].weight, 48..112);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let bad = ArchSpec::new(vec![
            LayerSpec { fan_in: 2, fan_out: 3, has_bias: true, activation: Activation::Relu },
            LayerSpec { fan_in: 4, fan_out: 1, has_bias: true, activation: Activation::None },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn uniform_fan_in_bounds() {
        let arch = ArchSpec::mlp(&[100, 3], Activation::None).unwrap();
        let p = init_params(&arch, InitScheme::UniformFanIn, 1).unwrap();
        assert!(p.values().iter().all(|v| v.abs() <= 0.1));
        assert!(p.values().iter().any(|v| v.abs() > 0.05));
    }

    #[test]
    fn init_is_deterministic() {
        for s in InitScheme::ALL {
            let a = init_params(&blobs_arch(), s, 42).unwrap();
            let b = init_params(&blobs_arch(), s, 42).unwrap();
            let c = init_params(&blobs_arch(), s, 43).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn orthogonal_weights_are_orthonormal() {
        let arch = ArchSpec::mlp(&[5, 9, 3], Activation::Relu).unwrap();
        let p = init_params(&arch, InitScheme::Orthogonal, 7).unwrap();
        for (layer, off) in arch.layers.iter().zip(arch.offsets()) {
            let w = &p.values()[off.weight];
            let (r, c) = (layer.fan_out, layer.fan_in);
            let small = r.min(c);
            for a in 0..small {
                for b in 0..small {
                    // columns when tall, rows when wide
                    let d: f64 = if r >= c {
                        (0..r).map(|i| w[i * c + a] as f64 * w[i * c + b] as f64).sum()
                    } else {
                        (0..c).map(|j| w[a * c + j] as f64 * w[b * c + j] as f64).sum()
                    };
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-5, "{d} vs {want}");
                }
            }
        }
    }

    #[test]
    fn unknown_scheme_is_an_error() {
        assert!("lecun".parse::<InitScheme>().is_err());
        assert_eq!("kaiming".parse::<InitScheme>().unwrap(), InitScheme::KaimingNormal);
    }
}
