use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{shape, Result};
use crate::tasks::{ArchSpec, ParamVector};

/// Hidden-unit relabeling: one permutation of output units per hidden
/// layer. The output layer is never permuted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    pub layers: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn identity(arch: &ArchSpec) -> Self {
        let n = arch.layers.len();
        Self {
            layers: arch.layers[..n - 1].iter().map(|l| (0..l.fan_out).collect()).collect(),
        }
    }

    pub fn sample(arch: &ArchSpec, rng: &mut impl Rng) -> Self {
        let mut p = Self::identity(arch);
        for layer in &mut p.layers {
            layer.shuffle(rng);
        }
        p
    }

    pub fn inverse(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    for (i, &j) in p.iter().enumerate() {
                        inv[j] = i;
                    }
                    inv
                })
                .collect(),
        }
    }

    fn check(&self, arch: &ArchSpec) -> Result<()> {
        let ok = self.layers.len() + 1 == arch.layers.len()
            && self.layers.iter().zip(&arch.layers).all(|(p, l)| p.len() == l.fan_out);
        if ok {
            Ok(())
        } else {
            Err(shape("permutation", "permutation does not match architecture"))
        }
    }

    /// New unit `i` of hidden layer `l` is old unit `perm[l][i]`: rows of
    /// `W_l`, entries of `b_l` and columns of `W_{l+1}` move together.
    pub fn apply_slice(&self, arch: &ArchSpec, theta: &[f32]) -> Result<Vec<f32>> {
        self.check(arch)?;
        if theta.len() != arch.param_count() {
            return Err(shape("permutation", "vector length does not match architecture"));
        }
        let mut out = theta.to_vec();
        let offs = arch.offsets();
        for (l, perm) in self.layers.iter().enumerate() {
            let fan_in = arch.layers[l].fan_in;
            let w = offs[l].weight.start;
            for (i, &src) in perm.iter().enumerate() {
                out[w + i * fan_in..w + (i + 1) * fan_in]
                    .copy_from_slice(&theta[w + src * fan_in..w + (src + 1) * fan_in]);
                if let Some(b) = &offs[l].bias {
                    out[b.start + i] = theta[b.start + src];
                }
            }
        }
        // columns of the following layers read the permuted units; work from
        // the row-permuted copy so both permutations compose
        let rows_done = out.clone();
        for (l, perm) in self.layers.iter().enumerate() {
            let next = &arch.layers[l + 1];
            let w = offs[l + 1].weight.start;
            for r in 0..next.fan_out {
                let row = w + r * next.fan_in;
                for (i, &src) in perm.iter().enumerate() {
                    out[row + i] = rows_done[row + src];
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, theta: &ParamVector) -> Result<ParamVector> {
        let v = self.apply_slice(theta.arch(), theta.values())?;
        ParamVector::new(theta.arch().clone(), v)
    }
}
