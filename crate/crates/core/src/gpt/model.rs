use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::GptConfig;
use super::encode::encode_scalar;
use super::layout::TokenLayout;
use crate::error::{shape, Result};
use crate::tasks::ArchSpec;
use crate::tensor::{Graph, Scalar, Tensor, Var};

const BLOCK_TENSORS: usize = 12;

/// A validated config together with the token layout it induces.
#[derive(Clone, Debug, PartialEq)]
pub struct GptSpec {
    pub config: GptConfig,
    pub layout: TokenLayout,
}

/// Model inputs for a batch of `rows` samples. Parameter matrices are
/// `[rows, D]` in normalized space; scalars are raw.
pub struct ForwardInputs<'a, T> {
    pub x: &'a [T],
    pub theta: &'a [T],
    pub metric: &'a [f64],
    pub prompt: &'a [f64],
    /// Diffusion step `j ∈ 1..=J` per row.
    pub step: &'a [usize],
}

impl<T> ForwardInputs<'_, T> {
    pub fn rows(&self) -> usize {
        self.metric.len()
    }
}

impl GptSpec {
    pub fn new(config: GptConfig, arch: &ArchSpec) -> Result<Self> {
        let layout = config.layout_for(arch)?;
        Ok(Self { config, layout })
    }

    /// Parameters `D` of the task network.
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn param_tokens(&self) -> usize {
        self.layout.len()
    }

    /// Both parameter streams plus the metric, prompt and step tokens.
    pub fn num_tokens(&self) -> usize {
        2 * self.param_tokens() + 3
    }

    fn enc(&self, token: usize) -> (usize, usize) {
        (2 * token, 2 * token + 1)
    }

    fn pos(&self) -> usize {
        2 * self.num_tokens()
    }

    fn block(&self, layer: usize) -> usize {
        self.pos() + 1 + BLOCK_TENSORS * layer
    }

    fn final_ln(&self) -> usize {
        self.block(self.config.layers)
    }

    fn dec(&self, token: usize) -> (usize, usize) {
        let base = self.final_ln() + 2;
        (base + 2 * token, base + 2 * token + 1)
    }

    /// Input width of token `t`'s encoder.
    fn token_in(&self, t: usize) -> usize {
        let p = self.param_tokens();
        if t < 2 * p {
            self.layout.tokens[t % p].len
        } else {
            2 * self.config.num_freqs
        }
    }

    /// Names and shapes of every weight tensor, in storage order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.config.hidden;
        let mut out = Vec::new();
        for t in 0..self.num_tokens() {
            out.push((format!("encoder.{t}.weight"), vec![self.token_in(t), h]));
            out.push((format!("encoder.{t}.bias"), vec![h]));
        }
        out.push(("positional".into(), vec![self.num_tokens(), h]));
        for l in 0..self.config.layers {
            let b = |n: &str| format!("block.{l}.{n}");
            out.extend([
                (b("ln1.gain"), vec![h]),
                (b("ln1.bias"), vec![h]),
                (b("qkv.weight"), vec![h, 3 * h]),
                (b("qkv.bias"), vec![3 * h]),
                (b("out.weight"), vec![h, h]),
                (b("out.bias"), vec![h]),
                (b("ln2.gain"), vec![h]),
                (b("ln2.bias"), vec![h]),
                (b("fc.weight"), vec![h, 4 * h]),
                (b("fc.bias"), vec![4 * h]),
                (b("proj.weight"), vec![4 * h, h]),
                (b("proj.bias"), vec![h]),
            ]);
        }
        out.push(("final_ln.gain".into(), vec![h]));
        out.push(("final_ln.bias".into(), vec![h]));
        for (k, tok) in self.layout.tokens.iter().enumerate() {
            out.push((format!("decoder.{k}.weight"), vec![h, tok.len]));
            out.push((format!("decoder.{k}.bias"), vec![tok.len]));
        }
        out
    }

    /// Fresh weights: N(0, 0.02²) projections and encoders, unit
    /// layer-norm gains, and zeros everywhere else, including decoders and
    /// positional embeddings, so the model starts as the identity map.
    pub fn init_weights(&self, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        self.weight_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = if name.ends_with("gain") {
                    vec![1.0; n]
                } else if name.ends_with("weight") && !name.starts_with("decoder") {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    vec![0.0; n]
                };
                Tensor::new(dims, data).expect("shape matches data")
            })
            .collect()
    }

    pub fn check_weights<T: Scalar>(&self, weights: &[Tensor<T>]) -> Result<()> {
        let shapes = self.weight_shapes();
        if shapes.len() != weights.len() {
            return Err(shape("gpt", format!("{} weight tensors, expected {}", weights.len(), shapes.len())));
        }
        for ((name, dims), w) in shapes.iter().zip(weights) {
            if w.shape() != dims.as_slice() {
                return Err(shape("gpt", format!("{name} has shape {:?}, expected {dims:?}", w.shape())));
            }
        }
        Ok(())
    }

    /// Records the forward pass and returns the `[rows, D]` prediction
    /// `θ + decode(trunk(tokens))`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, w: &[Var], inp: &ForwardInputs<'_, T>) -> Result<Var> {
        let b = inp.rows();
        let d = self.dim();
        let h = self.config.hidden;
        let p = self.param_tokens();
        let n_tok = self.num_tokens();
        let j_total = self.config.schedule.steps as f64;
        if inp.x.len() != b * d || inp.theta.len() != b * d || inp.prompt.len() != b || inp.step.len() != b {
            return Err(shape("gpt_forward", format!("inputs do not describe {b} rows of width {d}")));
        }
        if b == 0 {
            return Err(shape("gpt_forward", "empty batch"));
        }
        if let Some(&j) = inp.step.iter().find(|&&j| j == 0 || j as f64 > j_total) {
            return Err(crate::error::invalid(format!("diffusion step {j} outside 1..={j_total}")));
        }
        if w.len() != self.weight_shapes().len() {
            return Err(shape("gpt_forward", "weight count does not match spec"));
        }

        let mut encoded = Vec::with_capacity(n_tok);
        for t in 0..n_tok {
            let input: Vec<T> = if t < 2 * p {
                let src = if t < p { inp.theta } else { inp.x };
                let tok = &self.layout.tokens[t % p];
                (0..b)
                    .flat_map(|r| src[r * d + tok.offset..r * d + tok.offset + tok.len].iter().copied())
                    .collect()
            } else {
                let (l, e) = (self.config.num_freqs, self.config.max_freq_exp);
                let scale = self.config.metric_scale;
                (0..b)
                    .flat_map(|r| {
                        let v = match t - 2 * p {
                            0 => inp.metric[r] * scale,
                            1 => inp.prompt[r] * scale,
                            _ => inp.step[r] as f64 / j_total,
                        };
                        encode_scalar(v, l, e).into_iter().map(T::from_f64)
                    })
                    .collect()
            };
            let x = g.constant(Tensor::matrix(b, self.token_in(t), input)?);
            let (ew, eb) = self.enc(t);
            encoded.push(g.linear(x, w[ew], w[eb])?);
        }
        let seq = g.concat_cols(&encoded)?;
        let seq = g.add_bias(seq, w[self.pos()])?;
        let mut x = g.reshape(seq, &[b * n_tok, h])?;

        for l in 0..self.config.layers {
            let k = self.block(l);
            let a = g.layer_norm(x, w[k], w[k + 1])?;
            let qkv = g.linear(a, w[k + 2], w[k + 3])?;
            let att = g.attention(qkv, b, n_tok, self.config.heads)?;
            let att = g.linear(att, w[k + 4], w[k + 5])?;
            x = g.add(x, att)?;
            let m = g.layer_norm(x, w[k + 6], w[k + 7])?;
            let m = g.linear(m, w[k + 8], w[k + 9])?;
            let m = g.gelu(m);
            let m = g.linear(m, w[k + 10], w[k + 11])?;
            x = g.add(x, m)?;
        }
        let f = self.final_ln();
        let x = g.layer_norm(x, w[f], w[f + 1])?;
        let x = g.reshape(x, &[b, n_tok * h])?;

        // only the noised-future stream is decoded
        let mut parts = Vec::with_capacity(p);
        for k in 0..p {
            let hk = g.slice_cols(x, (p + k) * h, h)?;
            let (dw, db) = self.dec(k);
            parts.push(g.linear(hk, w[dw], w[db])?);
        }
        let update = g.concat_cols(&parts)?;
        let theta = g.constant(Tensor::matrix(b, d, inp.theta.to_vec())?);
        g.add(theta, update)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::Activation;

    pub(crate) fn tiny_spec() -> GptSpec {
        let arch = ArchSpec::mlp(&[2, 3, 2], Activation::Relu).unwrap();
        let cfg = GptConfig {
            hidden: 8,
            layers: 1,
            heads: 1,
            num_freqs: 3,
            max_freq_exp: 4.0,
            schedule: crate::diffusion::ScheduleConfig::scaled(10),
            ..Default::default()
        };
        GptSpec::new(cfg, &arch).unwrap()
    }

    #[test]
    fn weight_bookkeeping() {
        let s = tiny_spec();
        // 4 param tokens per stream, 3 scalar tokens
        assert_eq!(s.num_tokens(), 11);
        let shapes = s.weight_shapes();
        assert_eq!(shapes[s.pos()].0, "positional");
        assert_eq!(shapes[s.block(0)].0, "block.0.ln1.gain");
        assert_eq!(shapes[s.final_ln()].0, "final_ln.gain");
        assert_eq!(shapes[s.dec(3).1].1, vec![2]);
        assert_eq!(shapes.len(), s.dec(3).1 + 1);
    }
}
