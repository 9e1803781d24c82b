use super::arch::{Activation, ArchSpec, ParamVector};
use crate::error::{shape, Result};
use crate::tensor::{matmul_into, selu, Graph, Tensor, Var};

fn activate(x: &mut [f32], act: Activation) {
    match act {
        Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Selu => x.iter_mut().for_each(|v| *v = selu(*v)),
        Activation::None => {}
    }
}

/// Batched forward pass: `inputs` is `[n, input_dim]` row-major; returns
/// `[n, output_dim]` logits or action scores.
pub fn forward_task(params: &ParamVector, inputs: &[f32]) -> Result<Vec<f32>> {
    let arch = params.arch();
    let din = arch.input_dim();
    if !inputs.len().is_multiple_of(din) {
        return Err(shape(
            "forward_task",
            format!("{} inputs not a multiple of width {din}", inputs.len()),
        ));
    }
    let n = inputs.len() / din;
    let mut x = inputs.to_vec();
    for (layer, off) in arch.layers.iter().zip(arch.offsets()) {
        let w = &params.values()[off.weight];
        let mut y = vec![0.0f32; n * layer.fan_out];
        if let Some(b) = off.bias {
            let b = &params.values()[b];
            for row in y.chunks_mut(layer.fan_out) {
                row.copy_from_slice(b);
            }
        }
        matmul_into(&x, false, w, true, n, layer.fan_in, layer.fan_out, &mut y, true);
        activate(&mut y, layer.activation);
        x = y;
    }
    Ok(x)
}

/// Allocation-free single-row forward pass for environment rollouts.
pub struct RowForward {
    a: Vec<f32>,
    b: Vec<f32>,
}

impl RowForward {
    pub fn new(arch: &ArchSpec) -> Self {
        let widest = arch
            .layers
            .iter()
            .map(|l| l.fan_in.max(l.fan_out))
            .max()
            .unwrap_or(0);
        Self {
            a: vec![0.0; widest],
            b: vec![0.0; widest],
        }
    }

    pub fn run<'s>(&'s mut self, params: &ParamVector, input: &[f32]) -> &'s [f32] {
        let arch = params.arch();
        let v = params.values();
        self.a[..input.len()].copy_from_slice(input);
        let mut width = input.len();
        for (layer, off) in arch.layers.iter().zip(arch.offsets()) {
            let w = &v[off.weight.clone()];
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut s: f32 = off.bias.as_ref().map_or(0.0, |b| v[b.start + o]);
                for (wi, xi) in row.iter().zip(&self.a[..width]) {
                    s += wi * xi;
                }
                self.b[o] = s;
            }
            activate(&mut self.b[..layer.fan_out], layer.activation);
            std::mem::swap(&mut self.a, &mut self.b);
            width = layer.fan_out;
        }
        &self.a[..width]
    }
}

/// Parameter leaves of one network on a tape: per layer (weight, bias).
pub struct MlpVars {
    pub layers: Vec<(Var, Option<Var>)>,
}

impl MlpVars {
    /// Splits `params` into per-layer leaves on `g`.
    pub fn attach(g: &mut Graph<f32>, params: &ParamVector) -> Result<Self> {
        let arch = params.arch();
        let v = params.values();
        let layers = arch
            .layers
            .iter()
            .zip(arch.offsets())
            .map(|(l, off)| {
                let w = g.param(Tensor::matrix(l.fan_out, l.fan_in, v[off.weight].to_vec())?);
                let b = off.bias.map(|b| g.param(Tensor::from_vec(v[b].to_vec())));
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Recorded forward pass.
    pub fn forward(&self, g: &mut Graph<f32>, arch: &ArchSpec, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, &(w, b)) in arch.layers.iter().zip(&self.layers) {
            h = g.matmul_t(h, w)?;
            if let Some(b) = b {
                h = g.add_bias(h, b)?;
            }
            h = match layer.activation {
                Activation::Relu => g.relu(h),
                Activation::Selu => g.selu(h),
                Activation::None => h,
            };
        }
        Ok(h)
    }

    /// Gradients flattened back into parameter-vector order.
    pub fn flat_grad(&self, g: &Graph<f32>, grads: &crate::tensor::Gradients<f32>) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            out.extend_from_slice(grads.get(w, g)?.data());
            if let Some(b) = b {
                out.extend_from_slice(grads.get(b, g)?.data());
            }
        }
        Ok(out)
    }
}
