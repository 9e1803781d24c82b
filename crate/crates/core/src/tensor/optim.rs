use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{invalid, shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

/// SGD with heavy-ball momentum; weight decay is folded into the gradient.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// v ← μv + (g + wd·θ); θ ← θ − lr·v
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        init_buffers(&mut self.velocity, params)?;
        let (lr, mu, wd) = (T::from_f64(self.lr), T::from_f64(self.momentum), T::from_f64(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((th, &gg), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + (gg + wd * *th);
                *th -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε), with `t` incremented first.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        init_buffers(&mut self.m, params)?;
        init_buffers(&mut self.v, params)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let lr = T::from_f64(self.lr);
        let decay = T::from_f64(self.lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((th, &gg), mm), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mm = b1 * *mm + one_b1 * gg;
                *vv = b2 * *vv + one_b2 * gg * gg;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *th = *th - decay * *th - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer<T: Scalar> {
    Sgd(SgdMomentum<T>),
    AdamW(AdamW<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd(_) => OptimizerKind::SgdMomentum,
            Self::AdamW(_) => OptimizerKind::AdamW,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Sgd(o) => o.lr = lr,
            Self::AdamW(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(params, grads),
            Self::AdamW(o) => o.step(params, grads),
        }
    }
}

fn check_shapes<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape("optimizer", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

fn init_buffers<T: Scalar>(buf: &mut Vec<Vec<T>>, params: &[Tensor<T>]) -> Result<()> {
    if buf.is_empty() {
        *buf = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    } else if buf.len() != params.len() || buf.iter().zip(params).any(|(b, p)| b.len() != p.len()) {
        return Err(shape("optimizer", "parameter set changed between steps"));
    }
    Ok(())
}

/// ema ← decay·ema + (1 − decay)·raw
pub fn ema_update<T: Scalar>(ema: &mut [Tensor<T>], raw: &[Tensor<T>], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(invalid(format!("EMA decay {decay} outside [0, 1)")));
    }
    check_shapes(ema, raw)?;
    let (d, r) = (T::from_f64(decay), T::from_f64(1.0 - decay));
    for (e, w) in ema.iter_mut().zip(raw) {
        for (a, &b) in e.data_mut().iter_mut().zip(w.data()) {
            *a = d * *a + r * b;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half-period cosine down to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(invalid(format!("warmup {warmup_steps} exceeds total {total_steps}")));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(invalid("max_norm must be positive"));
    }
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}
