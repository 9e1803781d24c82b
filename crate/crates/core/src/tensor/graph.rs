use super::dense::matmul_into;
use super::{Scalar, Tensor};
use crate::error::{shape, Error, Result};
use crate::par;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Selu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the tape is acyclic by construction.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| shape(op, format!("expected 1-D or 2-D input, got {:?}", t.shape())))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, n) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul_t")?;
        let (n, k2) = rows_cols(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Adds a row vector `b` (length = columns of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.value(x), "add_bias")?;
        if self.value(b).len() != cols {
            return Err(shape(
                "add_bias",
                format!("bias {:?} for {} columns", self.value(b).shape(), cols),
            ));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias(x, b), rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(selu);
        let rg = self.rg(x);
        self.push(t, Op::Selu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut data = src.data().to_vec();
        par::for_each_chunk_mut(&mut data, 1 << 14, |_, c| {
            c.iter_mut().for_each(|v| *v = gelu(*v))
        });
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(x), "layer_norm")?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(shape("layer_norm", "gain/bias length must equal columns"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let inv_n = T::from_f64(1.0 / cols as f64);
        let eps = T::from_f64(LN_EPS);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *h = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(cols) {
            for ((o, &gg), &bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.value(x), "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Full (unmasked) multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[batch * seq, 3 * hidden]` holding queries, keys and values
    /// side by side; rows are batch-major. Returns `[batch * seq, hidden]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(qkv), "attention")?;
        if rows != batch * seq || cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(shape(
                "attention",
                format!("qkv [{rows},{cols}] for batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let hidden = cols / 3;
        let dh = hidden / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * hidden];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let per_b_out = seq * hidden;
        let per_b_p = heads * seq * seq;
        // Each batch element is independent; process them as parallel chunks.
        let results: Vec<(Vec<T>, Vec<T>)> = par::map(batch, |bi| {
            let mut o = vec![T::zero(); per_b_out];
            let mut p = vec![T::zero(); per_b_p];
            let base = bi * seq * cols;
            for h in 0..heads {
                let pm = &mut p[h * seq * seq..(h + 1) * seq * seq];
                for i in 0..seq {
                    let q = &src[base + i * cols + h * dh..base + i * cols + (h + 1) * dh];
                    let prow = &mut pm[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let kk = &src[base + j * cols + hidden + h * dh..][..dh];
                        prow[j] = dot(q, kk) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut o[i * hidden + h * dh..i * hidden + (h + 1) * dh];
                    for j in 0..seq {
                        let v = &src[base + j * cols + 2 * hidden + h * dh..][..dh];
                        let w = prow[j];
                        for (oo, &vv) in orow.iter_mut().zip(v) {
                            *oo += w * vv;
                        }
                    }
                }
            }
            (o, p)
        });
        for (bi, (o, p)) in results.into_iter().enumerate() {
            out[bi * per_b_out..(bi + 1) * per_b_out].copy_from_slice(&o);
            probs[bi * per_b_p..(bi + 1) * per_b_p].copy_from_slice(&p);
        }
        let t = Tensor::new(vec![rows, hidden], out)?;
        let rg = self.rg(qkv);
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() {
            return Err(shape("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = T::from_f64(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(pred, target), rg))
    }

    /// Mean cross-entropy of row logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.ce(logits, labels, None)
    }

    /// `(1/N) Σ w_i · CE_i`; with per-sample advantages as weights this is
    /// the policy-gradient surrogate.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        if weights.len() != labels.len() {
            return Err(shape("cross_entropy", "weights and labels differ in length"));
        }
        self.ce(logits, labels, Some(weights.to_vec()))
    }

    fn ce(&mut self, logits: Var, labels: &[usize], weights: Option<Vec<T>>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(logits), "cross_entropy")?;
        if labels.len() != rows {
            return Err(shape("cross_entropy", format!("{} labels for {} rows", labels.len(), rows)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(shape("cross_entropy", format!("label {bad} >= {cols} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            softmax_in_place(row);
            let nll = -row[labels[r]].max(T::min_positive_value()).ln();
            let w = weights.as_ref().map_or(T::one(), |w| w[r]);
            total += w * nll;
        }
        let loss = total / T::from_f64(rows as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape("concat_cols", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| rows_cols(self.value(p), "concat_cols"))
            .collect::<Result<_>>()?;
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(shape("concat_cols", "row counts differ"));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &(_, c)) in parts.iter().zip(&dims) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.value(x), "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(shape("slice_cols", format!("{start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        if let Some(i) = self.nodes[..=output.0].iter().position(|n| !n.value.is_finite()) {
            return Err(Error::NonFinite(format!("graph node {i}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.dims2().expect("checked");
                    let n = bv.dims2().expect("checked").1;
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        matmul_into(&g, false, bv.data(), true, m, n, k, &mut da, false);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        matmul_into(av.data(), true, &g, false, k, m, n, &mut db, false);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.dims2().expect("checked");
                    let n = bv.dims2().expect("checked").0;
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        matmul_into(&g, false, bv.data(), false, m, n, k, &mut da, false);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); n * k];
                        matmul_into(&g, true, av.data(), false, n, m, k, &mut db, false);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) && self.rg(*b) {
                        accumulate(&mut grads, *a, g.clone());
                        accumulate(&mut grads, *b, g);
                    } else if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    } else {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|&x| -x).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if self.rg(*b) {
                        let d = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * *c).collect());
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let cols = self.value(*b).len();
                        let mut db = vec![T::zero(); cols];
                        for row in g.chunks(cols) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Relu(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gg, &v)| if v > T::zero() { gg } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Selu(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gg, &v)| gg * selu_grad(v))
                        .collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let mut d = g;
                    let xs = self.value(*x).data();
                    par::for_each_chunk_mut(&mut d, 1 << 14, |ci, c| {
                        let off = ci << 14;
                        for (j, gg) in c.iter_mut().enumerate() {
                            *gg *= gelu_grad(xs[off + j]);
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let cols = self.value(*gain).len();
                    let gv = self.value(*gain).data();
                    if self.rg(*gain) || self.rg(*bias) {
                        let mut dg = vec![T::zero(); cols];
                        let mut db = vec![T::zero(); cols];
                        for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for c in 0..cols {
                                dg[c] += grow[c] * hrow[c];
                                db[c] += grow[c];
                            }
                        }
                        if self.rg(*gain) {
                            accumulate(&mut grads, *gain, dg);
                        }
                        if self.rg(*bias) {
                            accumulate(&mut grads, *bias, db);
                        }
                    }
                    if self.rg(*x) {
                        let inv_n = T::from_f64(1.0 / cols as f64);
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, ((grow, hrow), drow)) in g
                            .chunks(cols)
                            .zip(xhat.chunks(cols))
                            .zip(dx.chunks_mut(cols))
                            .enumerate()
                        {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in 0..cols {
                                let dh = grow[c] * gv[c];
                                s1 += dh;
                                s2 += dh * hrow[c];
                            }
                            s1 *= inv_n;
                            s2 *= inv_n;
                            for c in 0..cols {
                                let dh = grow[c] * gv[c];
                                drow[c] = rstd[r] * (dh - s1 - hrow[c] * s2);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let cols = node.value.dims2().expect("2-D").1;
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            drow[c] = yrow[c] * (grow[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention {
                    qkv,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let d = attention_backward(self.value(*qkv).data(), &g, probs, *batch, *seq, *heads);
                    accumulate(&mut grads, *qkv, d);
                }
                Op::Mse(p, t) => {
                    let pv = self.value(*p).data();
                    let tv = self.value(*t).data();
                    let c = g[0] * T::from_f64(2.0 / pv.len() as f64);
                    let d: Vec<T> = pv.iter().zip(tv).map(|(&a, &b)| c * (a - b)).collect();
                    if self.rg(*t) {
                        accumulate(&mut grads, *t, d.iter().map(|&x| -x).collect());
                    }
                    if self.rg(*p) {
                        accumulate(&mut grads, *p, d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let rows = labels.len();
                    let cols = probs.len() / rows;
                    let c = g[0] / T::from_f64(rows as f64);
                    let mut d = probs.clone();
                    for (r, row) in d.chunks_mut(cols).enumerate() {
                        row[labels[r]] -= T::one();
                        let w = weights.as_ref().map_or(T::one(), |w| w[r]) * c;
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2().expect("2-D");
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).dims2().expect("2-D").1;
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                            }
                            accumulate(&mut grads, p, d);
                        }
                        off += c;
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).dims2().expect("2-D");
                    let len = node.value.dims2().expect("2-D").1;
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
        let is_param = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            is_param,
        })
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    is_param: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a differentiable leaf. Leaves the output does not depend
    /// on get zeros of the leaf's shape.
    pub fn get(&self, leaf: Var, shape_of: &Graph<T>) -> Result<Tensor<T>> {
        if !self.is_param.get(leaf.0).copied().unwrap_or(false) {
            return Err(Error::DetachedLeaf);
        }
        Ok(match &self.grads[leaf.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape_of.value(leaf).shape()),
        })
    }

    /// Moves the gradient out; same rules as [`Gradients::get`].
    pub fn take(&mut self, leaf: Var, shape_of: &Graph<T>) -> Result<Tensor<T>> {
        if !self.is_param.get(leaf.0).copied().unwrap_or(false) {
            return Err(Error::DetachedLeaf);
        }
        Ok(self.grads[leaf.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape_of.value(leaf).shape())))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn selu<T: Scalar>(x: T) -> T {
    let l = T::from_f64(SELU_LAMBDA);
    if x > T::zero() {
        l * x
    } else {
        l * T::from_f64(SELU_ALPHA) * (x.exp() - T::one())
    }
}

fn selu_grad<T: Scalar>(x: T) -> T {
    let l = T::from_f64(SELU_LAMBDA);
    if x > T::zero() {
        l
    } else {
        l * T::from_f64(SELU_ALPHA) * x.exp()
    }
}

/// `σ(2u)` with `u = c(x + kx³)`; equals `(1 + tanh u)/2` but needs one `exp`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(0.044715) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(0.044715);
    let s = gelu_gate(x);
    let two = T::from_f64(2.0);
    s + two * x * s * (T::one() - s) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

fn attention_backward<T: Scalar>(
    src: &[T],
    g: &[T],
    probs: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
) -> Vec<T> {
    let cols = src.len() / (batch * seq);
    let hidden = cols / 3;
    let dh = hidden / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let per_b = seq * cols;
    let parts: Vec<Vec<T>> = par::map(batch, |bi| {
        let mut d = vec![T::zero(); per_b];
        let s = &src[bi * per_b..(bi + 1) * per_b];
        let go = &g[bi * seq * hidden..(bi + 1) * seq * hidden];
        let mut dp = vec![T::zero(); seq];
        for h in 0..heads {
            let pm = &probs[(bi * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let gi = &go[i * hidden + h * dh..][..dh];
                let prow = &pm[i * seq..(i + 1) * seq];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                for j in 0..seq {
                    let v = &s[j * cols + 2 * hidden + h * dh..][..dh];
                    dp[j] = dot(gi, v);
                    let dv = &mut d[j * cols + 2 * hidden + h * dh..][..dh];
                    for (a, &b) in dv.iter_mut().zip(gi) {
                        *a += prow[j] * b;
                    }
                }
                let sdot: T = prow.iter().zip(&dp).map(|(&p, &q)| p * q).sum();
                // dS = P ⊙ (dP − Σ dP·P); dQ = dS·K·scale; dK = dSᵀ·Q·scale
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - sdot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kv = s[j * cols + hidden + h * dh + c];
                        let qv = s[i * cols + h * dh + c];
                        d[i * cols + h * dh + c] += ds * kv;
                        d[j * cols + hidden + h * dh + c] += ds * qv;
                    }
                }
            }
        }
        d
    });
    parts.concat()
}
