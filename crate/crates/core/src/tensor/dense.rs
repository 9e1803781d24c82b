use super::Scalar;
use crate::error::{shape, Result};
use crate::par;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) && !shape.is_empty() {
            return Err(shape_err(&shape, data.len()));
        }
        if n != data.len() {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// (rows, cols) of a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err(&shape, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

fn shape_err(dims: &[usize], len: usize) -> crate::Error {
    shape("tensor", format!("shape {dims:?} does not hold {len} elements"))
}

const ROW_BLOCK: usize = 64;

/// `c (+)= op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// `a_t`/`b_t` mean the operand is stored transposed. Output rows are
/// split into fixed-size blocks that may be computed in parallel; each
/// output element is produced by one kernel call either way.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let run = |row0: usize, rows: usize, c: &mut [T]| {
        let off = if a_t { row0 } else { row0 * k };
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            &a[off..],
            rsa,
            csa,
            b,
            rsb,
            csb,
            beta,
            c,
            n as isize,
            1,
        );
    };
    if m > ROW_BLOCK && m * k * n >= 1 << 18 && par::is_parallel() {
        par::for_each_chunk_mut(c, ROW_BLOCK * n, |ci, chunk| {
            run(ci * ROW_BLOCK, chunk.len() / n, chunk)
        });
    } else {
        run(0, m, c);
    }
}

/// Plain product of two row-major matrices.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2().ok_or_else(|| shape("matmul", "lhs not 2-D"))?;
    let (k2, n) = b.dims2().ok_or_else(|| shape("matmul", "rhs not 2-D"))?;
    if k != k2 {
        return Err(shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(a.data(), false, b.data(), false, m, k, n, &mut out, false);
    Tensor::new(vec![m, n], out)
}
