//! Dense row-major tensors and the loss functions built on them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor: a shape and a row-major data buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows of a matrix (or 1 for a vector treated as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row length of a matrix or vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_l2(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// One row of a 2-D tensor as a vector.
    pub fn row(&self, i: usize) -> Result<Self> {
        if self.shape.len() != 2 || i >= self.shape[0] {
            return Err(Error::Index {
                what: "tensor row",
                index: i,
                len: self.rows(),
            });
        }
        let n = self.shape[1];
        Ok(Tensor {
            shape: vec![n],
            data: self.data[i * n..(i + 1) * n].to_vec(),
        })
    }
}

/// Above this many multiply-adds, matmul spreads output rows across threads.
/// Each output element is still produced by one sequential inner loop, so the
/// result is bitwise identical for any thread count.
const PAR_FLOP_THRESHOLD: usize = 1 << 17;

/// Standard matrix product `a[m,k] * b[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut data = vec![T::zero(); m * n];
    let body = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        data.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// `a[m,k] * b[n,k]^T`, without materializing the transpose.
pub fn matmul_trans_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape {
            op: "matmul_trans_b",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut data = vec![T::zero(); m * n];
    let body = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            *o = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        data.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        data.chunks_mut(n).enumerate().for_each(body);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

/// Max-subtracted softmax of a slice, written into `out`.
pub(crate) fn softmax_slice<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Softmax along `axis` (0 or 1) of a vector or matrix. Outputs are positive
/// and sum to 1 along the axis; the max is subtracted first so large inputs
/// cannot overflow.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    match x.shape.len() {
        1 => {
            if axis != 0 {
                return Err(Error::Index {
                    what: "softmax axis",
                    index: axis,
                    len: 1,
                });
            }
            let mut out = vec![T::zero(); x.data.len()];
            softmax_slice(&x.data, &mut out);
            Tensor::from_vec(&x.shape, out)
        }
        2 => {
            let (m, n) = (x.shape[0], x.shape[1]);
            let mut out = vec![T::zero(); m * n];
            match axis {
                1 => {
                    for i in 0..m {
                        softmax_slice(&x.data[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
                    }
                }
                0 => {
                    let mut col = vec![T::zero(); m];
                    let mut soft = vec![T::zero(); m];
                    for j in 0..n {
                        for i in 0..m {
                            col[i] = x.data[i * n + j];
                        }
                        softmax_slice(&col, &mut soft);
                        for i in 0..m {
                            out[i * n + j] = soft[i];
                        }
                    }
                }
                _ => {
                    return Err(Error::Index {
                        what: "softmax axis",
                        index: axis,
                        len: 2,
                    })
                }
            }
            Tensor::from_vec(&x.shape, out)
        }
        _ => Err(Error::Shape {
            op: "softmax",
            lhs: x.shape.clone(),
            rhs: vec![],
        }),
    }
}

/// `log(sum(exp(x)))` with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let max = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum = x
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Cross entropy `-log softmax(logits)[label]` for a single logit vector.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<T> {
    if label >= logits.numel() {
        return Err(Error::Index {
            what: "cross_entropy label",
            index: label,
            len: logits.numel(),
        });
    }
    Ok(log_sum_exp(&logits.data) - logits.data[label])
}
