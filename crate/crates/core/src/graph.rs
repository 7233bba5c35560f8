//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape of eagerly evaluated tensor nodes. Operations push a
//! node holding the result value plus the op record used for the backward
//! sweep. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients for every node that needs one.
//!
//! The op set is exactly what the patch encoder, the contrastive loss, and
//! the attention classifier need; it is not a general kernel zoo.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, matmul, matmul_trans_b, softmax_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddBiasRow(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    MatmulTransB(NodeId, NodeId),
    RowDot(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxVec(NodeId),
    L2NormRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// 3x3 stride-1 convolution with zero padding 1; bias included.
    /// `cols` caches the unfolded input for the weight gradient.
    Conv2dSame {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        cols: Tensor<T>,
    },
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients keyed by node id after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf; gradients will be accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf; backward treats it as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, self.needs(a), Op::Scale(a, c))
    }

    /// `x[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if xv.shape().len() != 2 || bv.shape() != [n] {
            return Err(Error::Shape {
                op: "add_bias_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let m = xv.shape()[0];
        let mut out = xv.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv.data()[j];
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(v, self.needs(x) || self.needs(bias), Op::AddBiasRow(x, bias)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Matmul(a, b)))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_trans_b(self.value(a), self.value(b))?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::MatmulTransB(a, b)))
    }

    /// Row-wise dot product of two `[m,n]` tensors, giving `[m,1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() || av.shape().len() != 2 {
            return Err(Error::Shape {
                op: "row_dot",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            out[i] = av.data()[i * n..(i + 1) * n]
                .iter()
                .zip(&bv.data()[i * n..(i + 1) * n])
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
        let v = Tensor::from_vec(&[m, 1], out)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::RowDot(a, b)))
    }

    /// Concatenate `[m,p]` and `[m,q]` into `[m,p+q]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv.data()[i * q..(i + 1) * q]);
        }
        let v = Tensor::from_vec(&[m, p + q], out)?;
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::ConcatCols(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, self.needs(a), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, self.needs(a), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.value(a).map(|x| one / (one + (-x).exp()));
        self.push(v, self.needs(a), Op::Sigmoid(a))
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax_vec(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 1 {
            return Err(Error::Shape {
                op: "softmax_vec",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut out = vec![T::zero(); av.numel()];
        softmax_slice(av.data(), &mut out);
        let v = Tensor::from_vec(&[av.numel()], out)?;
        Ok(self.push(v, self.needs(a), Op::SoftmaxVec(a)))
    }

    /// Scale each row of `[m,n]` to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Shape {
                op: "l2_normalize_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = av.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row
                .iter()
                .fold(T::zero(), |acc, &x| acc + x * x)
                .sqrt();
            if norm == T::zero() {
                return Err(Error::Numeric(format!(
                    "l2_normalize_rows: zero-norm row {i}"
                )));
            }
            for x in row.iter_mut() {
                *x = *x / norm;
            }
        }
        let v = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(v, self.needs(a), Op::L2NormRows(a)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, self.needs(a), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, self.needs(a), Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, self.needs(a), Op::Reshape(a)))
    }

    /// Mean over rows of `-log softmax(logits[i])[labels[i]]`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (m, n) = (lv.shape()[0], lv.shape()[1]);
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(Error::Index {
                    what: "cross_entropy label",
                    index: label,
                    len: n,
                });
            }
            let row = &lv.data()[i * n..(i + 1) * n];
            total += log_sum_exp(row) - row[label];
        }
        let v = Tensor::scalar(total / T::from_f64(m as f64));
        Ok(self.push(
            v,
            self.needs(logits),
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// 3x3 same-padding convolution over `x[b,c,h,w]` with weights
    /// `w[c*9, k]` and bias `b[k]`, producing `[b,k,h,w]`.
    pub fn conv2d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if xv.shape().len() != 4 {
            return Err(Error::Shape {
                op: "conv2d_same",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (bs, c, h, wd) = (
            xv.shape()[0],
            xv.shape()[1],
            xv.shape()[2],
            xv.shape()[3],
        );
        let k = bv.numel();
        if wv.shape() != [c * 9, k] {
            return Err(Error::Shape {
                op: "conv2d_same",
                lhs: wv.shape().to_vec(),
                rhs: vec![c * 9, k],
            });
        }
        let cols = im2col_3x3(xv, bs, c, h, wd);
        let out_mat = matmul(&cols, wv)?;
        // permute [b*h*w, k] rows into [b,k,h,w] and add the bias
        let hw = h * wd;
        let mut out = vec![T::zero(); bs * k * hw];
        for bi in 0..bs {
            for p in 0..hw {
                let row = &out_mat.data()[(bi * hw + p) * k..(bi * hw + p) * k + k];
                for (ki, &v) in row.iter().enumerate() {
                    out[(bi * k + ki) * hw + p] = v + bv.data()[ki];
                }
            }
        }
        let v = Tensor::from_vec(&[bs, k, h, wd], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(v, needs, Op::Conv2dSame { x, w, b, cols }))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 4 || av.shape()[2] % 2 != 0 || av.shape()[3] % 2 != 0 {
            return Err(Error::Shape {
                op: "avg_pool2",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (bs, c, h, w) = (
            av.shape()[0],
            av.shape()[1],
            av.shape()[2],
            av.shape()[3],
        );
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::zero(); bs * c * oh * ow];
        for img in 0..bs * c {
            let src = &av.data()[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * quarter;
                }
            }
        }
        let v = Tensor::from_vec(&[bs, c, oh, ow], out)?;
        Ok(self.push(v, self.needs(a), Op::AvgPool2(a)))
    }

    /// Mean over the spatial dims of `[b,c,h,w]`, giving `[b,c]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (bs, c, h, w) = (
            av.shape()[0],
            av.shape()[1],
            av.shape()[2],
            av.shape()[3],
        );
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); bs * c];
        for (i, o) in out.iter_mut().enumerate() {
            *o = av.data()[i * h * w..(i + 1) * h * w]
                .iter()
                .fold(T::zero(), |acc, &x| acc + x)
                * inv;
        }
        let v = Tensor::from_vec(&[bs, c], out)?;
        Ok(self.push(v, self.needs(a), Op::GlobalAvgPool(a)))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients for
    /// every node on a path to a trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss: {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(lv.shape(), vec![T::one()]).expect("scalar grad"));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_backward(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gy.mul(self.value(*b)).expect("mul shapes"));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gy.mul(self.value(*a)).expect("mul shapes"));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.scale(*c)),
            Op::AddBiasRow(x, bias) => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, gy.clone());
                }
                if self.needs(*bias) {
                    let (m, n) = (gy.shape()[0], gy.shape()[1]);
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gy.data()[i * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_vec(&[n], db).expect("bias grad"));
                }
            }
            Op::Matmul(a, b) => {
                // y = a @ b;  da = gy @ b^T;   db = a^T @ gy
                if self.needs(*a) {
                    let da = matmul_trans_b(gy, self.value(*b)).expect("matmul da");
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = matmul_trans_a(self.value(*a), gy);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatmulTransB(a, b) => {
                // y = a @ b^T;  da = gy @ b;   db = gy^T @ a
                if self.needs(*a) {
                    let da = matmul(gy, self.value(*b)).expect("matmul_trans_b da");
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = matmul_trans_a(gy, self.value(*a));
                    self.accumulate(grads, *b, db);
                }
            }
            Op::RowDot(a, b) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                for (target, source) in [(*a, *b), (*b, *a)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let sv = self.value(source);
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..m {
                        let g = gy.data()[i];
                        for j in 0..n {
                            d[i * n + j] = g * sv.data()[i * n + j];
                        }
                    }
                    self.accumulate(
                        grads,
                        target,
                        Tensor::from_vec(&[m, n], d).expect("row_dot grad"),
                    );
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let q = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(m * p);
                    for i in 0..m {
                        d.extend_from_slice(&gy.data()[i * (p + q)..i * (p + q) + p]);
                    }
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::from_vec(&[m, p], d).expect("concat grad"),
                    );
                }
                if self.needs(*b) {
                    let mut d = Vec::with_capacity(m * q);
                    for i in 0..m {
                        d.extend_from_slice(&gy.data()[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::from_vec(&[m, q], d).expect("concat grad"),
                    );
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = Tensor::from_vec(
                    av.shape(),
                    av.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )
                .expect("relu grad");
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[idx].value;
                let d = Tensor::from_vec(
                    yv.shape(),
                    yv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&y, &g)| g * (T::one() - y * y))
                        .collect(),
                )
                .expect("tanh grad");
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[idx].value;
                let d = Tensor::from_vec(
                    yv.shape(),
                    yv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                )
                .expect("sigmoid grad");
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxVec(a) => {
                let yv = &self.nodes[idx].value;
                let inner = yv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                let d = Tensor::from_vec(
                    yv.shape(),
                    yv.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&y, &g)| y * (g - inner))
                        .collect(),
                )
                .expect("softmax grad");
                self.accumulate(grads, *a, d);
            }
            Op::L2NormRows(a) => {
                let xv = self.value(*a);
                let yv = &self.nodes[idx].value;
                let (m, n) = (xv.shape()[0], xv.shape()[1]);
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let x_row = &xv.data()[i * n..(i + 1) * n];
                    let y_row = &yv.data()[i * n..(i + 1) * n];
                    let g_row = &gy.data()[i * n..(i + 1) * n];
                    let norm = x_row
                        .iter()
                        .fold(T::zero(), |acc, &x| acc + x * x)
                        .sqrt();
                    let gdoty = g_row
                        .iter()
                        .zip(y_row)
                        .fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                    for j in 0..n {
                        d[i * n + j] = (g_row[j] - gdoty * y_row[j]) / norm;
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_vec(&[m, n], d).expect("l2norm grad"),
                );
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let g = gy.item() / T::from_f64(av.numel() as f64);
                self.accumulate(grads, *a, Tensor::from_fn(av.shape(), |_| g));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let g = gy.item();
                self.accumulate(grads, *a, Tensor::from_fn(av.shape(), |_| g));
            }
            Op::Reshape(a) => {
                let d = gy.reshape(self.value(*a).shape()).expect("reshape grad");
                self.accumulate(grads, *a, d);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let lv = self.value(*logits);
                let (m, n) = (lv.shape()[0], lv.shape()[1]);
                let g = gy.item() / T::from_f64(m as f64);
                let mut d = vec![T::zero(); m * n];
                let mut soft = vec![T::zero(); n];
                for (i, &label) in labels.iter().enumerate() {
                    softmax_slice(&lv.data()[i * n..(i + 1) * n], &mut soft);
                    for j in 0..n {
                        let y = if j == label { T::one() } else { T::zero() };
                        d[i * n + j] = (soft[j] - y) * g;
                    }
                }
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::from_vec(&[m, n], d).expect("ce grad"),
                );
            }
            Op::Conv2dSame { x, w, b, cols } => {
                let xv = self.value(*x);
                let (bs, c, h, wd) = (
                    xv.shape()[0],
                    xv.shape()[1],
                    xv.shape()[2],
                    xv.shape()[3],
                );
                let k = self.value(*b).numel();
                let hw = h * wd;
                // un-permute gy [b,k,h,w] back to matrix rows [b*h*w, k]
                let mut gmat = vec![T::zero(); bs * hw * k];
                for bi in 0..bs {
                    for ki in 0..k {
                        let src = &gy.data()[(bi * k + ki) * hw..(bi * k + ki + 1) * hw];
                        for p in 0..hw {
                            gmat[(bi * hw + p) * k + ki] = src[p];
                        }
                    }
                }
                let gmat = Tensor::from_vec(&[bs * hw, k], gmat).expect("conv grad mat");
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k];
                    for row in gmat.data().chunks(k) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[k], db).expect("conv db"));
                }
                if self.needs(*w) {
                    let dw = matmul_trans_a(cols, &gmat);
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let dcols = matmul_trans_b(&gmat, self.value(*w)).expect("conv dcols");
                    let dx = col2im_3x3(&dcols, bs, c, h, wd);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool2(a) => {
                let av = self.value(*a);
                let (bs, c, h, w) = (
                    av.shape()[0],
                    av.shape()[1],
                    av.shape()[2],
                    av.shape()[3],
                );
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64(0.25);
                let mut d = vec![T::zero(); bs * c * h * w];
                for img in 0..bs * c {
                    let src = &gy.data()[img * oh * ow..(img + 1) * oh * ow];
                    let dst = &mut d[img * h * w..(img + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let g = src[i * ow + j] * quarter;
                            dst[2 * i * w + 2 * j] = g;
                            dst[2 * i * w + 2 * j + 1] = g;
                            dst[(2 * i + 1) * w + 2 * j] = g;
                            dst[(2 * i + 1) * w + 2 * j + 1] = g;
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_vec(&[bs, c, h, w], d).expect("pool grad"),
                );
            }
            Op::GlobalAvgPool(a) => {
                let av = self.value(*a);
                let (bs, c, h, w) = (
                    av.shape()[0],
                    av.shape()[1],
                    av.shape()[2],
                    av.shape()[3],
                );
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut d = vec![T::zero(); bs * c * h * w];
                for i in 0..bs * c {
                    let g = gy.data()[i] * inv;
                    for v in &mut d[i * h * w..(i + 1) * h * w] {
                        *v = g;
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_vec(&[bs, c, h, w], d).expect("gap grad"),
                );
            }
        }
    }
}

/// `a[r,i]^T @ b[r,k]` without materializing the transpose.
fn matmul_trans_a<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (r, i) = (a.shape()[0], a.shape()[1]);
    let k = b.shape()[1];
    debug_assert_eq!(r, b.shape()[0]);
    let mut out = vec![T::zero(); i * k];
    let body = |(ii, out_row): (usize, &mut [T])| {
        for rr in 0..r {
            let a_val = a.data()[rr * i + ii];
            let b_row = &b.data()[rr * k..(rr + 1) * k];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_val * bv;
            }
        }
    };
    if r * i * k >= 1 << 17 {
        out.par_chunks_mut(k).enumerate().for_each(body);
    } else {
        out.chunks_mut(k).enumerate().for_each(body);
    }
    Tensor::from_vec(&[i, k], out).expect("matmul_trans_a shape")
}

/// Unfold `[b,c,h,w]` into `[b*h*w, c*9]` rows of 3x3 neighborhoods
/// (zero padding 1).
fn im2col_3x3<T: Scalar>(x: &Tensor<T>, bs: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let width = c * 9;
    let mut cols = vec![T::zero(); bs * hw * width];
    let chunk = hw * width;
    let body = |(bi, dst): (usize, &mut [T])| {
        let img = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        for oh in 0..h {
            for ow in 0..w {
                let row = &mut dst[(oh * w + ow) * width..(oh * w + ow + 1) * width];
                for ci in 0..c {
                    let plane = &img[ci * hw..(ci + 1) * hw];
                    for dh in 0..3usize {
                        let ih = oh as isize + dh as isize - 1;
                        for dw in 0..3usize {
                            let iw = ow as isize + dw as isize - 1;
                            if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                row[ci * 9 + dh * 3 + dw] = plane[ih as usize * w + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    if bs > 1 && bs * chunk >= 1 << 16 {
        cols.par_chunks_mut(chunk).enumerate().for_each(body);
    } else {
        cols.chunks_mut(chunk).enumerate().for_each(body);
    }
    Tensor::from_vec(&[bs * hw, width], cols).expect("im2col shape")
}

/// Scatter-add the unfolded gradient back to image layout; adjoint of
/// [`im2col_3x3`].
fn col2im_3x3<T: Scalar>(
    dcols: &Tensor<T>,
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Tensor<T> {
    let hw = h * w;
    let width = c * 9;
    let mut dx = vec![T::zero(); bs * c * hw];
    let chunk = c * hw;
    let body = |(bi, dst): (usize, &mut [T])| {
        let rows = &dcols.data()[bi * hw * width..(bi + 1) * hw * width];
        for oh in 0..h {
            for ow in 0..w {
                let row = &rows[(oh * w + ow) * width..(oh * w + ow + 1) * width];
                for ci in 0..c {
                    for dh in 0..3usize {
                        let ih = oh as isize + dh as isize - 1;
                        for dw in 0..3usize {
                            let iw = ow as isize + dw as isize - 1;
                            if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                dst[ci * hw + ih as usize * w + iw as usize] +=
                                    row[ci * 9 + dh * 3 + dw];
                            }
                        }
                    }
                }
            }
        }
    };
    if bs > 1 && bs * chunk >= 1 << 16 {
        dx.par_chunks_mut(chunk).enumerate().for_each(body);
    } else {
        dx.chunks_mut(chunk).enumerate().for_each(body);
    }
    Tensor::from_vec(&[bs, c, h, w], dx).expect("col2im shape")
}
