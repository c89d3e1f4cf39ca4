//! Differentiable operations. Broadcasting is limited to identical shapes,
//! tensor-vs-scalar, and the explicit last-axis bias add.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by `cosine_sim` and
/// `normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    ScalarMul(Tensor, f64),
    AddScalar(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Softplus(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    L2Norm(Tensor),
    L1Mean(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    MatmulT(Tensor, Tensor),
    Bmm(Tensor, Tensor),
    BmmT(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    SoftmaxRows(Tensor),
    LogSumExpRows(Tensor),
    NormalizeRows(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        eps: f64,
    },
    AddBias(Tensor, Tensor),
    MeanAxis {
        x: Tensor,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CosineSim(Tensor, Tensor),
    NarrowRows {
        x: Tensor,
        start: usize,
    },
    SelectCol {
        x: Tensor,
        col: usize,
    },
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row statistics shared by layer-norm forward and backward.
fn ln_row(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        same_shape(op_name, self, other)?;
        let a = self.data();
        let b = other.data();
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|v| v * c), self.shape().to_vec(), Op::ScalarMul(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.map(|v| v + c), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.scalar_mul(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(self.map(|v| v.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.map(f64::exp), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                message: format!("non-positive input {bad}"),
            });
        }
        Ok(Tensor::from_op(self.map(f64::ln), self.shape().to_vec(), Op::Log(self.clone())))
    }

    pub fn softplus(&self) -> Tensor {
        Tensor::from_op(self.map(softplus), self.shape().to_vec(), Op::Softplus(self.clone()))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s / self.numel() as f64], Vec::new(), Op::Mean(self.clone()))
    }

    pub fn l2_norm(&self) -> Tensor {
        let n = norm(&self.data());
        Tensor::from_op(vec![n], Vec::new(), Op::L2Norm(self.clone()))
    }

    /// Mean of `|a − b|` over all elements.
    pub fn l1_mean(&self, other: &Tensor) -> Result<Tensor> {
        let diffs = self.zip_with(other, "l1_mean", |a, b| (a - b).abs())?;
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        Ok(Tensor::from_op(vec![m], Vec::new(), Op::L1Mean(self.clone(), other.clone())))
    }

    fn matrix_dims(&self, op: &'static str, rank: usize, other: &Tensor) -> Result<()> {
        if self.shape().len() != rank || other.shape().len() != rank {
            return Err(Error::Dimension {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `self[m×n] · other[n×p]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matrix_dims("matmul", 2, other)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let (n2, p) = (other.shape()[0], other.shape()[1]);
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = gemm_nn(&self.data(), &other.data(), m, n, p);
        Ok(Tensor::from_op(out, vec![m, p], Op::Matmul(self.clone(), other.clone())))
    }

    /// `self[m×n] · other[p×n]ᵀ`, the layout of a linear layer's weight.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        self.matrix_dims("matmul_t", 2, other)?;
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let (p, n2) = (other.shape()[0], other.shape()[1]);
        if n != n2 {
            return Err(Error::Dimension {
                op: "matmul_t",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = gemm_nt(&self.data(), &other.data(), m, n, p);
        Ok(Tensor::from_op(out, vec![m, p], Op::MatmulT(self.clone(), other.clone())))
    }

    /// Batched `[b×m×n] · [b×n×p]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        self.matrix_dims("bmm", 3, other)?;
        let &[b, m, n] = self.shape() else { unreachable!() };
        let &[b2, n2, p] = other.shape() else { unreachable!() };
        if b != b2 || n != n2 {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (x, y) = (self.data(), other.data());
        let mut out = Vec::with_capacity(b * m * p);
        for i in 0..b {
            out.extend(gemm_nn(&x[i * m * n..(i + 1) * m * n], &y[i * n * p..(i + 1) * n * p], m, n, p));
        }
        drop((x, y));
        Ok(Tensor::from_op(out, vec![b, m, p], Op::Bmm(self.clone(), other.clone())))
    }

    /// Batched `[b×m×n] · [b×p×n]ᵀ`.
    pub fn bmm_t(&self, other: &Tensor) -> Result<Tensor> {
        self.matrix_dims("bmm_t", 3, other)?;
        let &[b, m, n] = self.shape() else { unreachable!() };
        let &[b2, p, n2] = other.shape() else { unreachable!() };
        if b != b2 || n != n2 {
            return Err(Error::Dimension {
                op: "bmm_t",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (x, y) = (self.data(), other.data());
        let mut out = Vec::with_capacity(b * m * p);
        for i in 0..b {
            out.extend(gemm_nt(&x[i * m * n..(i + 1) * m * n], &y[i * p * n..(i + 1) * p * n], m, n, p));
        }
        drop((x, y));
        Ok(Tensor::from_op(out, vec![b, m, p], Op::BmmT(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        };
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&self) -> Tensor {
        let n = last_dim(self);
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::SoftmaxRows(self.clone()))
    }

    /// `log Σ exp` over the last axis; drops that axis.
    pub fn logsumexp_rows(&self) -> Tensor {
        let n = last_dim(self);
        let out: Vec<f64> = self
            .data()
            .chunks(n)
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = self.shape()[..self.shape().len().saturating_sub(1)].to_vec();
        Tensor::from_op(out, shape, Op::LogSumExpRows(self.clone()))
    }

    /// Unit L2 norm along the last axis. Rows with norm ≤ `NORM_EPS` map to zero.
    pub fn normalize_rows(&self) -> Tensor {
        let n = last_dim(self);
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let nr = norm(row);
            if nr > NORM_EPS {
                row.iter_mut().for_each(|v| *v /= nr);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::NormalizeRows(self.clone()))
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let n = last_dim(self);
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let (g, b) = (gain.data(), bias.data());
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let (mean, inv) = ln_row(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        drop((g, b));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
        ))
    }

    /// Adds `bias[n]` to every row of a tensor whose last axis is `n`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim(self);
        if bias.shape() != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b.iter()).for_each(|(v, bj)| *v += bj);
        }
        drop(b);
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::AddBias(self.clone(), bias.clone())))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "mean_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= len as f64);
        }
        drop(x);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            out,
            out_shape,
            Op::MeanAxis {
                x: self.clone(),
                outer,
                len,
                inner,
            },
        ))
    }

    /// Cosine similarity of two equal-length vectors; 0 when either norm ≤ `NORM_EPS`.
    pub fn cosine_sim(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("cosine_sim", self, other)?;
        let (u, v) = (self.data(), other.data());
        let (nu, nv) = (norm(&u), norm(&v));
        let c = if nu > NORM_EPS && nv > NORM_EPS {
            (dot(&u, &v) / (nu * nv)).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        drop((u, v));
        Ok(Tensor::from_op(vec![c], Vec::new(), Op::CosineSim(self.clone(), other.clone())))
    }

    /// Rows `start..start + len` of a tensor, viewed along its first axis.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows = self.shape().first().copied().unwrap_or(0);
        if len == 0 || start + len > rows {
            return Err(Error::Dimension {
                op: "narrow_rows",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let stride = self.numel() / rows;
        let out = self.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Ok(Tensor::from_op(out, shape, Op::NarrowRows { x: self.clone(), start }))
    }

    /// Column `col` of a matrix.
    pub fn select_col(&self, col: usize) -> Result<Tensor> {
        let &[m, n] = self.shape() else {
            return Err(Error::Dimension {
                op: "select_col",
                lhs: self.shape().to_vec(),
                rhs: vec![col],
            });
        };
        if col >= n {
            return Err(Error::Dimension {
                op: "select_col",
                lhs: self.shape().to_vec(),
                rhs: vec![col],
            });
        }
        let x = self.data();
        let out = (0..m).map(|i| x[i * n + col]).collect();
        drop(x);
        Ok(Tensor::from_op(out, vec![m], Op::SelectCol { x: self.clone(), col }))
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | L1Mean(a, b) | Matmul(a, b) | MatmulT(a, b) | Bmm(a, b)
            | BmmT(a, b) | AddBias(a, b) | CosineSim(a, b) => vec![a, b],
            ScalarMul(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Softplus(a) | Sum(a) | Mean(a)
            | L2Norm(a) | Transpose(a) | Reshape(a) | SoftmaxRows(a) | LogSumExpRows(a) | NormalizeRows(a) => {
                vec![a]
            }
            LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            MeanAxis { x, .. } | NarrowRows { x, .. } | SelectCol { x, .. } => vec![x],
        }
    }

    /// Pushes `(parent, d loss / d parent)` for each parent via `emit`.
    pub(crate) fn backward(&self, out_shape: &[usize], out: &[f64], g: &[f64], emit: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        use Op::*;
        match self {
            Add(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.to_vec());
            }
            Sub(a, b) => {
                emit(a, g.to_vec());
                emit(b, g.iter().map(|v| -v).collect());
            }
            Mul(a, b) => {
                let (x, y) = (a.data().clone(), b.data().clone());
                emit(a, g.iter().zip(&y).map(|(g, y)| g * y).collect());
                emit(b, g.iter().zip(&x).map(|(g, x)| g * x).collect());
            }
            ScalarMul(a, c) => emit(a, g.iter().map(|v| v * c).collect()),
            AddScalar(a) => emit(a, g.to_vec()),
            Relu(a) => {
                let gx = a.data().iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                emit(a, gx);
            }
            Exp(a) => emit(a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Log(a) => {
                let gx = a.data().iter().zip(g).map(|(x, g)| g / x).collect();
                emit(a, gx);
            }
            Softplus(a) => {
                let gx = a.data().iter().zip(g).map(|(&x, g)| g * sigmoid(x)).collect();
                emit(a, gx);
            }
            Sum(a) => emit(a, vec![g[0]; a.numel()]),
            Mean(a) => emit(a, vec![g[0] / a.numel() as f64; a.numel()]),
            L2Norm(a) => {
                let n = out[0];
                let gx = if n > 0.0 {
                    a.data().iter().map(|x| g[0] * x / n).collect()
                } else {
                    vec![0.0; a.numel()]
                };
                emit(a, gx);
            }
            L1Mean(a, b) => {
                let scale = g[0] / a.numel() as f64;
                let ga: Vec<f64> = a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(x, y)| scale * sign(x - y))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                emit(a, ga);
                emit(b, gb);
            }
            Matmul(a, b) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                if a.requires_grad() {
                    let ga = gemm_nt(g, &b.data(), m, p, n);
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let gb = gemm_tn(&a.data(), g, m, n, p);
                    emit(b, gb);
                }
            }
            MatmulT(a, b) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[0];
                if a.requires_grad() {
                    let ga = gemm_nn(g, &b.data(), m, p, n);
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let gb = gemm_tn(g, &a.data(), m, p, n);
                    emit(b, gb);
                }
            }
            Bmm(a, b) => {
                let &[bs, m, n] = a.shape() else { unreachable!() };
                let p = b.shape()[2];
                let (x, y) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = Vec::with_capacity(bs * m * n);
                    for i in 0..bs {
                        ga.extend(gemm_nt(&g[i * m * p..(i + 1) * m * p], &y[i * n * p..(i + 1) * n * p], m, p, n));
                    }
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = Vec::with_capacity(bs * n * p);
                    for i in 0..bs {
                        gb.extend(gemm_tn(&x[i * m * n..(i + 1) * m * n], &g[i * m * p..(i + 1) * m * p], m, n, p));
                    }
                    emit(b, gb);
                }
            }
            BmmT(a, b) => {
                let &[bs, m, n] = a.shape() else { unreachable!() };
                let p = b.shape()[1];
                let (x, y) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = Vec::with_capacity(bs * m * n);
                    for i in 0..bs {
                        ga.extend(gemm_nn(&g[i * m * p..(i + 1) * m * p], &y[i * p * n..(i + 1) * p * n], m, p, n));
                    }
                    emit(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = Vec::with_capacity(bs * p * n);
                    for i in 0..bs {
                        gb.extend(gemm_tn(&g[i * m * p..(i + 1) * m * p], &x[i * m * n..(i + 1) * m * n], m, p, n));
                    }
                    emit(b, gb);
                }
            }
            Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                emit(a, gx);
            }
            Reshape(a) => emit(a, g.to_vec()),
            SoftmaxRows(a) => {
                let n = *out_shape.last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dst[j] = yr[j] * (gr[j] - s);
                    }
                }
                emit(a, gx);
            }
            LogSumExpRows(a) => {
                let n = last_dim(a);
                let x = a.data();
                let mut gx = vec![0.0; x.len()];
                for ((row, dst), (&lse, &gi)) in x.chunks(n).zip(gx.chunks_mut(n)).zip(out.iter().zip(g)) {
                    for j in 0..n {
                        dst[j] = gi * (row[j] - lse).exp();
                    }
                }
                drop(x);
                emit(a, gx);
            }
            NormalizeRows(a) => {
                let n = last_dim(a);
                let x = a.data();
                let mut gx = vec![0.0; x.len()];
                for ((row, yr), (gr, dst)) in x.chunks(n).zip(out.chunks(n)).zip(g.chunks(n).zip(gx.chunks_mut(n))) {
                    let nr = norm(row);
                    if nr > NORM_EPS {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            dst[j] = (gr[j] - yr[j] * s) / nr;
                        }
                    }
                }
                drop(x);
                emit(a, gx);
            }
            LayerNorm { x, gain, bias, eps } => {
                let n = last_dim(x);
                let xd = x.data();
                let gd = gain.data();
                let rows = xd.len() / n;
                let mut gx = vec![0.0; xd.len()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let row = &xd[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mean, inv) = ln_row(row, *eps);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gr[j] * gd[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dot(&dxhat, &xhat) / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                drop((xd, gd));
                emit(x, gx);
                emit(gain, ggain);
                emit(bias, gbias);
            }
            AddBias(a, b) => {
                let n = b.numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                emit(a, g.to_vec());
                emit(b, gb);
            }
            MeanAxis { x, outer, len, inner } => {
                let mut gx = vec![0.0; x.numel()];
                let scale = 1.0 / *len as f64;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                    }
                }
                emit(x, gx);
            }
            CosineSim(a, b) => {
                let (u, v) = (a.data().clone(), b.data().clone());
                let (nu, nv) = (norm(&u), norm(&v));
                if nu > NORM_EPS && nv > NORM_EPS {
                    let c = out[0];
                    let k = g[0] / (nu * nv);
                    let gu = u.iter().zip(&v).map(|(ui, vi)| k * vi - g[0] * c * ui / (nu * nu)).collect();
                    let gv = u.iter().zip(&v).map(|(ui, vi)| k * ui - g[0] * c * vi / (nv * nv)).collect();
                    emit(a, gu);
                    emit(b, gv);
                } else {
                    emit(a, vec![0.0; u.len()]);
                    emit(b, vec![0.0; v.len()]);
                }
            }
            NarrowRows { x, start } => {
                let rows = x.shape()[0];
                let stride = x.numel() / rows;
                let mut gx = vec![0.0; x.numel()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(g);
                emit(x, gx);
            }
            SelectCol { x, col } => {
                let n = x.shape()[1];
                let mut gx = vec![0.0; x.numel()];
                for (i, gi) in g.iter().enumerate() {
                    gx[i * n + col] = *gi;
                }
                emit(x, gx);
            }
        }
    }
}
