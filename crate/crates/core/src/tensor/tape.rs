// Copyright 2026 The ildlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

// Every step allocates and frees the same few hundred activation buffers.
// glibc serves the larger ones with mmap and hands them straight back, which
// turns each step into a page-fault storm; keeping them on the heap removes
// about a third of the wall time.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        const LIMIT: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
            libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
        }
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

// One exp instead of libm tanh, which goes through expm1 and is slower.
#[inline]
fn tanh_fast(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    AddConst(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        a: Var,
        b: Var,
    },
    KldRows {
        p: Var,
        q: Var,
        eps: f64,
    },
    SoftCrossEntropy {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
///
/// Nodes are appended in creation order, so every node's inputs precede it
/// and a reverse sweep visits each node after all of its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
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

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax of a plain buffer, outside any tape.
pub(crate) fn softmax_rows_plain(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (r, o) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_row(r, o);
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    // when the last axis stays in place, whole rows move as one block
    let run = if rank > 0 && perm[rank - 1] == rank - 1 {
        shape[rank - 1]
    } else {
        1
    };
    let outer = if run == 1 { rank } else { rank - 1 };
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; outer];
    for _ in 0..data.len() / run.max(1) {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[src..src + run]);
        for d in (0..outer).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.differentiated = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// Batched product over the leading axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bn, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; bn * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bn {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bn, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn zip_op(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x[.., n] + bias[n]`, broadcasting the bias over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![factor.len()],
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(v, f)| v * f)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst { x, factor }, rg))
    }

    /// Adds a constant additive key mask to attention logits.
    ///
    /// `x` is `[B, H, Sq, Sk]` and `mask` is `[B, Sk]`; the mask is broadcast
    /// over heads and query positions.
    pub fn add_key_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || mask.len() != s[0] * s[3] {
            return Err(Error::Dimension {
                op: "add_key_mask",
                lhs: s,
                rhs: vec![mask.len()],
            });
        }
        let (b, h, sq, sk) = (s[0], s[1], s[2], s[3]);
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            let m = &mask[bi * sk..(bi + 1) * sk];
            for row in data[bi * h * sq * sk..(bi + 1) * h * sq * sk].chunks_mut(sk) {
                for (v, &mv) in row.iter_mut().zip(m) {
                    *v += mv;
                }
            }
        }
        let t = Tensor::new(s, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + tanh_fast(GELU_C * (v + GELU_K * v * v * v))))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let data = softmax_rows_plain(self.value(x).data(), cols);
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows along the leading axis; output is `[index.len(), ..]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {shape:?}"
            )));
        }
        let row = self.value(x).numel() / n;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in &index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, index }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Dimension {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let s = ad
            .iter()
            .zip(bd)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ad.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, rg))
    }

    /// Mean over rows of `sum p * ln((p + eps) / (q + eps))`.
    ///
    /// Both inputs must be row-stochastic along the last axis.
    pub fn kld_rows(&mut self, p: Var, q: Var, eps: f64) -> Result<Var> {
        same_shape("kld_rows", self.value(p), self.value(q))?;
        let (rows, cols) = rows_cols(self.shape(p));
        for (name, v) in [("p", p), ("q", q)] {
            for (r, row) in self.value(v).data().chunks(cols).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
                    return Err(Error::Contract(format!(
                        "kld_rows: row {r} of {name} is not a distribution (sum {s})"
                    )));
                }
            }
        }
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut s = 0.0;
        for (&pv, &qv) in pd.iter().zip(qd) {
            s += pv * ((pv + eps).ln() - (qv + eps).ln());
        }
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(
            Tensor::scalar(s / rows as f64),
            Op::KldRows { p, q, eps },
            rg,
        ))
    }

    /// Mean over rows of `-sum softmax(t_logits / T) * log_softmax(student / T)`.
    ///
    /// The teacher side is a plain tensor, so no gradient can reach it.
    pub fn soft_cross_entropy(
        &mut self,
        teacher_logits: &Tensor,
        student: Var,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        same_shape("soft_cross_entropy", teacher_logits, self.value(student))?;
        let (rows, cols) = rows_cols(teacher_logits.shape());
        let scaled_t: Vec<f64> = teacher_logits
            .data()
            .iter()
            .map(|v| v / temperature)
            .collect();
        let scaled_s: Vec<f64> = self
            .value(student)
            .data()
            .iter()
            .map(|v| v / temperature)
            .collect();
        let teacher_probs = softmax_rows_plain(&scaled_t, cols);
        let student_probs = softmax_rows_plain(&scaled_s, cols);
        let mut logp = vec![0.0; cols];
        let mut loss = 0.0;
        for r in 0..rows {
            log_softmax_row(&scaled_s[r * cols..(r + 1) * cols], &mut logp);
            for c in 0..cols {
                loss -= teacher_probs[r * cols + c] * logp[c];
            }
        }
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::SoftCrossEntropy {
                student,
                teacher_probs,
                student_probs,
                temperature,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        if labels.len() != rows || self.shape(logits).len() != 2 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let ld = self.value(logits).data();
        let probs = softmax_rows_plain(ld, cols);
        let mut logp = vec![0.0; cols];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            log_softmax_row(&ld[r * cols..(r + 1) * cols], &mut logp);
            loss -= logp[y];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scales each row along the last axis to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let src = self.value(x).data();
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(src.len());
        for (r, row) in src.chunks(cols).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 1e-12) || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "row {r} has zero norm; cannot normalize"
                )));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// A tape can be differentiated once; call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let gv = g.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |ga| gemm(gv, bv, ga, m, n, k, false, true, true));
                self.accumulate_with(grads, *b, |gb| gemm(av, gv, gb, k, m, n, true, false, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bn, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |ga| {
                    for t in 0..bn {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let bs = &bv[t * k * n..(t + 1) * k * n];
                        // dA = dC * B^T, or dC * B when B was read transposed
                        gemm(
                            gs,
                            bs,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                            true,
                        );
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for t in 0..bn {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // B stored [n,k]: dB = dC^T * A
                            gemm(gs, as_, out, n, m, k, true, false, true);
                        } else {
                            gemm(as_, gs, out, k, m, n, true, false, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddRow { x, bias } => {
                let cols = self.shape(*bias)[0];
                self.accumulate_with(grads, *bias, |gb| {
                    for row in g.chunks(cols) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::MulConst { x, factor } => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(factor).map(|(g, f)| g * f).collect(),
                );
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let t = tanh_fast(GELU_C * (v + GELU_K * v * v * v));
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                self.accumulate_with(grads, *gamma, |gg| {
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * xr[c];
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |gb| {
                    for gr in g.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += gr[c];
                        }
                    }
                });
                if self.requires_grad(*x) {
                    let nf = cols as f64;
                    let mut d = vec![0.0; g.len()];
                    for (r, ((gr, xr), dr)) in g
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .zip(d.chunks_mut(cols))
                        .enumerate()
                    {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[c];
                        }
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            dr[c] = rstd[r] / nf * (nf * dxh - sum_dxh - xr[c] * sum_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::GatherRows { x, index } => {
                let row = node.value.numel() / index.len();
                self.accumulate_with(grads, *x, |gx| {
                    for (o, &src) in index.iter().enumerate() {
                        for c in 0..row {
                            gx[src * row + c] += g[o * row + c];
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (d, _) = permute_data(gv, node.value.shape(), &inverse);
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, diff.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, diff);
            }
            Op::KldRows { p, q, eps } => {
                let (rows, _) = rows_cols(self.shape(*p));
                let s = g[0] / rows as f64;
                let (pd, qd) = (self.value(*p).data(), self.value(*q).data());
                if self.requires_grad(*p) {
                    let d = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pv, &qv)| s * ((pv + eps).ln() - (qv + eps).ln() + pv / (pv + eps)))
                        .collect();
                    self.accumulate(grads, *p, d);
                }
                if self.requires_grad(*q) {
                    let d = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pv, &qv)| -s * pv / (qv + eps))
                        .collect();
                    self.accumulate(grads, *q, d);
                }
            }
            Op::SoftCrossEntropy {
                student,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let (rows, _) = rows_cols(self.shape(*student));
                let s = g[0] / (rows as f64 * temperature);
                let d = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(ps, pt)| s * (ps - pt))
                    .collect();
                self.accumulate(grads, *student, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (rows, cols) = rows_cols(self.shape(*logits));
                let s = g[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * cols + y] -= s;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for (r, ((yr, gr), dr)) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(d.chunks_mut(cols))
                    .enumerate()
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dr[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}
