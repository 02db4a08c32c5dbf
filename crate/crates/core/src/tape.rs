//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value plus whatever the
//! backward pass needs. [`Tape::backward`] walks the nodes in exact reverse
//! order and accumulates gradients into the leaves that require them.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, broadcast_shape, broadcast_strides, walk2, Conv2dParams, ConvGeom, ConvPlan, ConvTPlan};
use crate::tensor::{gemm, numel, permute_data, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reductions offered by [`Tape::pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// `[B,C,H,W] -> [B,C,1,1]`
    GlobalAvg,
    GlobalMax,
    /// `[B,C,H,W] -> [B,1,H,W]`
    ChannelAvg,
    ChannelMax,
}

pub const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Expand(NodeId),
    Concat(Vec<NodeId>, usize),
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        plan: ConvPlan,
    },
    ConvT {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        plan: ConvTPlan,
    },
    LayerNorm {
        x: NodeId,
        g: NodeId,
        b: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        g: NodeId,
        b: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
        training: bool,
    },
    Pool {
        x: NodeId,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Resize(NodeId),
    Gather {
        src: NodeId,
        idx: Vec<usize>,
        k: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    matmul_macs: u64,
    last_backward_order: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            matmul_macs: 0,
            last_backward_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by [`Tape::matmul`] so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    /// Node indices visited by the latest backward pass, in visiting order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_backward_order
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let n = &self.nodes[id.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: NodeId, b: NodeId, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out =
            broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = vec![T::zero(); numel(&out)];
            walk2(
                &out,
                &broadcast_strides(&sa, &out),
                &broadcast_strides(&sb, &out),
                |i, ia, ib| {
                    d[i] = f(va[ia], vb[ib]);
                },
            );
            d
        };
        Ok((Tensor::new(&out, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| e * s).collect()).expect("shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = *v.shape().last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let data = softmax_rows(v.data(), n);
        let t = Tensor::new(v.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = fixed_sum(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = fixed_sum(v.data()) / T::of(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(x).permute(perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Broadcast `x` to `shape`.
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape(&sx, shape).as_deref() != Some(shape) {
            return Err(shape_err("expand", format!("{sx:?} -> {shape:?}")));
        }
        let src = self.value(x).data();
        let mut d = vec![T::zero(); numel(shape)];
        let st = broadcast_strides(&sx, shape);
        walk2(shape, &st, &st, |i, ia, _| d[i] = src[ia]);
        let t = Tensor::new(shape, d)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Expand(x), rg))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut d = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                d.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(&out, d)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Rows of `src` (`[B, R, ...]`) picked per `(batch, row)`:
    /// `out[b, i, j, ...] = src[b, idx[(b*R + i)*k + j], ...]`.
    pub fn gather(&mut self, src: NodeId, idx: &[usize], k: usize) -> Result<NodeId> {
        let s = self.shape(src).to_vec();
        if s.len() < 2 {
            return Err(shape_err("gather", format!("source rank {} < 2", s.len())));
        }
        let (b, r) = (s[0], s[1]);
        if idx.len() != b * r * k {
            return Err(shape_err("gather", format!("{} indices for {b}x{r}x{k}", idx.len())));
        }
        let inner: usize = s[2..].iter().product();
        for (row, chunk) in idx.chunks(k).enumerate() {
            if let Some(&bad) = chunk.iter().find(|&&v| v >= r) {
                return Err(Error::Index {
                    op: "gather",
                    row: row % r,
                    value: bad,
                    bound: r,
                });
            }
        }
        let v = self.value(src).data();
        let mut d = Vec::with_capacity(b * r * k * inner);
        for bi in 0..b {
            for i in 0..r {
                for j in 0..k {
                    let from = idx[(bi * r + i) * k + j];
                    let off = (bi * r + from) * inner;
                    d.extend_from_slice(&v[off..off + inner]);
                }
            }
        }
        let mut out = vec![b, r, k];
        out.extend_from_slice(&s[2..]);
        let t = Tensor::new(&out, d)?;
        let rg = self.rg(&[src]);
        Ok(self.push(
            t,
            Op::Gather {
                src,
                idx: idx.to_vec(),
                k,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched `a·b` (or `a·bᵀ` with `trans_b`). Leading axes of `a` and `b`
    /// must agree, or `b` is rank 2 and shared across the batch.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::Dim {
                op: "matmul",
                axis: "inner",
                expected: k,
                got: kb,
            });
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2 && !lead.is_empty();
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(shape_err("matmul", format!("batch axes {sa:?} vs {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut d = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let am = MatRef::new(&va[i * m * k..(i + 1) * m * k], m, k);
            let boff = if shared_b { 0 } else { i * k * n };
            let bs = &vb[boff..boff + k * n];
            let bm = if trans_b {
                MatRef::t(bs, k, n)
            } else {
                MatRef::new(bs, k, n)
            };
            gemm(am, bm, T::zero(), &mut d[i * m * n..(i + 1) * m * n]);
        }
        self.matmul_macs += (batch * m * k * n) as u64;
        let mut out = lead.to_vec();
        out.extend_from_slice(&[m, n]);
        let t = Tensor::new(&out, d)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Fully connected layer over the last axis: `x·wᵀ + b`, `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fin = *sx.last().ok_or_else(|| shape_err("linear", "rank 0 input"))?;
        if sw.len() != 2 || sw[1] != fin {
            return Err(Error::Dim {
                op: "linear",
                axis: "in_features",
                expected: sw.get(1).copied().unwrap_or(0),
                got: fin,
            });
        }
        let fout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::Dim {
                    op: "linear",
                    axis: "bias",
                    expected: fout,
                    got: self.shape(b)[0],
                });
            }
        }
        let rows = numel(&sx) / fin;
        let mut d = vec![T::zero(); rows * fout];
        gemm(
            MatRef::new(self.value(x).data(), rows, fin),
            MatRef::t(self.value(w).data(), fin, fout),
            T::zero(),
            &mut d,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in d.chunks_mut(fout) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut out = sx.clone();
        *out.last_mut().expect("rank") = fout;
        let t = Tensor::new(&out, d)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, p: Conv2dParams) -> Result<NodeId> {
        let plan = conv_plan(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), p)?;
        let bias = b.map(|b| self.value(b).data());
        let d = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &plan);
        let t = Tensor::new(&[plan.batch, plan.cout, plan.geom.out_h, plan.geom.out_w], d)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Conv2d { x, w, b, plan }, rg))
    }

    /// Transposed convolution, weight `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let plan = conv_t_plan(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), stride, padding)?;
        let bias = b.map(|b| self.value(b).data());
        let d = kernels::conv_t_forward(self.value(x).data(), self.value(w).data(), bias, &plan);
        let t = Tensor::new(&[plan.batch, plan.cout, plan.geom.h, plan.geom.w], d)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::ConvT { x, w, b, plan }, rg))
    }

    // ---------------------------------------------------------------- normalisation

    /// Layer normalisation over the last axis with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        for (id, axis) in [(g, "gamma"), (b, "beta")] {
            if self.shape(id) != [c] {
                return Err(Error::Dim {
                    op: "layer_norm",
                    axis,
                    expected: c,
                    got: self.shape(id)[0],
                });
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let inv_c = T::of(1.0 / c as f64);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = fixed_sum(row) * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::of(NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(&sx, out)?;
        let rg = self.rg(&[x, g, b]);
        Ok(self.push(t, Op::LayerNorm { x, g, b, xhat, rstd }, rg))
    }

    /// Batch normalisation over axis 1 of `[B, C, ...]`. In training mode the
    /// batch statistics are used and returned; otherwise `running` is used.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        g: NodeId,
        b: NodeId,
        running: Option<(&[T], &[T])>,
    ) -> Result<(NodeId, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("rank {}", sx.len())));
        }
        let (bn, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        for (id, axis) in [(g, "gamma"), (b, "beta")] {
            if self.shape(id) != [c] {
                return Err(Error::Dim {
                    op: "batch_norm",
                    axis,
                    expected: c,
                    got: self.shape(id)[0],
                });
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(g).data(), self.value(b).data());
        let count = bn * inner;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); c];
        let mut out = vec![T::zero(); xv.len()];
        let training = running.is_none();
        let mut stats = BatchStats {
            mean: vec![T::zero(); c],
            var: vec![T::zero(); c],
        };
        for ch in 0..c {
            let plane = |bi: usize| &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
            let (mean, var) = match running {
                Some((rm, rv)) => (rm[ch], rv[ch]),
                None => {
                    let mut s = T::zero();
                    for bi in 0..bn {
                        s += fixed_sum(plane(bi));
                    }
                    let mean = s / T::of(count as f64);
                    let mut q = T::zero();
                    for bi in 0..bn {
                        q += plane(bi).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                    }
                    stats.mean[ch] = mean;
                    stats.var[ch] = if count > 1 { q / T::of((count - 1) as f64) } else { q };
                    (mean, q / T::of(count as f64))
                }
            };
            let rs = T::one() / (var + T::of(NORM_EPS)).sqrt();
            rstd[ch] = rs;
            for bi in 0..bn {
                let off = (bi * c + ch) * inner;
                for j in 0..inner {
                    let h = (xv[off + j] - mean) * rs;
                    xhat[off + j] = h;
                    out[off + j] = h * gv[ch] + bv[ch];
                }
            }
        }
        let t = Tensor::new(&sx, out)?;
        let rg = self.rg(&[x, g, b]);
        let id = self.push(
            t,
            Op::BatchNorm {
                x,
                g,
                b,
                xhat,
                rstd,
                training,
            },
            rg,
        );
        Ok((id, training.then_some(stats)))
    }

    // ---------------------------------------------------------------- spatial

    pub fn pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("pool", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut argmax = Vec::new();
        let (out_shape, d) = match kind {
            PoolKind::GlobalAvg | PoolKind::GlobalMax => {
                let mut d = Vec::with_capacity(b * c);
                for p in 0..b * c {
                    let plane = &xv[p * hw..(p + 1) * hw];
                    if kind == PoolKind::GlobalAvg {
                        d.push(fixed_sum(plane) / T::of(hw as f64));
                    } else {
                        let i = argmax_first(plane);
                        argmax.push(p * hw + i);
                        d.push(plane[i]);
                    }
                }
                (vec![b, c, 1, 1], d)
            }
            PoolKind::ChannelAvg | PoolKind::ChannelMax => {
                let mut d = Vec::with_capacity(b * hw);
                for bi in 0..b {
                    for j in 0..hw {
                        let at = |ch: usize| (bi * c + ch) * hw + j;
                        if kind == PoolKind::ChannelAvg {
                            let mut s = T::zero();
                            for ch in 0..c {
                                s += xv[at(ch)];
                            }
                            d.push(s / T::of(c as f64));
                        } else {
                            let mut best = at(0);
                            for ch in 1..c {
                                if xv[at(ch)] > xv[best] {
                                    best = at(ch);
                                }
                            }
                            argmax.push(best);
                            d.push(xv[best]);
                        }
                    }
                }
                (vec![b, 1, s[2], s[3]], d)
            }
        };
        let t = Tensor::new(&out_shape, d)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Pool { x, kind, argmax }, rg))
    }

    /// Bilinear resize of `[B,C,H,W]` with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err("resize", format!("{s:?} -> {out_h}x{out_w}")));
        }
        let d = kernels::resize_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], out_h, out_w);
        let t = Tensor::new(&[s[0], s[1], out_h, out_w], d)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Resize(x), rg))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagate from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        self.last_backward_order.clear();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.last_backward_order.push(i);
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (id, contrib) in self.node_backward(i, &g) {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match grads[id.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &v)| *a += v),
                    None => grads[id.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn need(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(NodeId, Vec<T>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.need(*a) {
                    res.push((*a, reduce_to(g, out_shape, self.shape(*a))));
                }
                if self.need(*b) {
                    let mut gb = reduce_to(g, out_shape, self.shape(*b));
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                walk2(
                    out_shape,
                    &broadcast_strides(sa, out_shape),
                    &broadcast_strides(sb, out_shape),
                    |o, ia, ib| {
                        ga[ia] += g[o] * vb[ib];
                        gb[ib] += g[o] * va[ia];
                    },
                );
                if self.need(*a) {
                    res.push((*a, ga));
                }
                if self.need(*b) {
                    res.push((*b, gb));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                res.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(&gv, &v)| gv * gelu(v).1).collect()));
            }
            Op::Sigmoid(x) => {
                res.push((*x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect()));
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().expect("rank");
                let mut d = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, d));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                res.push((*x, vec![g[0] / T::of(n as f64); n]));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, permute_data(g, out_shape, &inv)));
            }
            Op::Expand(x) => res.push((*x, reduce_to(g, out_shape, self.shape(*x)))),
            Op::Concat(xs, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = xs.iter().map(|x| Vec::with_capacity(self.value(*x).len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, x) in xs.iter().enumerate() {
                        let chunk = self.shape(*x)[*axis] * inner;
                        parts[pi].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (x, p) in xs.iter().zip(parts) {
                    res.push((*x, p));
                }
            }
            Op::Gather { src, idx, k } => {
                let s = self.shape(*src);
                let (b, r) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut d = vec![T::zero(); self.value(*src).len()];
                for bi in 0..b {
                    for i in 0..r {
                        for j in 0..*k {
                            let row = (bi * r + i) * k + j;
                            let to = (bi * r + idx[row]) * inner;
                            for (dv, &gv) in d[to..to + inner].iter_mut().zip(&g[row * inner..(row + 1) * inner]) {
                                *dv += gv;
                            }
                        }
                    }
                }
                res.push((*src, d));
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.need(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for i in 0..*batch {
                        let boff = if *shared_b { 0 } else { i * k * n };
                        let bs = &vb[boff..boff + k * n];
                        // ga = g · bᵀ  where b is k×n (or stored n×k when transposed)
                        let bt = if *trans_b {
                            MatRef::new(bs, n, k)
                        } else {
                            MatRef::t(bs, n, k)
                        };
                        gemm(
                            MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            bt,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    res.push((*a, ga));
                }
                if self.need(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for i in 0..*batch {
                        let boff = if *shared_b { 0 } else { i * k * n };
                        let ga_ = &va[i * m * k..(i + 1) * m * k];
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        if *trans_b {
                            // gb (n×k) = gᵀ · a
                            gemm(
                                MatRef::t(gs, n, m),
                                MatRef::new(ga_, m, k),
                                T::one(),
                                &mut gb[boff..boff + k * n],
                            );
                        } else {
                            gemm(
                                MatRef::t(ga_, k, m),
                                MatRef::new(gs, m, n),
                                T::one(),
                                &mut gb[boff..boff + k * n],
                            );
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let fout = *out_shape.last().expect("rank");
                let fin = *self.shape(*x).last().expect("rank");
                let rows = g.len() / fout;
                if self.need(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    gemm(
                        MatRef::new(g, rows, fout),
                        MatRef::new(wv, fout, fin),
                        T::zero(),
                        &mut gx,
                    );
                    res.push((*x, gx));
                }
                if self.need(*w) {
                    let mut gw = vec![T::zero(); wv.len()];
                    gemm(MatRef::t(g, fout, rows), MatRef::new(xv, rows, fin), T::zero(), &mut gw);
                    res.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.need(*b)) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    res.push((b, gb));
                }
            }
            Op::Conv2d { x, w, b, plan } => {
                let need = (self.need(*x), self.need(*w), b.is_some_and(|b| self.need(b)));
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, plan, need);
                push_opt(&mut res, *x, gx);
                push_opt(&mut res, *w, gw);
                if let Some(b) = b {
                    push_opt(&mut res, *b, gb);
                }
            }
            Op::ConvT { x, w, b, plan } => {
                let need = (self.need(*x), self.need(*w), b.is_some_and(|b| self.need(b)));
                let (gx, gw, gb) =
                    kernels::conv_t_backward(self.value(*x).data(), self.value(*w).data(), g, plan, need);
                push_opt(&mut res, *x, gx);
                push_opt(&mut res, *w, gw);
                if let Some(b) = b {
                    push_opt(&mut res, *b, gb);
                }
            }
            Op::LayerNorm {
                x,
                g: gam,
                b,
                xhat,
                rstd,
            } => {
                let c = *out_shape.last().expect("rank");
                let gv = self.value(*gam).data();
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let inv_c = T::of(1.0 / c as f64);
                for r in 0..g.len() / c {
                    let (gr, hr) = (&g[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                    }
                }
                if self.need(*x) {
                    res.push((*x, gx));
                }
                if self.need(*gam) {
                    res.push((*gam, gg));
                }
                if self.need(*b) {
                    res.push((*b, gbeta));
                }
            }
            Op::BatchNorm {
                x,
                g: gam,
                b,
                xhat,
                rstd,
                training,
            } => {
                let (bn, c) = (out_shape[0], out_shape[1]);
                let inner: usize = out_shape[2..].iter().product();
                let gv = self.value(*gam).data();
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let inv_n = T::of(1.0 / (bn * inner) as f64);
                for ch in 0..c {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for bi in 0..bn {
                        let off = (bi * c + ch) * inner;
                        for j in off..off + inner {
                            m1 += g[j];
                            m2 += g[j] * xhat[j];
                        }
                    }
                    gbeta[ch] = m1;
                    gg[ch] = m2;
                    let (m1, m2) = (m1 * inv_n, m2 * inv_n);
                    for bi in 0..bn {
                        let off = (bi * c + ch) * inner;
                        for j in off..off + inner {
                            gx[j] = if *training {
                                gv[ch] * rstd[ch] * (g[j] - m1 - xhat[j] * m2)
                            } else {
                                gv[ch] * rstd[ch] * g[j]
                            };
                        }
                    }
                }
                if self.need(*x) {
                    res.push((*x, gx));
                }
                if self.need(*gam) {
                    res.push((*gam, gg));
                }
                if self.need(*b) {
                    res.push((*b, gbeta));
                }
            }
            Op::Pool { x, kind, argmax } => {
                let s = self.shape(*x);
                let (bn, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![T::zero(); bn * c * hw];
                match kind {
                    PoolKind::GlobalAvg => {
                        let inv = T::of(1.0 / hw as f64);
                        for p in 0..bn * c {
                            gx[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = g[p] * inv);
                        }
                    }
                    PoolKind::ChannelAvg => {
                        let inv = T::of(1.0 / c as f64);
                        for bi in 0..bn {
                            for ch in 0..c {
                                for j in 0..hw {
                                    gx[(bi * c + ch) * hw + j] = g[bi * hw + j] * inv;
                                }
                            }
                        }
                    }
                    PoolKind::GlobalMax | PoolKind::ChannelMax => {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += g[o];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                res.push((
                    *x,
                    kernels::resize_backward(g, s[0] * s[1], s[2], s[3], out_shape[2], out_shape[3]),
                ));
            }
        }
        res
    }
}

fn push_opt<T>(res: &mut Vec<(NodeId, Vec<T>)>, id: NodeId, g: Option<Vec<T>>) {
    if let Some(g) = g {
        res.push((id, g));
    }
}

/// Sum `g` (shaped `out`) down to the broadcast source shape `to`.
fn reduce_to<T: Scalar>(g: &[T], out: &[usize], to: &[usize]) -> Vec<T> {
    if out == to {
        return g.to_vec();
    }
    let mut d = vec![T::zero(); numel(to)];
    let st = broadcast_strides(to, out);
    walk2(out, &st, &st, |o, i, _| d[i] += g[o]);
    d
}

/// Sequential left-to-right sum.
pub(crate) fn fixed_sum<T: Scalar>(v: &[T]) -> T {
    let mut s = 0.0f64;
    for &x in v {
        s += x.f64();
    }
    T::of(s)
}

/// First index of the maximum (ties resolve to the lowest index).
pub fn argmax_first<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// GELU (tanh form) and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (y, dy)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, r) in out.chunks_mut(n).zip(x.chunks(n)) {
        let m = r.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (ov, &v) in o.iter_mut().zip(r) {
            *ov = (v - m).exp();
            s += *ov;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn conv_plan(sx: &[usize], sw: &[usize], sb: Option<&[usize]>, p: Conv2dParams) -> Result<ConvPlan> {
    if sx.len() != 4 {
        return Err(shape_err("conv2d", format!("input must be [B,C,H,W], got {sx:?}")));
    }
    if sw.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("weight must be [Cout,Cin/g,kh,kw], got {sw:?}"),
        ));
    }
    if p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(Error::Invalid(
            "conv2d: stride, dilation and groups must be >= 1".into(),
        ));
    }
    let (cin, cout) = (sx[1], sw[0]);
    if cin % p.groups != 0 {
        return Err(Error::Divisibility {
            what: "conv2d input channels".into(),
            divisor: p.groups,
            value: cin,
        });
    }
    if cout % p.groups != 0 {
        return Err(Error::Divisibility {
            what: "conv2d output channels".into(),
            divisor: p.groups,
            value: cout,
        });
    }
    if sw[1] != cin / p.groups {
        return Err(Error::Dim {
            op: "conv2d",
            axis: "in_channels",
            expected: sw[1] * p.groups,
            got: cin,
        });
    }
    if let Some(sb) = sb {
        if sb != [cout] {
            return Err(Error::Dim {
                op: "conv2d",
                axis: "bias",
                expected: cout,
                got: sb[0],
            });
        }
    }
    let geom = ConvGeom::new(
        cin / p.groups,
        sx[2],
        sx[3],
        sw[2],
        sw[3],
        p.stride,
        p.padding,
        p.dilation,
    )
    .ok_or_else(|| {
        shape_err(
            "conv2d",
            format!("kernel {sw:?} (dilation {}) exceeds padded input {sx:?}", p.dilation),
        )
    })?;
    Ok(ConvPlan {
        batch: sx[0],
        cin,
        cout,
        groups: p.groups,
        geom,
    })
}

fn conv_t_plan(sx: &[usize], sw: &[usize], sb: Option<&[usize]>, stride: usize, padding: usize) -> Result<ConvTPlan> {
    if sx.len() != 4 || sw.len() != 4 {
        return Err(shape_err("conv_transpose2d", format!("input {sx:?}, weight {sw:?}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv_transpose2d: stride must be >= 1".into()));
    }
    if sw[0] != sx[1] {
        return Err(Error::Dim {
            op: "conv_transpose2d",
            axis: "in_channels",
            expected: sw[0],
            got: sx[1],
        });
    }
    let cout = sw[1];
    if let Some(sb) = sb {
        if sb != [cout] {
            return Err(Error::Dim {
                op: "conv_transpose2d",
                axis: "bias",
                expected: cout,
                got: sb[0],
            });
        }
    }
    let oh = ((sx[2] - 1) * stride + sw[2])
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| shape_err("conv_transpose2d", "padding removes the whole output"))?;
    let ow = ((sx[3] - 1) * stride + sw[3])
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| shape_err("conv_transpose2d", "padding removes the whole output"))?;
    let geom = ConvGeom::new(cout, oh, ow, sw[2], sw[3], stride, padding, 1)
        .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
        .ok_or_else(|| shape_err("conv_transpose2d", "inconsistent geometry"))?;
    Ok(ConvTPlan {
        batch: sx[0],
        cin: sx[1],
        cout,
        geom,
    })
}
