//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass
//! together with its output value. [`Graph::backward`] then walks the tape in
//! reverse, propagating a seed gradient to every node that requires one.
//! Nodes are append-only, so the tape order is already a topological order.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvDims, ConvGeom};
use crate::kernels::gemm::{gemm, MatRef};
use crate::kernels::layout::{inverse_perm, permute, Broadcast};
use crate::kernels::norm;
use crate::kernels::pool::{self, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor inside a [`crate::nn::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
    Silu,
    Sigmoid,
    Gelu,
}

impl Activation {
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2)),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => (x > 0.0) as u8 as f32,
            Activation::Relu6 => (x > 0.0 && x < 6.0) as u8 as f32,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() * 0.398_942_3;
                cdf + x * pdf
            }
        }
    }
}

/// Statistics source for per-channel (batch) normalization.
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [f32], var: &'a [f32] },
}

/// Batch mean and unbiased variance observed in a training-mode normalization.
pub struct ObservedMoments {
    pub mean: Vec<f32>,
    pub var_unbiased: Vec<f32>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        invstd: Vec<f32>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    BroadcastAdd {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    BroadcastMul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Unary {
        x: Var,
        act: Activation,
    },
    Softmax {
        x: Var,
    },
    MeanAxis {
        x: Var,
        n: usize,
        inner: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
        planes: usize,
        plane_in: usize,
    },
    AvgPool {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        geom: PoolGeom,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], retained for leaves and taps.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
    taps: Vec<(String, Var)>,
}

impl Graph {
    /// A fresh tape. `training` enables dropout and batch statistics;
    /// `seed` drives dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
            buffer_updates: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Graph::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param_leaf(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Names an intermediate value so its activation and gradient can be read back.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.iter().rev().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = ConvDims::new(self.shape(x), self.shape(w), geom)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.co] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.shape(b),
                    dims.co
                )));
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(dims.out_shape(), out), Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Per-channel normalization of `[n, c, ...]` with affine `gamma`, `beta`.
    /// In batch mode also returns the observed batch moments.
    pub fn channel_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: f32,
    ) -> Result<(Var, Option<ObservedMoments>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("channel norm needs [n, c, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("channel norm affine does not match {c} channels")));
        }
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let (m, v) = norm::channel_moments(xv, n, c, plane);
                (m, v, true)
            }
            NormStats::Running { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = norm::channel_affine(
            xv,
            c,
            plane,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let observed = batch_stats.then(|| {
            let count = (n * plane) as f32;
            let corr = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            ObservedMoments {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|v| v * corr).collect(),
            }
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(shape, y),
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
            rg,
        );
        Ok((v, observed))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer norm of a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!("layer norm affine does not match width {d}")));
        }
        let (y, mean, rstd) = norm::layer_norm_forward(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().ok_or_else(|| Error::Shape("linear of a scalar".into()))?;
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::Shape(format!("linear weight {ws:?} does not accept input {xs:?}")));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape("linear bias width mismatch".into()));
            }
        }
        let m = self.value(x).numel() / din;
        let mut y = vec![0.0f32; m * dout];
        gemm(
            m,
            din,
            dout,
            1.0,
            MatRef::rm(self.value(x).data(), din),
            MatRef::tr(self.value(w).data(), din),
            0.0,
            &mut y,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y), Op::Linear { x, w, b }, rg))
    }

    /// Batched matrix product over the last two axes, optionally transposing
    /// either operand. Leading axes must agree exactly.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!("matmul cannot combine {sa:?} and {sb:?}")));
        }
        let r = sa.len();
        let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims differ: {sa:?} vs {sb:?}")));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = vec![0.0f32; batch * m * n];
        y.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            let ab = &av[i * m * k..][..m * k];
            let bb = &bv[i * k * n..][..k * n];
            let aref = if ta { MatRef::tr(ab, m) } else { MatRef::rm(ab, k) };
            let bref = if tb { MatRef::tr(bb, k) } else { MatRef::rm(bb, n) };
            gemm(m, k, n, 1.0, aref, bref, 0.0, c);
        });
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.rg(a) || self.rg(b);
        if self.shape(a) == self.shape(b) {
            let y: Vec<f32> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let shape = self.shape(a).to_vec();
            return Ok(self.push(Tensor::new(shape, y), Op::Add { a, b }, rg));
        }
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0f32; bc.numel()];
        bc.for_each(|o, ia, ib| y[o] = av[ia] + bv[ib]);
        let shape = bc.out_shape.clone();
        Ok(self.push(Tensor::new(shape, y), Op::BroadcastAdd { a, b, bc }, rg))
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0f32; bc.numel()];
        bc.for_each(|o, ia, ib| y[o] = av[ia] * bv[ib]);
        let shape = bc.out_shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y), Op::BroadcastMul { a, b, bc }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let t = self.value(x);
        let y: Vec<f32> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y), Op::Scale { x, c }, rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let t = self.value(x);
        let mut y = vec![0.0f32; t.numel()];
        y.par_chunks_mut(4096)
            .zip(t.data().par_chunks(4096))
            .for_each(|(o, i)| {
                for (o, &v) in o.iter_mut().zip(i) {
                    *o = act.apply(v);
                }
            });
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y), Op::Unary { x, act }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu6)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let mut y = t.data().to_vec();
        y.par_chunks_mut(d).for_each(|row| {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            let inv = 1.0 / s;
            row.iter_mut().for_each(|v| *v *= inv);
        });
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y), Op::Softmax { x }, rg)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean over axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = vec![0.0f32; outer * inner];
        let inv = 1.0 / n as f32;
        for o in 0..outer {
            let dst = &mut y[o * inner..][..inner];
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, y), Op::MeanAxis { x, n, inner }, rg))
    }

    /// Mean over all spatial positions of `[n, c, h, w]`, giving `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global pooling expects NCHW, got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.mean_axis(flat, 2)
    }

    pub fn max_pool2d(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] + 2 * geom.pad < geom.kernel || s[3] + 2 * geom.pad < geom.kernel {
            return Err(Error::Shape(format!("max pool cannot apply to {s:?}")));
        }
        let planes = s[0] * s[1];
        let (y, arg) = pool::max_pool_forward(self.value(x).data(), planes, s[2], s[3], geom);
        let shape = vec![s[0], s[1], geom.out_len(s[2]), geom.out_len(s[3])];
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::MaxPool {
                x,
                arg,
                planes,
                plane_in: s[2] * s[3],
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, geom: PoolGeom) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || geom.pad != 0 || s[2] < geom.kernel || s[3] < geom.kernel {
            return Err(Error::Shape(format!("avg pool cannot apply to {s:?}")));
        }
        let planes = s[0] * s[1];
        let y = pool::avg_pool_forward(self.value(x).data(), planes, s[2], s[3], geom);
        let shape = vec![s[0], s[1], geom.out_len(s[2]), geom.out_len(s[3])];
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::AvgPool {
                x,
                planes,
                h: s[2],
                w: s[3],
                geom,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut parts = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::Shape(format!("concat shape {s:?} incompatible with {first:?}")));
            }
            parts.push((v, s[axis]));
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                y.extend_from_slice(&self.value(v).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::new(shape, y), Op::Concat { parts, outer, inner }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len_in = s[axis];
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&xv[(o * len_in + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::Slice {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", t.shape())));
        }
        let y = t.reshape(shape.to_vec());
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != s.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {s:?}")));
        }
        let (y, shape) = permute(self.value(x).data(), &s, perm);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, y),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `out.flat[i] = x.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i as usize >= n) {
            return Err(Error::Shape("gather index does not fit".into()));
        }
        let xv = self.value(x).data();
        let y: Vec<f32> = index.iter().map(|&i| xv[i as usize]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape.to_vec(), y), Op::Gather { x, index }, rg))
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let t = self.value(x);
        let y: Vec<f32> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y), Op::Dropout { x, mask }, rg)
    }

    /// Propagates `seed` (the gradient of some scalar objective with respect
    /// to `root`) back through the tape.
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(Error::Shape(format!(
                "seed gradient {:?} does not match root {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        let tapped: Vec<usize> = self.taps.iter().map(|(_, v)| v.0).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) || tapped.contains(&i) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(Tensor::new(self.shape(v).to_vec(), g)),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let r = conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    dims,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = r.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let r = norm::channel_norm_backward(
                    self.value(*x).data(),
                    gd,
                    n,
                    c,
                    plane,
                    mean,
                    invstd,
                    self.value(*gamma).data(),
                    *batch_stats,
                    self.rg(*x),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, r.dgamma);
                self.accumulate(grads, *beta, r.dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *self.shape(*x).last().unwrap();
                let (dx, dg, db) = norm::layer_norm_backward(
                    self.value(*x).data(),
                    gd,
                    d,
                    self.value(*gamma).data(),
                    mean,
                    rstd,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let m = gd.len() / dout;
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; m * din];
                    gemm(
                        m,
                        dout,
                        din,
                        1.0,
                        MatRef::rm(gd, dout),
                        MatRef::rm(self.value(*w).data(), din),
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; dout * din];
                    gemm(
                        dout,
                        m,
                        din,
                        1.0,
                        MatRef::tr(gd, dout),
                        MatRef::rm(self.value(*x).data(), din),
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0f32; dout];
                        for row in gd.chunks(dout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut da = vec![0.0f32; batch * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, out)| {
                        let bb = &bv[i * k * n..][..k * n];
                        let gb = &gd[i * m * n..][..m * n];
                        if !ta {
                            let bt = if tb { MatRef::rm(bb, k) } else { MatRef::tr(bb, n) };
                            gemm(m, n, k, 1.0, MatRef::rm(gb, n), bt, 0.0, out);
                        } else {
                            let bop = if tb { MatRef::tr(bb, k) } else { MatRef::rm(bb, n) };
                            gemm(k, n, m, 1.0, bop, MatRef::tr(gb, n), 0.0, out);
                        }
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; batch * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(i, out)| {
                        let ab = &av[i * m * k..][..m * k];
                        let gb = &gd[i * m * n..][..m * n];
                        if !tb {
                            let at = if ta { MatRef::rm(ab, m) } else { MatRef::tr(ab, k) };
                            gemm(k, m, n, 1.0, at, MatRef::rm(gb, n), 0.0, out);
                        } else {
                            let aop = if ta { MatRef::tr(ab, m) } else { MatRef::rm(ab, k) };
                            gemm(n, m, k, 1.0, MatRef::tr(gb, n), aop, 0.0, out);
                        }
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::BroadcastAdd { a, b, bc } => {
                if self.rg(*a) {
                    let mut da = vec![0.0f32; self.value(*a).numel()];
                    bc.for_each(|o, ia, _| da[ia] += gd[o]);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; self.value(*b).numel()];
                    bc.for_each(|o, _, ib| db[ib] += gd[o]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BroadcastMul { a, b, bc } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let mut da = vec![0.0f32; av.len()];
                    bc.for_each(|o, ia, ib| da[ia] += gd[o] * bv[ib]);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; bv.len()];
                    bc.for_each(|o, ia, ib| db[ib] += gd[o] * av[ia]);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect());
            }
            Op::Unary { x, act } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let mut dx = vec![0.0f32; xv.len()];
                dx.par_chunks_mut(4096).enumerate().for_each(|(ci, out)| {
                    let off = ci * 4096;
                    for (j, o) in out.iter_mut().enumerate() {
                        let i = off + j;
                        *o = gd[i] * act.derivative(xv[i], yv[i]);
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let yv = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0f32; yv.len()];
                dx.par_chunks_mut(d).enumerate().for_each(|(r, out)| {
                    let y = &yv[r * d..][..d];
                    let gr = &gd[r * d..][..d];
                    let dot: f32 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        out[i] = y[i] * (gr[i] - dot);
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAxis { x, n, inner } => {
                let (n, inner) = (*n, *inner);
                let outer = gd.len() / inner;
                let inv = 1.0 / n as f32;
                let mut dx = vec![0.0f32; outer * n * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..][..inner];
                    for j in 0..n {
                        let dst = &mut dx[(o * n + j) * inner..][..inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool {
                x,
                arg,
                planes,
                plane_in,
            } => {
                let dx = pool::max_pool_backward(gd, arg, *planes, *plane_in);
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, planes, h, w, geom } => {
                let dx = pool::avg_pool_backward(gd, *planes, *h, *w, *geom);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in parts {
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            dv.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                let mut dx = vec![0.0f32; outer * len_in * inner];
                for o in 0..*outer {
                    dx[(o * len_in + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Permute { x, perm } => {
                let (dx, _) = permute(gd, node.value.shape(), &inverse_perm(perm));
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (gv, &i) in gd.iter().zip(index.iter()) {
                    dx[i as usize] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, gd.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar objective `sum(y * r)` for a fixed random `r`, used to check
    /// every op's backward pass against central differences in f64-ish precision.
    fn check_grad(
        inputs: &[Tensor],
        build: impl Fn(&mut Graph, &[Var]) -> Var,
        tol: f32,
    ) {
        let mut g = Graph::new(true, 7);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let n_out = g.value(out).numel();
        let r: Vec<f32> = (0..n_out).map(|i| ((i as f32) * 0.618).sin()).collect();
        let seed = Tensor::new(g.shape(out).to_vec(), r.clone());
        let grads = g.backward(out, seed).unwrap();
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new(true, 7);
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone(), false)).collect();
            let out = build(&mut g, &vars);
            g.value(out).data().iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("input gradient");
            for i in (0..t.numel()).step_by((t.numel() / 7).max(1)) {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = ((eval(&plus) - eval(&minus)) / (2.0 * h as f64)) as f32;
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= tol * (1.0 + fd.abs()),
                    "input {k} elem {i}: analytic {a} vs numeric {fd}"
                );
            }
        }
    }

    fn rand_tensor(shape: &[usize], seed: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| ((i as f32 + seed) * 1.37).sin()).collect())
    }

    #[test]
    fn grad_linear_and_matmul() {
        check_grad(
            &[rand_tensor(&[3, 4], 0.1), rand_tensor(&[5, 4], 0.2), rand_tensor(&[5], 0.3)],
            |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
            2e-2,
        );
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
            check_grad(
                &[rand_tensor(&sa, 0.4), rand_tensor(&sb, 0.5)],
                |g, v| g.matmul(v[0], v[1], ta, tb).unwrap(),
                2e-2,
            );
        }
    }

    #[test]
    fn grad_norms() {
        check_grad(
            &[rand_tensor(&[3, 2, 2, 3], 0.6), rand_tensor(&[2], 0.7), rand_tensor(&[2], 0.8)],
            |g, v| g.channel_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5).unwrap().0,
            3e-2,
        );
        check_grad(
            &[rand_tensor(&[4, 6], 0.9), rand_tensor(&[6], 1.0), rand_tensor(&[6], 1.1)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            3e-2,
        );
    }

    #[test]
    fn grad_activations_softmax_and_layout() {
        for act in [Activation::Silu, Activation::Sigmoid, Activation::Gelu] {
            check_grad(&[rand_tensor(&[10], 1.2)], |g, v| g.activation(v[0], act), 2e-2);
        }
        check_grad(&[rand_tensor(&[3, 5], 1.3)], |g, v| g.softmax(v[0]), 2e-2);
        check_grad(
            &[rand_tensor(&[2, 3, 4], 1.4)],
            |g, v| {
                let p = g.permute(v[0], &[1, 0, 2]).unwrap();
                let s = g.slice(p, 2, 1, 2).unwrap();
                g.mean_axis(s, 1).unwrap()
            },
            2e-2,
        );
        check_grad(
            &[rand_tensor(&[2, 3, 2], 1.5), rand_tensor(&[2, 1, 2], 1.6)],
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1).unwrap();
                let m = g.mul(c, v[1]).unwrap();
                g.add(m, v[1]).unwrap()
            },
            2e-2,
        );
        check_grad(
            &[rand_tensor(&[6], 1.7)],
            |g, v| g.gather(v[0], Arc::new(vec![5, 0, 0, 3]), &[2, 2]).unwrap(),
            2e-2,
        );
    }

    #[test]
    fn grad_conv_and_pools() {
        check_grad(
            &[rand_tensor(&[2, 2, 5, 5], 1.8), rand_tensor(&[3, 2, 3, 3], 1.9), rand_tensor(&[3], 2.0)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 1)).unwrap(),
            2e-2,
        );
        // distinct values spaced well beyond the step so max-pool has no kinks
        let spaced = Tensor::new([1, 2, 4, 4], (0..32).map(|i| ((i * 13) % 32) as f32 * 0.1).collect());
        check_grad(
            &[spaced],
            |g, v| {
                let a = g.avg_pool2d(v[0], PoolGeom { kernel: 2, stride: 2, pad: 0 }).unwrap();
                let m = g.max_pool2d(v[0], PoolGeom { kernel: 3, stride: 2, pad: 1 }).unwrap();
                g.add(a, m).unwrap()
            },
            2e-2,
        );
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new(true, 0);
        let x = g.input(rand_tensor(&[2, 3], 0.0), false);
        let w = g.input(rand_tensor(&[4, 3], 1.0), false);
        let y = g.linear(x, w, None).unwrap();
        assert!(!g.requires_grad(y));
        let grads = g.backward(y, Tensor::full([2, 4], 1.0)).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::inference();
        let x = g.input(rand_tensor(&[8], 0.0), false);
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
    }
}
