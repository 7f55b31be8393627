//! Parameter storage and the handful of layers every architecture is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
pub use crate::graph::ParamId;
use crate::graph::{Graph, NormStats, Var};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; `trainable` says whether optimizers may touch it.
    Weight { trainable: bool },
    /// Non-learnable state such as normalization running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named tensors of one model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, tensor: Tensor, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, tensor, kind });
        id
    }

    /// Store of weights from a name map, in sorted name order.
    pub fn from_map(map: HashMap<String, Tensor>) -> Self {
        let mut items: Vec<_> = map.into_iter().collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        let mut store = ParamStore::new();
        for (name, t) in items {
            store.add_weight(name, t);
        }
        store
    }

    pub fn add_weight(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, ParamKind::Weight { trainable: true })
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        matches!(self.entries[id.0].kind, ParamKind::Weight { trainable: true })
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        if let ParamKind::Weight { .. } = self.entries[id.0].kind {
            self.entries[id.0].kind = ParamKind::Weight { trainable };
        }
    }

    /// Sets trainability of every weight by name predicate.
    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for e in &mut self.entries {
            if let ParamKind::Weight { .. } = e.kind {
                e.kind = ParamKind::Weight {
                    trainable: pred(&e.name),
                };
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, ParamKind::Weight { trainable: true }))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, ParamKind::Weight { .. }))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Puts a parameter on the tape; trainable weights require gradients.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        let trainable = self.is_trainable(id);
        g.param_leaf(id, self.get(id), trainable)
    }

    /// Replaces a tensor by name, checking the shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))?;
        if self.get(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.get(id).shape(),
                tensor.shape()
            )));
        }
        *self.get_mut(id) = tensor;
        Ok(())
    }

    /// Applies running-statistic updates recorded during a training forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.entries[id.0].tensor = t;
        }
    }
}

/// Samples weights from a seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("valid std");
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(self.rng)).collect())
    }

    /// Normal truncated to two standard deviations by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..n)
            .map(|_| loop {
                let v = dist.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let n: usize = shape.iter().product();
        if bound == 0.0 {
            return Tensor::zeros(shape.to_vec());
        }
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(self.rng)).collect())
    }

    pub fn seed(&mut self) -> u64 {
        self.rng.random()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero bias.
    FanInUniform,
    /// Truncated normal with std 0.02, zero bias (transformer convention).
    TruncNormal,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_out = cout * kernel * kernel / groups;
        let w = init.normal(&[cout, cin / groups, kernel, kernel], (2.0 / fan_out as f32).sqrt());
        let weight = store.add_weight(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_weight(format!("{name}.bias"), Tensor::zeros([cout])));
        Conv2d {
            weight,
            bias,
            geom: ConvGeom::new(stride, pad, groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// 2-D batch normalization with running statistics.
///
/// Batch statistics are used only while the graph is training *and* the
/// layer's affine weights are trainable; a frozen layer always normalizes
/// with its running statistics and never updates them.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_weight(format!("{name}.weight"), Tensor::full([channels], 1.0)),
            beta: store.add_weight(format!("{name}.bias"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        let batch_mode = g.is_training() && store.is_trainable(self.gamma);
        if !batch_mode {
            let stats = NormStats::Running {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            };
            return Ok(g.channel_norm(x, gamma, beta, stats, self.eps)?.0);
        }
        let (y, observed) = g.channel_norm(x, gamma, beta, NormStats::Batch, self.eps)?;
        if let Some(m) = observed {
            let mom = self.momentum;
            let blend = |old: &Tensor, new: &[f32]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - mom) * o + mom * n)
                    .collect();
                Tensor::new(old.shape().to_vec(), data)
            };
            let mean = blend(store.get(self.running_mean), &m.mean);
            let var = blend(store.get(self.running_var), &m.var_unbiased);
            g.record_buffer_update(self.running_mean, mean);
            g.record_buffer_update(self.running_var, var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        scheme: LinearInit,
    ) -> Self {
        let w = match scheme {
            LinearInit::FanInUniform => init.uniform(&[dout, din], 1.0 / (din as f32).sqrt()),
            LinearInit::TruncNormal => init.trunc_normal(&[dout, din], 0.02),
        };
        let weight = store.add_weight(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_weight(format!("{name}.bias"), Tensor::zeros([dout])));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f32) -> Self {
        LayerNorm {
            gamma: store.add_weight(format!("{name}.weight"), Tensor::full([width], 1.0)),
            beta: store.add_weight(format!("{name}.bias"), Tensor::zeros([width])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_batchnorm_uses_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        let x = Tensor::new([2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);

        let mut g = Graph::new(true, 0);
        let xv = g.input(x.clone(), false);
        bn.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.take_buffer_updates().len(), 2);

        store.set_trainable_where(|_| false);
        let mut g = Graph::new(true, 0);
        let xv = g.input(x.clone(), false);
        let y = bn.forward(&mut g, &store, xv).unwrap();
        assert!(g.take_buffer_updates().is_empty());
        // running stats are (0, 1): output equals input up to eps
        assert!(g.value(y).max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn counts_follow_trainability() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        Linear::new(&mut store, &mut init, "a", 3, 4, true, LinearInit::FanInUniform);
        BatchNorm2d::new(&mut store, "bn", 4);
        assert_eq!(store.trainable_count(), 3 * 4 + 4 + 8);
        store.set_trainable_where(|n| n.starts_with("a."));
        assert_eq!(store.trainable_count(), 16);
        assert_eq!(store.weight_count(), 24);
    }
}
