//! Named parameter storage and the layers built on top of it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Train mode uses batch statistics and updates running buffers; eval mode
/// reads the running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight.
    Weight,
    /// State that is saved but never optimized (running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<T: Element> {
    name: String,
    value: Tensor<T>,
    kind: ParamKind,
    trainable: bool,
}

/// Flat, name-addressed collection of parameters and buffers.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Element = f32> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            kind,
            trainable: kind == ParamKind::Weight,
        });
        id
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == ParamKind::Weight && e.trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match {:?}",
                e.name,
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    /// Total learnable scalar count (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.index.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix)).map(|(_, &id)| id)
    }

    pub fn apply_buffer_updates(&mut self, graph: &mut Graph<T>) -> Result<()> {
        for (id, value) in graph.take_buffer_updates() {
            self.set_value(id, value)?;
        }
        Ok(())
    }

    /// Named entries in insertion order, for checkpointing.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites every entry under `prefix` from `source`, where source
    /// names are taken relative to `prefix`. Missing names are an error.
    pub fn load_prefixed(&mut self, prefix: &str, source: &BTreeMap<String, Tensor<T>>) -> Result<usize> {
        let ids: Vec<ParamId> = self.ids_with_prefix(prefix).collect();
        for &id in &ids {
            let rel = self.entries[id.0].name[prefix.len()..].to_string();
            let t = source
                .get(&rel)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {rel}")))?;
            self.set_value(id, t.clone())?;
        }
        Ok(ids.len())
    }

    /// SHA-256 over the names and raw values of the given entries.
    pub fn fingerprint(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for id in ids {
            let e = &self.entries[id.0];
            hasher.update(e.name.as_bytes());
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }
}

/// Weight initializers. All draws come from the caller's generator.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    Zeros,
    Ones,
}

impl Init {
    pub fn build<T: Element, R: Rng>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => normal_tensor(shape, std, rng),
            Init::HeNormal => normal_tensor(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
        }
    }
}

fn normal_tensor<T: Element, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

impl Conv2d {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, init: Init, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let weight = store.add_weight(format!("{name}.weight"), init.build(&shape, fan_in, rng));
        let bias = spec
            .bias
            .then(|| store.add_weight(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Self {
            weight,
            bias,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, init: Init, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let shape = [spec.in_channels, spec.out_channels, spec.kernel, spec.kernel];
        let weight = store.add_weight(format!("{name}.weight"), init.build(&shape, fan_in, rng));
        let bias = spec
            .bias
            .then(|| store.add_weight(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels])));
        Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = self.bias.map(|b| g.param(ps, b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_weight(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_weight(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        match mode {
            Mode::Eval => g.norm_fixed_stats(
                x,
                Some(gamma),
                Some(beta),
                ps.value(self.running_mean).data(),
                ps.value(self.running_var).data(),
                BN_EPS,
            ),
            Mode::Train => {
                let count = {
                    let (b, _, h, w) = g.value(x).dims4()?;
                    b * h * w
                };
                let (y, mean, var) = g.norm_batch_stats(x, Some(gamma), Some(beta), false, BN_EPS)?;
                let m = T::from_f64_lossy(BN_MOMENTUM);
                let keep = T::one() - m;
                // Running variance tracks the unbiased estimate.
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let rm: Vec<T> = ps
                    .value(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| r * keep + b * m)
                    .collect();
                let rv: Vec<T> = ps
                    .value(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| r * keep + b * T::from_f64_lossy(unbias) * m)
                    .collect();
                g.push_buffer_update(self.running_mean, Tensor::new(vec![self.channels], rm)?);
                g.push_buffer_update(self.running_var, Tensor::new(vec![self.channels], rv)?);
                Ok(y)
            }
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Parameter-free instance normalization.
pub fn instance_norm<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    Ok(g.norm_batch_stats(x, None, None, true, BN_EPS)?.0)
}
