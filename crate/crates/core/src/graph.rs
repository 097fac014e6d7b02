//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! topological order for the backward pass. Parameters enter the tape by
//! copy from a [`ParamStore`]; gradients come back keyed by [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// `ln(clamp(x, eps, 1 - eps))`; zero gradient outside the clamp.
    LogClamped(f64),
    Abs,
    Square,
    /// `a * x + b`
    Affine(f64, f64),
}

enum Op<T: Element> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        out_c: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        in_c: usize,
    },
    Norm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        per_sample: bool,
        batch_stats: bool,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Add(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Multiply by a constant: same shape as `x`, or one factor per `(sample, channel)`.
    MulConst {
        x: Var,
        factor: Tensor<T>,
        per_plane: bool,
    },
    /// Multiply each channel by a learnable scalar, `w` has shape `[C]`.
    ChannelScale {
        x: Var,
        w: Var,
    },
    Concat {
        xs: Vec<Var>,
        channels: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Running-statistic writes produced by train-mode batch normalization,
/// to be applied to the store once the step is committed.
pub type BufferUpdate<T> = (ParamId, Tensor<T>);

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_grads: bool,
    buffer_updates: Vec<BufferUpdate<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass.
pub struct Gradients<T: Element> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_grads: true,
            buffer_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::var`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Whether parameters added from now on receive gradients. Turning this
    /// off treats later parameters as constants while still propagating
    /// gradients through them to earlier nodes.
    pub fn set_param_grads(&mut self, enabled: bool) {
        self.param_grads = enabled;
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = self.param_grads && store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), needs);
        self.params.insert(id, v);
        v
    }

    pub fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_c, h, wd) = self.value(x).dims4()?;
        let (out_c, w_in, kh, kw) = self.value(w).dims4()?;
        if w_in != in_c || kh != kw {
            return Err(Error::Input(format!(
                "conv2d: weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let geom = ConvGeom::new(in_c, h, wd, kh, stride, pad)
            .ok_or_else(|| Error::Input(format!("conv2d: kernel {kh} larger than padded input {h}x{wd}")))?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out_c,
        );
        let t = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, batch, out_c }, needs))
    }

    /// Transposed convolution; weight layout `[in_c, out_c, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, in_c, h, wd) = self.value(x).dims4()?;
        let (w_in, out_c, kh, kw) = self.value(w).dims4()?;
        if w_in != in_c || kh != kw {
            return Err(Error::Input("conv_transpose2d: weight does not fit input".into()));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        if oh <= 2 * pad || ow <= 2 * pad {
            return Err(Error::Input("conv_transpose2d: padding consumes the output".into()));
        }
        let geom = ConvGeom::new(out_c, oh - 2 * pad, ow - 2 * pad, kh, stride, pad)
            .ok_or_else(|| Error::Input("conv_transpose2d: bad geometry".into()))?;
        debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            batch,
            in_c,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![batch, out_c, geom.height, geom.width], out)?;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom, batch, in_c }, needs))
    }

    /// Normalization using statistics of `x` itself. Per channel over the
    /// batch (`per_sample = false`, batch norm) or per sample-channel plane
    /// (instance norm). Returns the output and the biased per-group variance
    /// alongside the mean.
    pub fn norm_batch_stats(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        per_sample: bool,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let dims = self.value(x).dims4()?;
        let (mean, var) = kernels::group_stats(self.value(x).data(), dims, per_sample);
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let y = kernels::normalize_apply(
            self.value(x).data(),
            dims,
            per_sample,
            &mean,
            &inv_std,
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let needs = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        let v = self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                per_sample,
                batch_stats: true,
                mean: mean.clone(),
                inv_std,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Per-channel normalization with fixed (running) statistics.
    pub fn norm_fixed_stats(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(Error::Input("norm: statistics do not match channel count".into()));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let y = kernels::normalize_apply(
            self.value(x).data(),
            dims,
            false,
            mean,
            &inv_std,
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let needs = self.ng(x) || gamma.is_some_and(|g| self.ng(g)) || beta.is_some_and(|b| self.ng(b));
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                per_sample: false,
                batch_stats: false,
                mean: mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: Box<dyn Fn(T) -> T> = match kind {
            Unary::Relu => Box::new(|v: T| if v > T::zero() { v } else { T::zero() }),
            Unary::LeakyRelu(s) => {
                let s = T::from_f64_lossy(s);
                Box::new(move |v: T| if v > T::zero() { v } else { v * s })
            }
            Unary::Tanh => Box::new(|v: T| v.tanh()),
            Unary::Sigmoid => Box::new(|v: T| T::one() / (T::one() + (-v).exp())),
            Unary::LogClamped(eps) => {
                let lo = T::from_f64_lossy(eps);
                let hi = T::from_f64_lossy(1.0 - eps);
                Box::new(move |v: T| v.max(lo).min(hi).ln())
            }
            Unary::Abs => Box::new(|v: T| v.abs()),
            Unary::Square => Box::new(|v: T| v * v),
            Unary::Affine(a, b) => {
                let (a, b) = (T::from_f64_lossy(a), T::from_f64_lossy(b));
                Box::new(move |v: T| a * v + b)
            }
        };
        let t = self.value(x).map(f);
        let needs = self.ng(x);
        self.push(t, Op::Unary { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Affine(s, 0.0))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Input("add of zero operands".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let mut acc = self.value(first).clone();
        for &v in &xs[1..] {
            same_shape(&acc, self.value(v), "add")?;
            for (a, &b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(acc, Op::Add(xs.to_vec()), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let t = self.value(x).zip_map(&factor, |a, b| a * b)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::MulConst { x, factor, per_plane: false }, needs))
    }

    /// Product with one constant per `(sample, channel)` plane; `factor` has
    /// shape `[B, C]`.
    pub fn mul_plane_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if factor.shape() != [b, c] {
            return Err(Error::Input(format!(
                "plane factor shape {:?} does not match [{b}, {c}]",
                factor.shape()
            )));
        }
        let plane = h * w;
        let mut t = self.value(x).clone();
        for (p, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            let f = factor.data()[p];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.ng(x);
        Ok(self.push(t, Op::MulConst { x, factor, per_plane: true }, needs))
    }

    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (_, c, h, wd) = self.value(x).dims4()?;
        if self.value(w).numel() != c {
            return Err(Error::Input(format!(
                "channel scale of length {} for {c} channels",
                self.value(w).numel()
            )));
        }
        let plane = h * wd;
        let weights = self.value(w).data().to_vec();
        let mut t = self.value(x).clone();
        for (p, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
            let f = weights[p % c];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let needs = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::ChannelScale { x, w }, needs))
    }

    /// Stacks along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Input("concat of zero operands".into()))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::Input(format!(
                    "concat: {:?} does not match {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                )));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&v, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(v).data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let t = Tensor::new(vec![b, total, h, w], data)?;
        let needs = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), channels }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_nearest_forward(self.value(x).data(), dims, factor);
        let t = Tensor::new(vec![dims.0, dims.1, dims.2 * factor, dims.3 * factor], out)?;
        let needs = self.ng(x);
        Ok(self.push(t, Op::Upsample { x, factor }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(x), needs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Input(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.leaves.insert(Var(idx), dy);
                }
                Op::Param(id) => {
                    out.params.insert(*id, dy);
                }
                op => self.backward_op(op, &node.value, &dy, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves handled by caller"),
            Op::Conv2d { x, w, b, geom, batch, out_c } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = self.ng(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut dw = self.ng(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut db = b.filter(|b| self.ng(*b)).map(|_| vec![T::zero(); *out_c]);
                kernels::conv2d_backward(
                    xv.data(),
                    *batch,
                    geom,
                    wv.data(),
                    *out_c,
                    dy.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, Tensor::new(vec![*out_c], db)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch, in_c } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut dx = self.ng(*x).then(|| vec![T::zero(); xv.numel()]);
                let mut dw = self.ng(*w).then(|| vec![T::zero(); wv.numel()]);
                let mut db = b.filter(|b| self.ng(*b)).map(|_| vec![T::zero(); geom.channels]);
                kernels::conv_transpose2d_backward(
                    xv.data(),
                    *batch,
                    *in_c,
                    geom,
                    wv.data(),
                    dy.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, Tensor::new(vec![geom.channels], db)?);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                per_sample,
                batch_stats,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let dims = xv.dims4()?;
                let gv = gamma.map(|g| self.value(g).data());
                let (dx, dgamma, dbeta) = if *batch_stats {
                    kernels::normalize_backward_batch_stats(xv.data(), dims, *per_sample, mean, inv_std, gv, dy.data())
                } else {
                    let (b, c, h, w) = dims;
                    let plane = h * w;
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                            let k = inv_std[ci] * gv.map_or(T::one(), |g| g[ci]);
                            for ((o, &xx), &g) in dx[r.clone()].iter_mut().zip(&xv.data()[r.clone()]).zip(&dy.data()[r])
                            {
                                *o = g * k;
                                dgamma[ci] += g * (xx - mean[ci]) * inv_std[ci];
                                dbeta[ci] += g;
                            }
                        }
                    }
                    (dx, dgamma, dbeta)
                };
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                if let Some(g) = gamma {
                    self.accumulate(grads, *g, Tensor::new(vec![dgamma.len()], dgamma)?);
                }
                if let Some(b) = beta {
                    self.accumulate(grads, *b, Tensor::new(vec![dbeta.len()], dbeta)?);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let d: Vec<T> = match *kind {
                    Unary::Relu => xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::LeakyRelu(s) => {
                        let s = T::from_f64_lossy(s);
                        xv.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
                            .collect()
                    }
                    Unary::Tanh => out
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| g * (T::one() - y * y))
                        .collect(),
                    Unary::Sigmoid => out
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                    Unary::LogClamped(eps) => {
                        let lo = T::from_f64_lossy(eps);
                        let hi = T::from_f64_lossy(1.0 - eps);
                        xv.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&v, &g)| if v < lo || v > hi { T::zero() } else { g / v })
                            .collect()
                    }
                    Unary::Abs => xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| g * v.signum() * if v == T::zero() { T::zero() } else { T::one() })
                        .collect(),
                    Unary::Square => xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| g * (v + v))
                        .collect(),
                    Unary::Affine(a, _) => {
                        let a = T::from_f64_lossy(a);
                        dy.data().iter().map(|&g| g * a).collect()
                    }
                };
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Add(xs) => {
                for &v in xs {
                    self.accumulate(grads, v, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, dy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, dy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::MulConst { x, factor, per_plane } => {
                let d = if *per_plane {
                    let plane = dy.numel() / factor.numel();
                    let mut d = dy.clone();
                    for (p, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                        let f = factor.data()[p];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    d
                } else {
                    dy.zip_map(factor, |g, f| g * f)?
                };
                self.accumulate(grads, *x, d);
            }
            Op::ChannelScale { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (_, c, h, wd) = xv.dims4()?;
                let plane = h * wd;
                if self.ng(*x) {
                    let mut d = dy.clone();
                    for (p, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                        let f = wv.data()[p % c];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    self.accumulate(grads, *x, d);
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); c];
                    for (p, (xc, gc)) in xv.data().chunks(plane).zip(dy.data().chunks(plane)).enumerate() {
                        dw[p % c] += xc.iter().zip(gc).map(|(&a, &g)| a * g).sum::<T>();
                    }
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
            Op::Concat { xs, channels } => {
                let (b, total, h, w) = dy.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for (&v, &c) in xs.iter().zip(channels) {
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            d.extend_from_slice(&dy.data()[start..start + c * plane]);
                        }
                        self.accumulate(grads, v, Tensor::new(vec![b, c, h, w], d)?);
                    }
                    offset += c;
                }
            }
            Op::Upsample { x, factor } => {
                let xv = self.value(*x);
                let d = kernels::upsample_nearest_backward(dy.data(), xv.dims4()?, *factor);
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / T::from_usize(xv.numel().max(1)).unwrap_or_else(T::one);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
        }
        Ok(())
    }
}
