//! Conditional image-to-image translation between modalities.
//!
//! The generator is an encoder-decoder with skip connections whose only
//! source of noise is dropout in the three decoder levels nearest the
//! bottleneck. The discriminator scores overlapping patches of the
//! source/target pair. Images live in `[-1, 1]` inside this module.
//!
//! Parameters of both networks share one store: the generator under
//! [`GENERATOR_PREFIX`], the discriminator under [`DISCRIMINATOR_PREFIX`].

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Header};
use crate::data::{Image, TranslationPair};
use crate::error::{Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::modality::Modality;
use crate::nn::{instance_norm, Conv2d, ConvSpec, ConvTranspose2d, Init, ParamId, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const GENERATOR_PREFIX: &str = "g.";
pub const DISCRIMINATOR_PREFIX: &str = "d.";

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

const LEAK: f64 = 0.2;
const NOISE_DROPOUT: f64 = 0.5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanObjectiveConfig {
    pub lambda_l1: f64,
    pub epochs_total: usize,
    pub lr_base: f64,
    /// Epochs at `lr_base` before the linear decay to zero.
    pub lr_constant_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for GanObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            epochs_total: 200,
            lr_base: 2e-4,
            lr_constant_epochs: 100,
            batch_size: 1,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl GanObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gan: {m}")));
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad("lambda_l1 must be finite and non-negative");
        }
        if self.epochs_total == 0 || self.batch_size == 0 {
            return bad("epochs_total and batch_size must be positive");
        }
        if self.lr_constant_epochs == 0 || self.lr_constant_epochs > self.epochs_total {
            return bad("lr_constant_epochs must lie in 1..=epochs_total");
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return bad("lr_base must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Learning rate of 1-indexed epoch `e`: constant, then linear to zero at the
/// last epoch.
pub fn lr_at_epoch(e: usize, cfg: &GanObjectiveConfig) -> Result<f64> {
    if e == 0 || e > cfg.epochs_total {
        return Err(Error::Input(format!("epoch {e} outside 1..={}", cfg.epochs_total)));
    }
    if e <= cfg.lr_constant_epochs {
        return Ok(cfg.lr_base);
    }
    let decay = (cfg.epochs_total - cfg.lr_constant_epochs) as f64;
    Ok(cfg.lr_base * (cfg.epochs_total - e) as f64 / decay)
}

fn checked_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numeric(format!("discriminator score {p} is not a probability")));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

fn mean_log(scores: &[f64], f: impl Fn(f64) -> f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Input("no discriminator scores".into()));
    }
    let mut s = 0.0;
    for &p in scores {
        s += f(checked_prob(p)?).ln();
    }
    Ok(s / scores.len() as f64)
}

/// `E[log D(real)] + E[log(1 - D(fake))]` on clamped probabilities; the
/// quantity the discriminator maximizes.
pub fn cgan_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    Ok(mean_log(real, |p| p)? + mean_log(fake, |p| 1.0 - p)?)
}

/// Discriminator training loss: half the binary cross-entropy of real vs fake.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    Ok(-0.5 * cgan_loss(real, fake)?)
}

/// Non-saturating generator term `-E[log D(fake)]`.
pub fn generator_adversarial_loss(fake: &[f64]) -> Result<f64> {
    Ok(-mean_log(fake, |p| p)?)
}

/// Mean absolute difference over all elements.
pub fn l1_loss(generated: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if generated.shape() != target.shape() {
        return Err(Error::Input(format!("l1: shapes {:?} and {:?} differ", generated.shape(), target.shape())));
    }
    let n = generated.numel().max(1) as f64;
    Ok(generated.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / n)
}

pub fn total_generator_objective(adversarial: f64, l1: f64, lambda: f64) -> f64 {
    adversarial + lambda * l1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Filters of the outermost level; deeper levels double up to `8 * ngf`.
    pub ngf: usize,
    /// Stride-2 levels; the input side must be `2^depth` times an integer.
    pub depth: usize,
    pub input_size: usize,
}

impl GeneratorConfig {
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ngf: 64,
            depth: 8,
            input_size: 256,
        }
    }

    pub fn tiny(in_channels: usize, out_channels: usize) -> Self {
        Self {
            ngf: 8,
            ..Self::standard(in_channels, out_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.ngf == 0 {
            return Err(Error::Config("generator: channel counts must be positive".into()));
        }
        if self.depth < 2 || self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "generator: input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.ngf << level.min(3)
    }

    fn noisy(&self, level: usize) -> bool {
        level >= 4 && level + 1 < self.depth
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    down: Vec<Conv2d>,
    up: Vec<ConvTranspose2d>,
}

impl Generator {
    pub fn build<R: Rng>(ps: &mut ParamStore<f32>, prefix: &str, config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let mut down = Vec::with_capacity(d);
        let mut up = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { config.in_channels } else { config.width(l - 1) };
            let spec = ConvSpec::new(cin, config.width(l), 4, 2, 1).with_bias();
            down.push(Conv2d::new(ps, &format!("{prefix}down{l}"), spec, Init::Normal(INIT_STD), rng));
        }
        for l in 0..d {
            let cin = if l + 1 == d { config.width(l) } else { 2 * config.width(l) };
            let cout = if l == 0 { config.out_channels } else { config.width(l - 1) };
            let spec = ConvSpec::new(cin, cout, 4, 2, 1).with_bias();
            up.push(ConvTranspose2d::new(ps, &format!("{prefix}up{l}"), spec, Init::Normal(INIT_STD), rng));
        }
        Ok(Self {
            config: config.clone(),
            down,
            up,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `[B, in, S, S] -> [B, out, S, S]` in `[-1, 1]`. With `noise` the
    /// decoder dropout draws from it; without, dropout is off and the output
    /// is a pure function of the input.
    pub fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, x: Var, mut noise: Option<&mut dyn RngCore>) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::Input(format!(
                "generator expects {}x{s}x{s} inputs, got {c}x{h}x{w}",
                self.config.in_channels
            )));
        }
        let d = self.config.depth;
        let mut skips = Vec::with_capacity(d);
        let mut y = self.down[0].forward(g, ps, x)?;
        skips.push(y);
        for l in 1..d {
            let a = g.leaky_relu(y, LEAK);
            y = self.down[l].forward(g, ps, a)?;
            if l + 1 < d {
                y = instance_norm(g, y)?;
            }
            skips.push(y);
        }
        for l in (0..d).rev() {
            let z = if l + 1 == d { y } else { g.concat_channels(&[skips[l], y])? };
            let a = g.relu(z);
            y = self.up[l].forward(g, ps, a)?;
            if l == 0 {
                y = g.tanh(y);
                break;
            }
            y = instance_norm(g, y)?;
            if self.config.noisy(l) {
                if let Some(rng) = noise.as_deref_mut() {
                    y = dropout(g, y, NOISE_DROPOUT, rng)?;
                }
            }
        }
        Ok(y)
    }
}

/// Inverted elementwise dropout.
fn dropout(g: &mut Graph<f32>, x: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
    let keep = (1.0 / (1.0 - p)) as f32;
    let mask = Tensor::from_fn(g.value(x).shape(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    g.mul_const(x, mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Channels of the conditioning image.
    pub condition_channels: usize,
    /// Channels of the judged image.
    pub image_channels: usize,
    pub ndf: usize,
    /// Stride-2 layers after the first.
    pub n_layers: usize,
}

impl DiscriminatorConfig {
    pub fn standard(condition_channels: usize, image_channels: usize) -> Self {
        Self {
            condition_channels,
            image_channels,
            ndf: 64,
            n_layers: 3,
        }
    }

    pub fn tiny(condition_channels: usize, image_channels: usize) -> Self {
        Self {
            ndf: 8,
            ..Self::standard(condition_channels, image_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.ndf == 0 || self.n_layers == 0 {
            return Err(Error::Config("discriminator: channel and layer counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn build<R: Rng>(ps: &mut ParamStore<f32>, prefix: &str, config: &DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.n_layers;
        let width = |k: usize| config.ndf << k.min(3);
        let mut convs = Vec::with_capacity(n + 2);
        let mut cin = config.condition_channels + config.image_channels;
        for k in 0..=n {
            let stride = if k < n { 2 } else { 1 };
            let spec = ConvSpec::new(cin, width(k), 4, stride, 1).with_bias();
            convs.push(Conv2d::new(ps, &format!("{prefix}conv{k}"), spec, Init::Normal(INIT_STD), rng));
            cin = width(k);
        }
        let spec = ConvSpec::new(cin, 1, 4, 1, 1).with_bias();
        convs.push(Conv2d::new(ps, &format!("{prefix}conv{}", n + 1), spec, Init::Normal(INIT_STD), rng));
        Ok(Self {
            config: config.clone(),
            convs,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Patch probabilities `[B, 1, P, P]`. Without a condition the
    /// conditioning slot is filled with zeros, which is the unconditional
    /// discriminator on the same weights.
    pub fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, condition: Option<Var>, image: Var) -> Result<Var> {
        let (b, c, h, w) = g.value(image).dims4()?;
        if c != self.config.image_channels {
            return Err(Error::Input(format!("discriminator expects {} image channels, got {c}", self.config.image_channels)));
        }
        let cond = match condition {
            Some(v) => v,
            None => g.input(Tensor::zeros(&[b, self.config.condition_channels, h, w])),
        };
        let cc = g.value(cond).dims4()?;
        if cc != (b, self.config.condition_channels, h, w) {
            return Err(Error::Input(format!("condition shape {cc:?} does not match image {:?}", (b, c, h, w))));
        }
        let mut y = if self.config.condition_channels == 0 { image } else { g.concat_channels(&[cond, image])? };
        let last = self.convs.len() - 1;
        for (k, conv) in self.convs.iter().enumerate() {
            y = conv.forward(g, ps, y)?;
            if k == last {
                break;
            }
            if k > 0 {
                y = instance_norm(g, y)?;
            }
            y = g.leaky_relu(y, LEAK);
        }
        Ok(g.sigmoid(y))
    }
}

/// Graph form of the log terms: mean of `ln(clamp(p))`, or of
/// `ln(clamp(1 - p))` with `complement`.
pub fn mean_log_prob(g: &mut Graph<f32>, p: Var, complement: bool) -> Var {
    let q = if complement { g.unary(p, Unary::Affine(-1.0, 1.0)) } else { p };
    let l = g.unary(q, Unary::LogClamped(PROB_EPS));
    g.mean(l)
}

/// Graph form of [`l1_loss`].
pub fn l1_term(g: &mut Graph<f32>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.unary(d, Unary::Abs);
    Ok(g.mean(d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationConfig {
    pub source: Modality,
    pub target: Modality,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub objective: GanObjectiveConfig,
}

impl TranslationConfig {
    pub fn new(source: Modality, target: Modality, tiny: bool) -> Self {
        let (i, o) = (source.channels(), target.channels());
        let (generator, discriminator) = if tiny {
            (GeneratorConfig::tiny(i, o), DiscriminatorConfig::tiny(i, o))
        } else {
            (GeneratorConfig::standard(i, o), DiscriminatorConfig::standard(i, o))
        };
        Self {
            source,
            target,
            generator,
            discriminator,
            objective: GanObjectiveConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::Config(format!("translation source and target are both {}", self.source)));
        }
        let (i, o) = (self.source.channels(), self.target.channels());
        if self.generator.in_channels != i || self.generator.out_channels != o {
            return Err(Error::Config("generator channels do not match the modality pair".into()));
        }
        if self.discriminator.condition_channels != i || self.discriminator.image_channels != o {
            return Err(Error::Config("discriminator channels do not match the modality pair".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.objective.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Translator {
    pub config: TranslationConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl Translator {
    pub fn build<R: Rng>(ps: &mut ParamStore<f32>, config: &TranslationConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            generator: Generator::build(ps, GENERATOR_PREFIX, &config.generator, rng)?,
            discriminator: Discriminator::build(ps, DISCRIMINATOR_PREFIX, &config.discriminator, rng)?,
        })
    }

    pub fn generator_ids(ps: &ParamStore<f32>) -> Vec<ParamId> {
        ps.ids_with_prefix(GENERATOR_PREFIX).collect()
    }

    pub fn discriminator_ids(ps: &ParamStore<f32>) -> Vec<ParamId> {
        ps.ids_with_prefix(DISCRIMINATOR_PREFIX).collect()
    }

    /// Translates `[0, 1]` images; the output is mapped back to `[0, 1]`.
    pub fn translate(&self, ps: &ParamStore<f32>, images: &[Image], noise: Option<&mut dyn RngCore>) -> Result<Vec<Image>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        g.set_param_grads(false);
        let x = g.input(to_signed_batch(images)?);
        let y = self.generator.forward(&mut g, ps, x, noise)?;
        let out = g.value(y);
        if !out.all_finite() {
            return Err(Error::Numeric("generator produced non-finite pixels".into()));
        }
        (0..images.len())
            .map(|b| Image::from_tensor(&out.select(b)?.map(|v| 0.5 * (v + 1.0))))
            .collect()
    }

    pub fn checkpoint(&self, ps: &ParamStore<f32>) -> Result<Checkpoint<f32>> {
        let body = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint::from_store(Header::new("translator", body), ps))
    }

    /// Rebuilds the networks described by a translator checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<(Self, ParamStore<f32>)> {
        if ck.header.kind != "translator" {
            return Err(Error::Checkpoint(format!("expected a translator checkpoint, got `{}`", ck.header.kind)));
        }
        let config: TranslationConfig =
            serde_json::from_value(ck.header.body.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ps = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = Self::build(&mut ps, &config, &mut rng)?;
        let n = ps.load_prefixed("", &ck.tensors)?;
        if n != ps.len() {
            return Err(Error::Checkpoint(format!("checkpoint fills {n} of {} tensors", ps.len())));
        }
        Ok((t, ps))
    }
}

/// Stacks `[0, 1]` images into a `[-1, 1]` batch.
pub fn to_signed_batch(images: &[Image]) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = images.iter().map(|im| im.to_tensor().map(|v| 2.0 * v - 1.0)).collect();
    Tensor::stack(&items)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochGanLoss {
    pub epoch: usize,
    /// Unweighted generator L1 term.
    pub g_l1: f64,
    pub g_adv: f64,
    pub d_loss: f64,
}

/// Generator output for one batch, kept on its graph so the generator
/// update can reuse the forward pass.
pub struct FakeBatch {
    graph: Graph<f32>,
    source: Var,
    fake: Var,
}

impl FakeBatch {
    pub fn image(&self) -> &Tensor<f32> {
        self.graph.value(self.fake)
    }

    pub fn source(&self) -> &Tensor<f32> {
        self.graph.value(self.source)
    }
}

pub fn generate_batch(t: &Translator, ps: &ParamStore<f32>, source: Tensor<f32>, rng: &mut dyn RngCore) -> Result<FakeBatch> {
    let mut graph = Graph::new();
    let source = graph.input(source);
    let fake = t.generator.forward(&mut graph, ps, source, Some(rng))?;
    Ok(FakeBatch { graph, source, fake })
}

/// Discriminator update on real `target` vs the batch's fake; touches only
/// discriminator parameters. Returns the loss before the update.
pub fn discriminator_step(
    t: &Translator,
    ps: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    batch: &FakeBatch,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let cond = g.input(batch.source().clone());
    let real = g.input(target.clone());
    let fake = g.input(batch.image().clone());
    let p_real = t.discriminator.forward(&mut g, ps, Some(cond), real)?;
    let p_fake = t.discriminator.forward(&mut g, ps, Some(cond), fake)?;
    let lr_term = mean_log_prob(&mut g, p_real, false);
    let lf_term = mean_log_prob(&mut g, p_fake, true);
    let sum = g.add(lr_term, lf_term)?;
    let loss = g.scale(sum, -0.5);
    let v = g.value(loss).data()[0] as f64;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("discriminator loss {v}")));
    }
    let grads = g.backward(loss)?;
    opt.step(ps, &grads, lr)?;
    Ok(v)
}

/// Generator update against the current discriminator; touches only
/// generator parameters. Returns `(l1, adversarial)` before the update.
pub fn generator_step(
    t: &Translator,
    ps: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    batch: FakeBatch,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<(f64, f64)> {
    let FakeBatch { mut graph, source, fake } = batch;
    let g = &mut graph;
    g.set_param_grads(false);
    let p = t.discriminator.forward(g, ps, Some(source), fake)?;
    let adv = mean_log_prob(g, p, false);
    let adv = g.scale(adv, -1.0);
    let tv = g.input(target.clone());
    let l1 = l1_term(g, fake, tv)?;
    let weighted = g.scale(l1, t.config.objective.lambda_l1);
    let total = g.add(adv, weighted)?;
    let (adv_v, l1_v) = (g.value(adv).data()[0] as f64, g.value(l1).data()[0] as f64);
    if !(adv_v.is_finite() && l1_v.is_finite()) {
        return Err(Error::Numeric(format!("generator losses adv={adv_v} l1={l1_v}")));
    }
    let grads = g.backward(total)?;
    opt.step(ps, &grads, lr)?;
    Ok((l1_v, adv_v))
}

/// Trains generator and discriminator with alternating updates, one epoch
/// per pass over `pairs` in shuffled order. `on_epoch` sees each epoch's
/// mean losses as soon as it finishes.
pub fn train_translation(
    t: &Translator,
    ps: &mut ParamStore<f32>,
    pairs: &[TranslationPair],
    rng: &mut dyn RngCore,
    mut on_epoch: impl FnMut(&EpochGanLoss, &ParamStore<f32>) -> Result<()>,
) -> Result<Vec<EpochGanLoss>> {
    let obj = &t.config.objective;
    obj.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("translation training needs at least one pair".into()));
    }
    let sources: Vec<Tensor<f32>> = pairs.iter().map(|p| p.source.to_tensor().map(|v| 2.0 * v - 1.0)).collect();
    let targets: Vec<Tensor<f32>> = pairs.iter().map(|p| p.target.to_tensor().map(|v| 2.0 * v - 1.0)).collect();
    let mut opt_g = Adam::new(obj.beta1, obj.beta2);
    let mut opt_d = Adam::new(obj.beta1, obj.beta2);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(obj.epochs_total);
    for epoch in 1..=obj.epochs_total {
        let lr = lr_at_epoch(epoch, obj)?;
        order.shuffle(rng);
        let (mut l1, mut adv, mut dl, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(obj.batch_size) {
            let src = Tensor::stack(&chunk.iter().map(|&i| sources[i].clone()).collect::<Vec<_>>())?;
            let tgt = Tensor::stack(&chunk.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
            let batch = generate_batch(t, ps, src, rng)?;
            let c = discriminator_step(t, ps, &mut opt_d, &batch, &tgt, lr)?;
            let (a, b) = generator_step(t, ps, &mut opt_g, batch, &tgt, lr)?;
            l1 += a;
            adv += b;
            dl += c;
            n += 1;
        }
        let n = n as f64;
        let rec = EpochGanLoss {
            epoch,
            g_l1: l1 / n,
            g_adv: adv / n,
            d_loss: dl / n,
        };
        on_epoch(&rec, ps)?;
        history.push(rec);
    }
    Ok(history)
}

pub const LOSS_CSV_HEADER: &str = "epoch,g_l1,g_adv,d_loss";

pub fn loss_csv(history: &[EpochGanLoss]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for h in history {
        s.push_str(&format!("{},{},{},{}\n", h.epoch, h.g_l1, h.g_adv, h.d_loss));
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[EpochGanLoss]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(history).as_bytes()).map_err(|e| Error::io(path, e))
}
