//! Four-stage multi-branch high-resolution heatmap network.
//!
//! Stage `s` runs `s` parallel branches; branch `b` (1-indexed) works at
//! `1/2^(b-1)` of the heatmap resolution with `C * 2^(b-1)` channels. Branches
//! exchange information at the end of every module. The head projects branch 1
//! to one heatmap per joint at a quarter of the input resolution, optionally
//! through one hidden 1x1 layer.
//!
//! Parameters are registered under `<prefix>s1.` (stem and first layer),
//! `<prefix>s2.`..`<prefix>s4.` (the transition into the stage plus its
//! modules) and `<prefix>head.`, so freezing "stages 1..N" is a prefix query.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modality::Modality;
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Init, Mode, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const NUM_STAGES: usize = 4;
pub const NUM_JOINTS: usize = 14;

/// Canonical joint order. Index `j` of every heatmap stack, skeleton and
/// report row refers to `JOINTS[j]`.
pub const JOINTS: [&str; NUM_JOINTS] = [
    "Right Ankle",
    "Right Knee",
    "Right Hip",
    "Left Hip",
    "Left Knee",
    "Left Ankle",
    "Right Wrist",
    "Right Elbow",
    "Right Shoulder",
    "Left Shoulder",
    "Left Elbow",
    "Left Wrist",
    "Thorax",
    "Head",
];

pub const THORAX: usize = 12;
pub const HEAD: usize = 13;

const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels of branch 1 (`C`).
    pub base_channels: usize,
    /// Image channels (`N`): 3 for visible, 1 otherwise.
    pub input_channels: usize,
    /// Square input side. Heatmaps are `input_size / 4`.
    pub input_size: usize,
    pub stem_channels: usize,
    /// Bottleneck width of stage 1; its output carries four times this.
    pub stage1_planes: usize,
    pub stage1_blocks: usize,
    /// Exchange modules in stages 2, 3 and 4.
    pub modules: [usize; 3],
    /// Residual blocks per branch inside each exchange module.
    pub branch_blocks: usize,
    /// Width of a 1x1 conv-BN-ReLU layer in front of the heatmap projection;
    /// `None` keeps the head linear.
    #[serde(default)]
    pub head_hidden: Option<usize>,
}

impl BackboneConfig {
    /// Standard width-32 network.
    pub fn w32(input_channels: usize) -> Self {
        Self {
            base_channels: 32,
            input_channels,
            input_size: 256,
            stem_channels: 64,
            stage1_planes: 64,
            stage1_blocks: 4,
            modules: [1, 4, 3],
            branch_blocks: 4,
            head_hidden: None,
        }
    }

    /// Narrow, shallow variant for tests and desk-scale runs.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            base_channels: 8,
            input_channels,
            input_size: 256,
            stem_channels: 16,
            stage1_planes: 8,
            stage1_blocks: 1,
            modules: [1, 1, 1],
            branch_blocks: 1,
            head_hidden: Some(32),
        }
    }

    pub fn preset(name: &str, input_channels: usize) -> Result<Self> {
        match name {
            "w32" => Ok(Self::w32(input_channels)),
            "tiny" => Ok(Self::tiny(input_channels)),
            _ => Err(Error::Config(format!("unknown backbone preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("backbone: {m}")));
        if self.base_channels == 0 || self.stem_channels == 0 || self.stage1_planes == 0 {
            return bad("channel counts must be positive");
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad("input channels must be 1 or 3");
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad("input size must be a positive multiple of 32");
        }
        if self.stage1_blocks == 0 || self.branch_blocks == 0 || self.modules.contains(&0) {
            return bad("block and module counts must be positive");
        }
        if self.head_hidden == Some(0) {
            return bad("head hidden width must be positive");
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }

    pub fn branch_channels(&self, b: usize) -> usize {
        self.base_channels << (b - 1)
    }

    pub fn branch_size(&self, b: usize) -> usize {
        self.heatmap_size() >> (b - 1)
    }

    /// `(channels, side)` for every branch emitted by stage `stage`. Stage 1
    /// emits the single wide bottleneck output.
    pub fn stage_shapes(&self, stage: usize) -> Vec<(usize, usize)> {
        if stage == 1 {
            return vec![(self.stage1_planes * BOTTLENECK_EXPANSION, self.heatmap_size())];
        }
        (1..=stage).map(|b| (self.branch_channels(b), self.branch_size(b))).collect()
    }
}

/// Per-branch features emitted by one stage, batched as `[B, C_b, H_b, W_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatureSet<T: Element = f32> {
    pub stage: usize,
    pub modality: Option<Modality>,
    pub features: Vec<Tensor<T>>,
}

/// Heatmap stack for one sample, shape `[14, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    maps: Tensor<f32>,
}

impl Heatmaps {
    pub fn new(maps: Tensor<f32>) -> Result<Self> {
        match maps.shape() {
            [j, h, w] if *j == NUM_JOINTS && *h > 0 && *w > 0 => Ok(Self { maps }),
            s => Err(Error::Input(format!("heatmaps must be [{NUM_JOINTS}, H, W], got {s:?}"))),
        }
    }

    /// Splits a `[B, 14, H, W]` batch.
    pub fn from_batch(batch: &Tensor<f32>) -> Result<Vec<Self>> {
        let (b, ..) = batch.dims4()?;
        (0..b).map(|i| Self::new(batch.select(i)?)).collect()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.maps
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn map(&self, joint: usize) -> &[f32] {
        let n = self.height() * self.width();
        &self.maps.data()[joint * n..(joint + 1) * n]
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Element, R: Rng>(ps: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(ps, &format!("{name}.conv"), spec, Init::HeNormal, rng),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), spec.out_channels),
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, mode: Mode, relu: bool) -> Result<Var> {
        let y = self.conv.forward(g, ps, x)?;
        let y = self.bn.forward(g, ps, y, mode)?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

#[derive(Debug, Clone)]
enum Block {
    Bottleneck {
        c1: ConvBn,
        c2: ConvBn,
        c3: ConvBn,
        down: Option<ConvBn>,
    },
    Basic {
        c1: ConvBn,
        c2: ConvBn,
    },
}

impl Block {
    fn bottleneck<T: Element, R: Rng>(ps: &mut ParamStore<T>, name: &str, inp: usize, planes: usize, rng: &mut R) -> Self {
        let out = planes * BOTTLENECK_EXPANSION;
        Block::Bottleneck {
            c1: ConvBn::new(ps, &format!("{name}.c1"), ConvSpec::new(inp, planes, 1, 1, 0), rng),
            c2: ConvBn::new(ps, &format!("{name}.c2"), ConvSpec::new(planes, planes, 3, 1, 1), rng),
            c3: ConvBn::new(ps, &format!("{name}.c3"), ConvSpec::new(planes, out, 1, 1, 0), rng),
            down: (inp != out).then(|| ConvBn::new(ps, &format!("{name}.down"), ConvSpec::new(inp, out, 1, 1, 0), rng)),
        }
    }

    fn basic<T: Element, R: Rng>(ps: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) -> Self {
        Block::Basic {
            c1: ConvBn::new(ps, &format!("{name}.c1"), ConvSpec::new(ch, ch, 3, 1, 1), rng),
            c2: ConvBn::new(ps, &format!("{name}.c2"), ConvSpec::new(ch, ch, 3, 1, 1), rng),
        }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let (y, skip) = match self {
            Block::Bottleneck { c1, c2, c3, down } => {
                let y = c1.forward(g, ps, x, mode, true)?;
                let y = c2.forward(g, ps, y, mode, true)?;
                let y = c3.forward(g, ps, y, mode, false)?;
                let skip = match down {
                    Some(d) => d.forward(g, ps, x, mode, false)?,
                    None => x,
                };
                (y, skip)
            }
            Block::Basic { c1, c2 } => {
                let y = c1.forward(g, ps, x, mode, true)?;
                (c2.forward(g, ps, y, mode, false)?, x)
            }
        };
        let s = g.add(y, skip)?;
        Ok(g.relu(s))
    }
}

/// Path from input branch `j` to output branch `i` in an exchange unit.
#[derive(Debug, Clone)]
enum Link {
    Identity,
    /// `j > i`: 1×1 projection, then nearest upsampling.
    Up(ConvBn, usize),
    /// `j < i`: chain of stride-2 3×3 convolutions; ReLU between, not after.
    Down(Vec<ConvBn>),
}

#[derive(Debug, Clone)]
struct ExchangeModule {
    branches: Vec<Vec<Block>>,
    /// `links[i][j]`; only the first output row exists for a single-output module.
    links: Vec<Vec<Link>>,
}

impl ExchangeModule {
    fn new<T: Element, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        n_branches: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let ch = |b: usize| cfg.branch_channels(b + 1);
        let branches = (0..n_branches)
            .map(|b| {
                (0..cfg.branch_blocks)
                    .map(|k| Block::basic(ps, &format!("{name}.b{b}.{k}"), ch(b), rng))
                    .collect()
            })
            .collect();
        let links = (0..outputs)
            .map(|i| {
                (0..n_branches)
                    .map(|j| {
                        let lname = format!("{name}.fuse{i}_{j}");
                        if j == i {
                            Link::Identity
                        } else if j > i {
                            let spec = ConvSpec::new(ch(j), ch(i), 1, 1, 0);
                            Link::Up(ConvBn::new(ps, &lname, spec, rng), 1 << (j - i))
                        } else {
                            let steps = i - j;
                            let chain = (0..steps)
                                .map(|k| {
                                    let out = if k + 1 == steps { ch(i) } else { ch(j) };
                                    ConvBn::new(ps, &format!("{lname}.{k}"), ConvSpec::new(ch(j), out, 3, 2, 1), rng)
                                })
                                .collect();
                            Link::Down(chain)
                        }
                    })
                    .collect()
            })
            .collect();
        Self { branches, links }
    }

    fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, xs: &[Var], mode: Mode) -> Result<Vec<Var>> {
        let mut ys = Vec::with_capacity(xs.len());
        for (blocks, &x) in self.branches.iter().zip(xs) {
            let mut y = x;
            for blk in blocks {
                y = blk.forward(g, ps, y, mode)?;
            }
            ys.push(y);
        }
        let mut out = Vec::with_capacity(self.links.len());
        for row in &self.links {
            let mut terms = Vec::with_capacity(row.len());
            for (link, &y) in row.iter().zip(&ys) {
                let t = match link {
                    Link::Identity => y,
                    Link::Up(cb, f) => {
                        let p = cb.forward(g, ps, y, mode, false)?;
                        g.upsample_nearest(p, *f)?
                    }
                    Link::Down(chain) => {
                        let mut t = y;
                        for (k, cb) in chain.iter().enumerate() {
                            t = cb.forward(g, ps, t, mode, k + 1 < chain.len())?;
                        }
                        t
                    }
                };
                terms.push(t);
            }
            let s = g.add_n(&terms)?;
            out.push(g.relu(s));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    /// One entry per output branch; `None` passes the input branch through.
    transition: Vec<Option<ConvBn>>,
    modules: Vec<ExchangeModule>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    prefix: String,
    stem: [ConvBn; 2],
    layer1: Vec<Block>,
    /// Stages 2, 3, 4.
    stages: Vec<Stage>,
    head_hidden: Option<ConvBn>,
    head: Conv2d,
}

impl Backbone {
    /// Registers all parameters under `prefix` and draws initial weights from `rng`.
    pub fn build<T: Element, R: Rng>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let p = |s: &str| format!("{prefix}{s}");
        let stem = [
            ConvBn::new(ps, &p("s1.stem0"), ConvSpec::new(cfg.input_channels, cfg.stem_channels, 3, 2, 1), rng),
            ConvBn::new(ps, &p("s1.stem1"), ConvSpec::new(cfg.stem_channels, cfg.stem_channels, 3, 2, 1), rng),
        ];
        let mut layer1 = Vec::new();
        let mut inp = cfg.stem_channels;
        for k in 0..cfg.stage1_blocks {
            layer1.push(Block::bottleneck(ps, &p(&format!("s1.layer.{k}")), inp, cfg.stage1_planes, rng));
            inp = cfg.stage1_planes * BOTTLENECK_EXPANSION;
        }
        let mut stages = Vec::new();
        for s in 2..=NUM_STAGES {
            let prev = cfg.stage_shapes(s - 1);
            let transition = (1..=s)
                .map(|b| {
                    let out = cfg.branch_channels(b);
                    let name = p(&format!("s{s}.transition{b}"));
                    if b < s {
                        let cin = prev[b - 1].0;
                        (cin != out).then(|| ConvBn::new(ps, &name, ConvSpec::new(cin, out, 3, 1, 1), rng))
                    } else {
                        let cin = prev[s - 2].0;
                        Some(ConvBn::new(ps, &name, ConvSpec::new(cin, out, 3, 2, 1), rng))
                    }
                })
                .collect();
            let n_mod = cfg.modules[s - 2];
            let modules = (0..n_mod)
                .map(|k| {
                    let outputs = if s == NUM_STAGES && k + 1 == n_mod { 1 } else { s };
                    ExchangeModule::new(ps, &p(&format!("s{s}.m{k}")), cfg, s, outputs, rng)
                })
                .collect();
            stages.push(Stage { transition, modules });
        }
        let head_hidden = cfg
            .head_hidden
            .map(|h| ConvBn::new(ps, &p("head.hidden"), ConvSpec::new(cfg.base_channels, h, 1, 1, 0), rng));
        let head = Conv2d::new(
            ps,
            &p("head"),
            ConvSpec::new(cfg.head_hidden.unwrap_or(cfg.base_channels), NUM_JOINTS, 1, 1, 0).with_bias(),
            Init::Normal(0.001),
            rng,
        );
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            stem,
            layer1,
            stages,
            head_hidden,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Parameter prefix of stage `s` (1..=4); `5` denotes the head.
    pub fn stage_prefix(&self, s: usize) -> String {
        if s > NUM_STAGES {
            format!("{}head.", self.prefix)
        } else {
            format!("{}s{s}.", self.prefix)
        }
    }

    /// All entries (weights and buffers) of stages `1..=n`.
    pub fn stage_param_ids<T: Element>(&self, ps: &ParamStore<T>, n: usize) -> Vec<ParamId> {
        (1..=n).flat_map(|s| ps.ids_with_prefix(&self.stage_prefix(s)).collect::<Vec<_>>()).collect()
    }

    pub fn all_param_ids<T: Element>(&self, ps: &ParamStore<T>) -> Vec<ParamId> {
        ps.ids_with_prefix(&self.prefix).collect()
    }

    pub fn weight_count<T: Element>(&self, ps: &ParamStore<T>) -> usize {
        self.all_param_ids(ps)
            .into_iter()
            .filter(|&id| ps.kind(id) == crate::nn::ParamKind::Weight)
            .map(|id| ps.value(id).numel())
            .sum()
    }

    fn check_input<T: Element>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let cfg = &self.config;
        match g.value(x).shape() {
            [_, c, h, w] if *c == cfg.input_channels && *h == cfg.input_size && *w == cfg.input_size => Ok(()),
            s => Err(Error::Input(format!(
                "backbone expects [B, {}, {n}, {n}], got {s:?}",
                cfg.input_channels,
                n = cfg.input_size
            ))),
        }
    }

    fn check_stage_features<T: Element>(&self, g: &Graph<T>, feats: &[Var], stage: usize) -> Result<()> {
        let want = self.config.stage_shapes(stage);
        if feats.len() != want.len() {
            return Err(Error::Input(format!("stage {stage} needs {} branches, got {}", want.len(), feats.len())));
        }
        let mut batch = None;
        for (b, (&f, &(c, s))) in feats.iter().zip(&want).enumerate() {
            match g.value(f).shape() {
                &[n, fc, fh, fw] if fc == c && fh == s && fw == s && batch.is_none_or(|m| m == n) => batch = Some(n),
                shape => {
                    return Err(Error::Input(format!(
                        "stage {stage} branch {} must be [B, {c}, {s}, {s}], got {shape:?}",
                        b + 1
                    )))
                }
            }
        }
        Ok(())
    }

    fn run_stage1<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = x;
        for cb in &self.stem {
            y = cb.forward(g, ps, y, mode, true)?;
        }
        for blk in &self.layer1 {
            y = blk.forward(g, ps, y, mode)?;
        }
        Ok(y)
    }

    fn run_stage<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, s: usize, xs: &[Var], mode: Mode) -> Result<Vec<Var>> {
        let stage = &self.stages[s - 2];
        let mut ys = Vec::with_capacity(s);
        for (b, t) in stage.transition.iter().enumerate() {
            let src = xs[b.min(xs.len() - 1)];
            ys.push(match t {
                Some(cb) => cb.forward(g, ps, src, mode, true)?,
                None => src,
            });
        }
        for m in &stage.modules {
            ys = m.forward(g, ps, &ys, mode)?;
        }
        Ok(ys)
    }

    /// Heatmaps `[B, 14, S/4, S/4]` for an image batch `[B, N, S, S]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let feats = self.run_to(g, ps, x, 2, mode)?;
        self.run_from(g, ps, &feats, 2, mode)
    }

    /// Branch outputs of stage `n ∈ {2, 3}`.
    pub fn forward_to_stage<T: Element>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        n: usize,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        check_fusion_stage(n)?;
        self.run_to(g, ps, x, n, mode)
    }

    /// Continues from stage-`n` branch features through the head.
    pub fn forward_from_stage<T: Element>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        feats: &[Var],
        n: usize,
        mode: Mode,
    ) -> Result<Var> {
        check_fusion_stage(n)?;
        self.run_from(g, ps, feats, n, mode)
    }

    fn run_to<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, n: usize, mode: Mode) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        let mut ys = vec![self.run_stage1(g, ps, x, mode)?];
        for s in 2..=n {
            ys = self.run_stage(g, ps, s, &ys, mode)?;
        }
        Ok(ys)
    }

    fn run_from<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, feats: &[Var], n: usize, mode: Mode) -> Result<Var> {
        self.check_stage_features(g, feats, n)?;
        let mut ys = feats.to_vec();
        for s in n + 1..=NUM_STAGES {
            ys = self.run_stage(g, ps, s, &ys, mode)?;
        }
        let y = match &self.head_hidden {
            Some(cb) => cb.forward(g, ps, ys[0], mode, true)?,
            None => ys[0],
        };
        self.head.forward(g, ps, y)
    }

    /// Inference helper: heatmaps for an image batch in evaluation mode.
    pub fn forward_full<T: Element>(&self, ps: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.set_param_grads(false);
        let x = g.input(images.clone());
        let y = self.forward(&mut g, ps, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }

    /// Inference helper for [`Self::forward_to_stage`].
    pub fn features_to_stage<T: Element>(&self, ps: &ParamStore<T>, images: &Tensor<T>, n: usize) -> Result<BranchFeatureSet<T>> {
        let mut g = Graph::new();
        g.set_param_grads(false);
        let x = g.input(images.clone());
        let ys = self.forward_to_stage(&mut g, ps, x, n, Mode::Eval)?;
        Ok(BranchFeatureSet {
            stage: n,
            modality: None,
            features: ys.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Inference helper for [`Self::forward_from_stage`].
    pub fn heatmaps_from_stage<T: Element>(&self, ps: &ParamStore<T>, set: &BranchFeatureSet<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        g.set_param_grads(false);
        let xs: Vec<Var> = set.features.iter().map(|t| g.input(t.clone())).collect();
        let y = self.forward_from_stage(&mut g, ps, &xs, set.stage, Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}

pub fn check_fusion_stage(n: usize) -> Result<()> {
    if matches!(n, 2 | 3) {
        Ok(())
    } else {
        Err(Error::Config(format!("fusion stage must be 2 or 3, got {n}")))
    }
}
