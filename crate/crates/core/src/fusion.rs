//! Intermediate feature fusion across per-modality backbones.
//!
//! Each modality runs its own backbone up to stage `N`; the branch outputs
//! are combined per branch and the primary modality's backbone continues
//! from stage `N + 1` to the heatmap head.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_fusion_stage, Backbone, BackboneConfig, BranchFeatureSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modality::Modality;
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Init, Mode, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Prefix of all fusion-layer parameters.
pub const FUSION_PREFIX: &str = "fusion.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionType {
    Addition,
    Concatenation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FrozenPlain,
    FrozenWeighted,
    EndToEnd,
}

impl Strategy {
    pub fn is_frozen(self) -> bool {
        !matches!(self, Strategy::EndToEnd)
    }
}

impl FromStr for FusionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" | "add" => Ok(Self::Addition),
            "concatenation" | "concat" => Ok(Self::Concatenation),
            _ => Err(Error::Config(format!("unknown fusion type `{s}`"))),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen_plain" => Ok(Self::FrozenPlain),
            "frozen_weighted" => Ok(Self::FrozenWeighted),
            "end_to_end" => Ok(Self::EndToEnd),
            _ => Err(Error::Config(format!("unknown fusion strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub stage: usize,
    pub fusion_type: FusionType,
    pub strategy: Strategy,
    /// Fusion order; concatenation stacks channel blocks in this order.
    pub modalities: Vec<Modality>,
    pub primary: Modality,
    pub dropout_p: f64,
}

impl FusionConfig {
    pub fn new(stage: usize, fusion_type: FusionType, strategy: Strategy, modalities: Vec<Modality>, primary: Modality) -> Self {
        Self {
            stage,
            fusion_type,
            strategy,
            modalities,
            primary,
            dropout_p: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fusion_stage(self.stage)?;
        if self.modalities.len() < 2 {
            return Err(Error::Config("fusion needs at least two modalities".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return Err(Error::Config(format!("modality {m} listed twice")));
            }
        }
        if !self.modalities.contains(&self.primary) {
            return Err(Error::Config(format!("primary modality {} not among fused modalities", self.primary)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn primary_index(&self) -> usize {
        self.modalities.iter().position(|&m| m == self.primary).expect("validated")
    }
}

fn check_compatible<T: Element>(inputs: &[BranchFeatureSet<T>]) -> Result<()> {
    let first = inputs.first().ok_or_else(|| Error::Fusion("no inputs to fuse".into()))?;
    for set in &inputs[1..] {
        if set.stage != first.stage || set.features.len() != first.features.len() {
            return Err(Error::Fusion(format!(
                "stage/branch mismatch: stage {} with {} branches vs stage {} with {}",
                first.stage,
                first.features.len(),
                set.stage,
                set.features.len()
            )));
        }
        for (b, (x, y)) in first.features.iter().zip(&set.features).enumerate() {
            if x.shape() != y.shape() {
                return Err(Error::Fusion(format!(
                    "branch {} shapes differ: {:?} vs {:?}",
                    b + 1,
                    x.shape(),
                    y.shape()
                )));
            }
        }
    }
    Ok(())
}

fn check_var_compatible<T: Element>(g: &Graph<T>, inputs: &[Vec<Var>]) -> Result<()> {
    let first = inputs.first().ok_or_else(|| Error::Fusion("no inputs to fuse".into()))?;
    for set in &inputs[1..] {
        if set.len() != first.len() {
            return Err(Error::Fusion(format!("branch count {} vs {}", first.len(), set.len())));
        }
        for (b, (&x, &y)) in first.iter().zip(set).enumerate() {
            if g.value(x).shape() != g.value(y).shape() {
                return Err(Error::Fusion(format!(
                    "branch {} shapes differ: {:?} vs {:?}",
                    b + 1,
                    g.value(x).shape(),
                    g.value(y).shape()
                )));
            }
        }
    }
    Ok(())
}

/// Element-wise sum of corresponding branches.
pub fn fuse_add<T: Element>(inputs: &[BranchFeatureSet<T>]) -> Result<BranchFeatureSet<T>> {
    check_compatible(inputs)?;
    let mut features = inputs[0].features.clone();
    for set in &inputs[1..] {
        for (acc, x) in features.iter_mut().zip(&set.features) {
            *acc = acc.zip_map(x, |a, b| a + b)?;
        }
    }
    Ok(BranchFeatureSet {
        stage: inputs[0].stage,
        modality: None,
        features,
    })
}

/// Graph form of [`fuse_add`]; `inputs[m][b]` is branch `b` of modality `m`.
pub fn fuse_add_vars<T: Element>(g: &mut Graph<T>, inputs: &[Vec<Var>]) -> Result<Vec<Var>> {
    check_var_compatible(g, inputs)?;
    (0..inputs[0].len())
        .map(|b| {
            let xs: Vec<Var> = inputs.iter().map(|set| set[b]).collect();
            g.add_n(&xs)
        })
        .collect()
}

/// Per-branch 1×1 convolutions from `|M| · n_b` stacked channels back to `n_b`.
#[derive(Debug, Clone)]
pub struct FusionReducer {
    pub convs: Vec<Conv2d>,
    pub modalities: usize,
}

impl FusionReducer {
    pub fn new<T: Element, R: Rng>(
        ps: &mut ParamStore<T>,
        prefix: &str,
        branch_channels: &[usize],
        modalities: usize,
        rng: &mut R,
    ) -> Self {
        let convs = branch_channels
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                Conv2d::new(
                    ps,
                    &format!("{prefix}reduce.b{}", b + 1),
                    ConvSpec::new(modalities * n, n, 1, 1, 0).with_bias(),
                    Init::HeNormal,
                    rng,
                )
            })
            .collect();
        Self { convs, modalities }
    }

    /// Identity on the channel block of modality `slot`, zero elsewhere, zero bias.
    pub fn init_block_selector<T: Element>(&self, ps: &mut ParamStore<T>, slot: usize) -> Result<()> {
        for conv in &self.convs {
            let (n, cin) = (conv.out_channels, conv.in_channels);
            let w = Tensor::from_fn(&[n, cin, 1, 1], |i| {
                let (o, c) = (i / cin, i % cin);
                if c == slot * n + o {
                    T::one()
                } else {
                    T::zero()
                }
            });
            ps.set_value(conv.weight, w)?;
            if let Some(b) = conv.bias {
                ps.set_value(b, Tensor::zeros(&[n]))?;
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.ids()).collect()
    }

    /// Stacks channels in input order, then reduces each branch.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inputs: &[Vec<Var>]) -> Result<Vec<Var>> {
        check_var_compatible(g, inputs)?;
        if inputs.len() != self.modalities || inputs[0].len() != self.convs.len() {
            return Err(Error::Fusion(format!(
                "reducer built for {} modalities x {} branches, got {} x {}",
                self.modalities,
                self.convs.len(),
                inputs.len(),
                inputs[0].len()
            )));
        }
        let mut out = Vec::with_capacity(self.convs.len());
        for (b, conv) in self.convs.iter().enumerate() {
            let n = g.value(inputs[0][b]).dims4()?.1;
            if conv.in_channels != self.modalities * n {
                return Err(Error::Fusion(format!(
                    "branch {} reducer expects {} input channels, stack has {}",
                    b + 1,
                    conv.in_channels,
                    self.modalities * n
                )));
            }
            let xs: Vec<Var> = inputs.iter().map(|set| set[b]).collect();
            let stacked = g.concat_channels(&xs)?;
            out.push(conv.forward(g, ps, stacked)?);
        }
        Ok(out)
    }
}

/// Channel stacking followed by the reducer.
pub fn fuse_concat<T: Element>(
    inputs: &[BranchFeatureSet<T>],
    reducer: &FusionReducer,
    ps: &ParamStore<T>,
) -> Result<BranchFeatureSet<T>> {
    check_compatible(inputs)?;
    let mut g = Graph::new();
    g.set_param_grads(false);
    let vars: Vec<Vec<Var>> = inputs
        .iter()
        .map(|set| set.features.iter().map(|t| g.input(t.clone())).collect())
        .collect();
    let ys = reducer.forward(&mut g, ps, &vars)?;
    Ok(BranchFeatureSet {
        stage: inputs[0].stage,
        modality: None,
        features: ys.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Learnable per-channel weights `w_b^m`, one vector per modality and branch.
#[derive(Debug, Clone)]
pub struct ModalWeights {
    /// `ids[m][b]`, modalities in fusion order.
    pub ids: Vec<Vec<ParamId>>,
    pub modalities: Vec<Modality>,
}

impl ModalWeights {
    pub fn new<T: Element>(ps: &mut ParamStore<T>, prefix: &str, modalities: &[Modality], branch_channels: &[usize]) -> Self {
        let ids = modalities
            .iter()
            .map(|m| {
                branch_channels
                    .iter()
                    .enumerate()
                    .map(|(b, &n)| ps.add_weight(format!("{prefix}w.{m}.b{}", b + 1), Tensor::ones(&[n])))
                    .collect()
            })
            .collect();
        Self {
            ids,
            modalities: modalities.to_vec(),
        }
    }

    pub fn slot(&self, m: Modality) -> Result<usize> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| Error::Fusion(format!("no weights for modality {m}")))
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.ids.iter().flatten().copied().collect()
    }
}

/// Sets the primary modality's vectors to ones and every other to zeros.
pub fn init_modal_weights<T: Element>(ps: &mut ParamStore<T>, weights: &ModalWeights, primary: Modality) -> Result<()> {
    let slot = weights.slot(primary)?;
    for (m, ids) in weights.ids.iter().enumerate() {
        for &id in ids {
            let n = ps.value(id).numel();
            let v = if m == slot { Tensor::ones(&[n]) } else { Tensor::zeros(&[n]) };
            ps.set_value(id, v)?;
        }
    }
    Ok(())
}

/// Channel keep-factors `[B, C]`: zero with probability `p`, else `1 / (1 - p)`.
pub fn spatial_dropout_mask<T: Element, R: Rng>(batch: usize, channels: usize, p: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    Tensor::from_fn(&[batch, channels], |_| if rng.random::<f64>() < p { T::zero() } else { keep })
}

/// Drops whole channels of `x` during training; identity otherwise.
pub fn spatial_dropout<T: Element, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !training || p == 0.0 {
        return Ok(x);
    }
    let (b, c, ..) = g.value(x).dims4()?;
    let mask = spatial_dropout_mask(b, c, p, rng);
    g.mul_plane_const(x, mask)
}

/// Graph form of [`apply_modal_weights`] for one modality's branches.
pub fn apply_modal_weights_vars<T: Element, R: Rng>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    feats: &[Var],
    weights: &[ParamId],
    dropout_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Vec<Var>> {
    if feats.len() != weights.len() {
        return Err(Error::Fusion(format!("{} weight vectors for {} branches", weights.len(), feats.len())));
    }
    feats
        .iter()
        .zip(weights)
        .map(|(&x, &id)| {
            let c = g.value(x).dims4()?.1;
            if ps.value(id).numel() != c {
                return Err(Error::Fusion(format!(
                    "weight vector of length {} for {c} channels",
                    ps.value(id).numel()
                )));
            }
            let x = spatial_dropout(g, x, dropout_p, training, rng)?;
            let w = g.param(ps, id);
            g.channel_scale(x, w)
        })
        .collect()
}

/// Optional spatial dropout, then per-channel scaling by the modality's weights.
pub fn apply_modal_weights<T: Element, R: Rng>(
    input: &BranchFeatureSet<T>,
    ps: &ParamStore<T>,
    weights: &ModalWeights,
    modality: Modality,
    dropout_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<BranchFeatureSet<T>> {
    let slot = weights.slot(modality)?;
    let mut g = Graph::new();
    g.set_param_grads(false);
    let xs: Vec<Var> = input.features.iter().map(|t| g.input(t.clone())).collect();
    let ys = apply_modal_weights_vars(&mut g, ps, &xs, &weights.ids[slot], dropout_p, training, rng)?;
    Ok(BranchFeatureSet {
        stage: input.stage,
        modality: Some(modality),
        features: ys.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

/// Parameter prefix of a modality's backbone inside a fused model.
pub fn backbone_prefix(m: Modality) -> String {
    format!("bb.{m}.")
}

/// Per-modality extractors, fusion layers and the primary trunk.
#[derive(Debug, Clone)]
pub struct FusedModel {
    config: FusionConfig,
    /// In fusion order.
    backbones: Vec<Backbone>,
    reducer: Option<FusionReducer>,
    weights: Option<ModalWeights>,
    norms: Vec<BatchNorm2d>,
}

impl FusedModel {
    /// Builds one backbone per modality under [`backbone_prefix`] plus the
    /// fusion layers, initialised per the strategy. `backbone` fixes every
    /// setting except the input channel count.
    pub fn build<T: Element, R: Rng>(
        ps: &mut ParamStore<T>,
        config: &FusionConfig,
        backbone: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let backbones = config
            .modalities
            .iter()
            .map(|&m| {
                let cfg = BackboneConfig {
                    input_channels: m.channels(),
                    ..backbone.clone()
                };
                Backbone::build(ps, &backbone_prefix(m), &cfg, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let branch_channels: Vec<usize> = (1..=config.stage).map(|b| backbone.branch_channels(b)).collect();
        let reducer = (config.fusion_type == FusionType::Concatenation).then(|| {
            FusionReducer::new(ps, FUSION_PREFIX, &branch_channels, config.modalities.len(), rng)
        });
        if let Some(r) = &reducer {
            r.init_block_selector(ps, config.primary_index())?;
        }
        let weights = (config.strategy == Strategy::FrozenWeighted)
            .then(|| ModalWeights::new(ps, FUSION_PREFIX, &config.modalities, &branch_channels));
        if let Some(w) = &weights {
            init_modal_weights(ps, w, config.primary)?;
        }
        let norms = if config.strategy == Strategy::FrozenPlain {
            Vec::new()
        } else {
            branch_channels
                .iter()
                .enumerate()
                .map(|(b, &n)| BatchNorm2d::new(ps, &format!("{FUSION_PREFIX}bn.b{}", b + 1), n))
                .collect()
        };
        let model = Self {
            config: config.clone(),
            backbones,
            reducer,
            weights,
            norms,
        };
        model.apply_freezing(ps);
        Ok(model)
    }

    /// Frozen strategies: every extractor parameter outside the primary
    /// trunk's stages `N+1..` and head is non-trainable.
    fn apply_freezing<T: Element>(&self, ps: &mut ParamStore<T>) {
        let p = self.config.primary_index();
        for (i, bb) in self.backbones.iter().enumerate() {
            for id in bb.all_param_ids(ps) {
                ps.set_trainable(id, true);
            }
            if self.config.strategy.is_frozen() {
                let frozen = if i == p {
                    bb.stage_param_ids(ps, self.config.stage)
                } else {
                    bb.all_param_ids(ps)
                };
                for id in frozen {
                    ps.set_trainable(id, false);
                }
            }
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn backbone(&self, m: Modality) -> Result<&Backbone> {
        self.config
            .modalities
            .iter()
            .position(|&x| x == m)
            .map(|i| &self.backbones[i])
            .ok_or_else(|| Error::Config(format!("model has no {m} backbone")))
    }

    pub fn trunk(&self) -> &Backbone {
        &self.backbones[self.config.primary_index()]
    }

    pub fn reducer(&self) -> Option<&FusionReducer> {
        self.reducer.as_ref()
    }

    pub fn weights(&self) -> Option<&ModalWeights> {
        self.weights.as_ref()
    }

    /// Stage `1..=N` entries of every extractor.
    pub fn extractor_stage_ids<T: Element>(&self, ps: &ParamStore<T>) -> Vec<ParamId> {
        self.backbones.iter().flat_map(|bb| bb.stage_param_ids(ps, self.config.stage)).collect()
    }

    /// Copies pretrained uni-modal parameters (names relative to the
    /// backbone root) into the extractor of `m`.
    pub fn load_backbone<T: Element>(&self, ps: &mut ParamStore<T>, m: Modality, source: &BTreeMap<String, Tensor<T>>) -> Result<usize> {
        let bb = self.backbone(m)?;
        ps.load_prefixed(bb.prefix(), source)
    }

    /// Stage-`N` features per modality, in fusion order.
    pub fn extract<T: Element>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, inputs: &[Var], mode: Mode) -> Result<Vec<Vec<Var>>> {
        if inputs.len() != self.backbones.len() {
            return Err(Error::Input(format!("{} inputs for {} modalities", inputs.len(), self.backbones.len())));
        }
        // Frozen extractors always read their running statistics.
        let ext_mode = if self.config.strategy.is_frozen() { Mode::Eval } else { mode };
        self.backbones
            .iter()
            .zip(inputs)
            .map(|(bb, &x)| bb.forward_to_stage(g, ps, x, self.config.stage, ext_mode))
            .collect()
    }

    /// Combined branch tensors before normalization.
    pub fn fuse<T: Element, R: Rng>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        feats: Vec<Vec<Var>>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let training = mode == Mode::Train;
        let p = self.config.dropout_p;
        let feats = match self.config.strategy {
            Strategy::FrozenPlain => feats,
            Strategy::FrozenWeighted => {
                let w = self.weights.as_ref().expect("weighted strategy has weights");
                feats
                    .iter()
                    .zip(&w.ids)
                    .map(|(f, ids)| apply_modal_weights_vars(g, ps, f, ids, p, training, rng))
                    .collect::<Result<_>>()?
            }
            Strategy::EndToEnd => feats
                .iter()
                .map(|f| f.iter().map(|&x| spatial_dropout(g, x, p, training, rng)).collect())
                .collect::<Result<_>>()?,
        };
        match &self.reducer {
            None => fuse_add_vars(g, &feats),
            Some(r) => r.forward(g, ps, &feats),
        }
    }

    /// Heatmaps from per-modality image batches given in fusion order.
    pub fn forward<T: Element, R: Rng>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        inputs: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let feats = self.extract(g, ps, inputs, mode)?;
        let mut fused = self.fuse(g, ps, feats, mode, rng)?;
        if !self.norms.is_empty() {
            for (x, bn) in fused.iter_mut().zip(&self.norms) {
                let y = bn.forward(g, ps, *x, mode)?;
                *x = g.relu(y);
            }
        }
        self.trunk().forward_from_stage(g, ps, &fused, self.config.stage, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(vals: &[f32]) -> BranchFeatureSet<f32> {
        BranchFeatureSet {
            stage: 2,
            modality: None,
            features: vec![Tensor::new(vec![1, 1, 2, 2], vals.to_vec()).unwrap()],
        }
    }

    #[test]
    fn addition_example() {
        let out = fuse_add(&[set(&[1.0, 2.0, 3.0, 4.0]), set(&[4.0, 3.0, 2.0, 1.0])]).unwrap();
        assert_eq!(out.features[0].data(), &[5.0; 4]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut b = set(&[0.0; 4]);
        b.features[0] = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(fuse_add(&[set(&[0.0; 4]), b]), Err(Error::Fusion(_))));
    }

    #[test]
    fn config_validation() {
        let base = FusionConfig::new(
            2,
            FusionType::Addition,
            Strategy::EndToEnd,
            vec![Modality::Lwir, Modality::Depth],
            Modality::Depth,
        );
        assert!(base.validate().is_ok());
        for bad in [
            FusionConfig { stage: 4, ..base.clone() },
            FusionConfig { modalities: vec![Modality::Lwir], primary: Modality::Lwir, ..base.clone() },
            FusionConfig { primary: Modality::Visible, ..base.clone() },
            FusionConfig { dropout_p: 1.0, ..base.clone() },
            FusionConfig { modalities: vec![Modality::Depth, Modality::Depth], ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn weights_init_follows_primary() {
        let mut ps = ParamStore::<f32>::new();
        let w = ModalWeights::new(&mut ps, "f.", &[Modality::Depth, Modality::Lwir], &[4, 8]);
        init_modal_weights(&mut ps, &w, Modality::Depth).unwrap();
        assert!(w.ids[0].iter().all(|&id| ps.value(id).data().iter().all(|&v| v == 1.0)));
        assert!(w.ids[1].iter().all(|&id| ps.value(id).data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_weights_annihilate() {
        let mut ps = ParamStore::<f32>::new();
        let w = ModalWeights::new(&mut ps, "f.", &[Modality::Depth, Modality::Lwir], &[1]);
        init_modal_weights(&mut ps, &w, Modality::Depth).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_modal_weights(&set(&[1.0, 2.0, 3.0, 4.0]), &ps, &w, Modality::Lwir, 0.2, false, &mut rng).unwrap();
        assert!(out.features[0].data().iter().all(|&v| v == 0.0));
        let same = apply_modal_weights(&set(&[1.0, 2.0, 3.0, 4.0]), &ps, &w, Modality::Depth, 0.2, false, &mut rng).unwrap();
        assert_eq!(same.features[0].data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
