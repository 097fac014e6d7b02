//! Pose-network data preparation, heatmap regression training and inference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, NUM_JOINTS};
use crate::data::{
    align_and_resize, make_target_heatmaps, normalize, square_crop, DatasetLayout, DatasetStats, Joints,
    MultimodalSample, SampleKey, HEATMAP_SIGMA,
};
use crate::error::{Error, Result};
use crate::fusion::FusedModel;
use crate::graph::{Graph, Unary, Var};
use crate::metrics::{decode_heatmaps, Skeleton};
use crate::modality::{Cover, Modality};
use crate::nn::{Mode, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::Heatmaps;

/// Heatmap cells per network-frame pixel along each axis.
pub const HEATMAP_STRIDE: f64 = 4.0;

/// How a frame is brought into the square network input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Square box around the subject's joints.
    #[default]
    SquareBox,
    /// The whole reference frame, resized.
    Full,
}

/// One preprocessed frame ready for the network.
#[derive(Debug, Clone)]
pub struct PoseSample {
    pub key: SampleKey,
    /// Normalised `[C, S, S]` inputs, one per modality in model order.
    pub inputs: Vec<Tensor<f32>>,
    pub target: Tensor<f32>,
    pub valid: [bool; NUM_JOINTS],
    /// Ground truth in the network frame.
    pub joints: Joints,
}

impl PoseSample {
    pub fn tag(&self) -> String {
        format!("{:05}_{:06}_{}", self.key.subject, self.key.pose, self.key.cover)
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton {
            joints: self.joints,
            valid: self.valid,
        }
    }
}

/// Crops, normalises and builds targets for an already loaded sample.
pub fn prepare_sample(
    sample: &MultimodalSample,
    layout: &DatasetLayout,
    modalities: &[Modality],
    crop: CropMode,
    size: usize,
) -> Result<PoseSample> {
    let spec = layout.alignment();
    let framed = match crop {
        CropMode::SquareBox => square_crop(sample, spec, size)?,
        CropMode::Full => align_and_resize(sample, spec, size)?,
    };
    let stats = stats_of(layout)?;
    let inputs = modalities
        .iter()
        .map(|&m| {
            let s = stats.get(m)?;
            Ok(normalize(framed.image(m)?, &s.mean, &s.std)?.to_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    let hm = size / HEATMAP_STRIDE as usize;
    let (target, valid) = make_target_heatmaps(&framed.joints, hm, HEATMAP_STRIDE, HEATMAP_SIGMA);
    Ok(PoseSample {
        key: SampleKey {
            subject: sample.subject,
            pose: sample.pose,
            cover: sample.cover,
        },
        inputs,
        target,
        valid,
        joints: framed.joints,
    })
}

fn stats_of(layout: &DatasetLayout) -> Result<&DatasetStats> {
    layout
        .stats()
        .ok_or_else(|| Error::load(layout.root(), "dataset has no normalisation statistics"))
}

/// Loads and prepares every frame of `subjects` under `covers`.
pub fn load_pose_samples(
    layout: &DatasetLayout,
    subjects: &[u32],
    modalities: &[Modality],
    covers: &[Cover],
    crop: CropMode,
    size: usize,
) -> Result<Vec<PoseSample>> {
    let keys = layout.index(subjects, modalities, covers)?;
    layout
        .iter(&keys, modalities)
        .map(|s| prepare_sample(&s?, layout, modalities, crop, size))
        .collect()
}

/// A network mapping per-modality image batches to heatmaps.
pub trait PoseNet {
    /// Input order expected by [`PoseNet::forward`].
    fn modalities(&self) -> Vec<Modality>;

    fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, inputs: &[Var], mode: Mode, rng: &mut dyn rand::RngCore) -> Result<Var>;
}

/// A single backbone on one modality.
#[derive(Debug, Clone)]
pub struct UnimodalNet {
    pub backbone: Backbone,
    pub modality: Modality,
}

impl PoseNet for UnimodalNet {
    fn modalities(&self) -> Vec<Modality> {
        vec![self.modality]
    }

    fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, inputs: &[Var], mode: Mode, _: &mut dyn rand::RngCore) -> Result<Var> {
        match inputs {
            [x] => self.backbone.forward(g, ps, *x, mode),
            _ => Err(Error::Input(format!("uni-modal network takes one input, got {}", inputs.len()))),
        }
    }
}

impl PoseNet for FusedModel {
    fn modalities(&self) -> Vec<Modality> {
        self.config().modalities.clone()
    }

    fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, inputs: &[Var], mode: Mode, mut rng: &mut dyn rand::RngCore) -> Result<Var> {
        FusedModel::forward(self, g, ps, inputs, mode, &mut rng)
    }
}

/// Squared heatmap error summed over pixels, averaged over the maps of valid
/// joints. `mask` is `[B, 14]` with ones for valid joints.
pub fn masked_mse(g: &mut Graph<f32>, pred: Var, target: Tensor<f32>, mask: Tensor<f32>) -> Result<Var> {
    let n_valid: f32 = mask.data().iter().sum();
    let t = g.input(target);
    let d = g.sub(pred, t)?;
    let d = g.mul_plane_const(d, mask)?;
    let sq = g.unary(d, Unary::Square);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n_valid.max(1.0) as f64))
}

fn batch_inputs(samples: &[&PoseSample]) -> Result<Vec<Tensor<f32>>> {
    let n_mod = samples[0].inputs.len();
    (0..n_mod)
        .map(|m| Tensor::stack(&samples.iter().map(|s| s.inputs[m].clone()).collect::<Vec<_>>()))
        .collect()
}

fn batch_targets(samples: &[&PoseSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let target = Tensor::stack(&samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?;
    let mask = Tensor::new(
        vec![samples.len(), NUM_JOINTS],
        samples.iter().flat_map(|s| s.valid.map(|v| v as u8 as f32)).collect(),
    )?;
    Ok((target, mask))
}

/// Optimisation schedule for pose networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSchedule {
    pub epochs: usize,
    /// When set, training stops after this many optimizer steps instead.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (1-based) after which the rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
}

impl Default for PoseSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps: None,
            batch_size: 64,
            lr: 1e-3,
            lr_milestones: vec![70, 90],
            lr_gamma: 0.1,
        }
    }
}

impl PoseSchedule {
    /// Rate during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.epochs == 0 && self.steps.is_none()) || self.steps == Some(0) {
            return Err(Error::Config("schedule needs a positive batch size and length".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Mean training loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
}

/// Trains `net` on `samples` with Adam, shuffling each epoch from `rng`.
pub fn train_pose<N: PoseNet, R: Rng>(
    net: &N,
    ps: &mut ParamStore<f32>,
    samples: &[PoseSample],
    schedule: &PoseSchedule,
    rng: &mut R,
) -> Result<Vec<EpochLoss>> {
    train_pose_with(net, ps, samples, schedule, rng, |_, _| Ok(()))
}

/// [`train_pose`] with `on_epoch` called after every epoch on the updated
/// parameters.
pub fn train_pose_with<N: PoseNet, R: Rng>(
    net: &N,
    ps: &mut ParamStore<f32>,
    samples: &[PoseSample],
    schedule: &PoseSchedule,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLoss, &ParamStore<f32>) -> Result<()>,
) -> Result<Vec<EpochLoss>> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("no training samples".into()));
    }
    let mut adam = Adam::new(0.9, 0.999);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let per_epoch = samples.len().div_ceil(schedule.batch_size);
    let epochs = match schedule.steps {
        Some(s) => s.div_ceil(per_epoch),
        None => schedule.epochs,
    };
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let lr = schedule.lr_at(epoch);
        let (mut total, mut n) = (0.0, 0);
        for chunk in order.chunks(schedule.batch_size) {
            if schedule.steps.is_some_and(|s| step >= s) {
                break;
            }
            let batch: Vec<&PoseSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::new();
            let xs: Vec<Var> = batch_inputs(&batch)?.into_iter().map(|t| g.input(t)).collect();
            let (target, mask) = batch_targets(&batch)?;
            let y = net.forward(&mut g, ps, &xs, Mode::Train, rng)?;
            let loss = masked_mse(&mut g, y, target, mask)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let grads = g.backward(loss)?;
            adam.step(ps, &grads, lr)?;
            ps.apply_buffer_updates(&mut g)?;
            total += value;
            n += 1;
            step += 1;
        }
        if n > 0 {
            log::debug!("epoch {epoch}: loss {:.6}", total / n as f64);
            let rec = EpochLoss {
                epoch,
                loss: total / n as f64,
                steps: n,
            };
            on_epoch(&rec, ps)?;
            history.push(rec);
        }
    }
    Ok(history)
}

/// Evaluation-mode heatmaps for every sample, in order.
pub fn predict_heatmaps<N: PoseNet>(net: &N, ps: &ParamStore<f32>, samples: &[PoseSample], batch_size: usize) -> Result<Vec<Heatmaps>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let refs: Vec<&PoseSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        g.set_param_grads(false);
        let xs: Vec<Var> = batch_inputs(chunk)?.into_iter().map(|t| g.input(t)).collect();
        let y = net.forward(&mut g, ps, &xs, Mode::Eval, &mut rng)?;
        let maps = g.value(y);
        if !maps.all_finite() {
            return Err(Error::Numeric("non-finite heatmaps".into()));
        }
        out.extend(Heatmaps::from_batch(maps)?);
    }
    Ok(out)
}

/// Decoded predictions paired with ground truth.
pub fn predict_skeletons<N: PoseNet>(
    net: &N,
    ps: &ParamStore<f32>,
    samples: &[PoseSample],
    batch_size: usize,
) -> Result<Vec<(Skeleton, Skeleton)>> {
    let maps = predict_heatmaps(net, ps, samples, batch_size)?;
    Ok(maps
        .iter()
        .zip(samples)
        .map(|(h, s)| (decode_heatmaps(h, HEATMAP_STRIDE, true), s.skeleton()))
        .collect())
}
