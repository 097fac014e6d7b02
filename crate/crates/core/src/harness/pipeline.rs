//! The commands behind the CLI. Each reads an [`ExperimentConfig`], writes
//! into an output directory and appends a record to its run manifest.
//!
//! Output layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/metrics.csv                  joint rows, one column per evaluated model
//! <out>/losses.csv                   translation training, per epoch
//! <out>/pose_losses_<label>.csv      pose training, per epoch
//! <out>/checkpoints/*.ckpt
//! <out>/overlays/<label>/<subject>_<pose>_<cover>.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, JOINTS, NUM_JOINTS};
use crate::checkpoint::{Checkpoint, Header};
use crate::data::synthetic::generate_synthetic_dataset;
use crate::data::{
    align_and_resize, composite_on_white, prepare_translation_pairs, reference_frame_joints, square_crop,
    translation_box, translation_crop, warp, DatasetLayout, DatasetSplit, Image, MultimodalSample, SampleKey,
    TranslationPair,
};
use crate::error::{Error, Result};
use crate::fusion::{backbone_prefix, FusedModel, FusionConfig};
use crate::graph::{Graph, Var};
use crate::harness::config::{EvalSplit, ExperimentConfig, SplitMode};
use crate::harness::manifest::{RunRecord, RunRecorder};
use crate::harness::plot::{line_chart, read_series, Series};
use crate::harness::pose::{
    predict_skeletons, prepare_sample, train_pose_with, CropMode, EpochLoss, PoseNet, PoseSample, PoseSchedule,
    UnimodalNet,
};
use crate::metrics::{evaluate_pckh, render_overlay, PckhReport, Skeleton, TotalMode, PCKH_THRESHOLD};
use crate::modality::{Cover, Modality};
use crate::nn::{Mode, ParamStore};
use crate::reconstruction::{train_translation, write_loss_csv, Translator};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const OVERLAY_DIR: &str = "overlays";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const TRANSLATOR_CHECKPOINT: &str = "translator.ckpt";
pub const FUSION_CHECKPOINT: &str = "fusion.ckpt";

/// Images per inference batch.
const EVAL_BATCH: usize = 16;

// Independent random streams per command, all derived from the run seed.
const STREAM_UNIMODAL: u64 = 1;
const STREAM_FUSION: u64 = 2;
const STREAM_GAN: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn unimodal_checkpoint_name(m: Modality) -> String {
    format!("unimodal_{m}.ckpt")
}

/// A trained pose network of either family.
#[derive(Debug, Clone)]
pub enum PoseModel {
    Unimodal(UnimodalNet),
    Fusion(FusedModel),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UnimodalBody {
    modality: Modality,
    backbone: BackboneConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FusionBody {
    fusion: FusionConfig,
    backbone: BackboneConfig,
}

impl PoseNet for PoseModel {
    fn modalities(&self) -> Vec<Modality> {
        match self {
            PoseModel::Unimodal(n) => n.modalities(),
            PoseModel::Fusion(f) => PoseNet::modalities(f),
        }
    }

    fn forward(&self, g: &mut Graph<f32>, ps: &ParamStore<f32>, inputs: &[Var], mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        match self {
            PoseModel::Unimodal(n) => n.forward(g, ps, inputs, mode, rng),
            PoseModel::Fusion(f) => PoseNet::forward(f, g, ps, inputs, mode, rng),
        }
    }
}

impl PoseModel {
    pub fn input_size(&self) -> usize {
        match self {
            PoseModel::Unimodal(n) => n.backbone.config().input_size,
            PoseModel::Fusion(f) => f.trunk().config().input_size,
        }
    }

    /// Default metrics column name.
    pub fn label(&self) -> String {
        match self {
            PoseModel::Unimodal(n) => format!("unimodal_{}", n.modality),
            PoseModel::Fusion(f) => {
                let c = f.config();
                let mods: Vec<&str> = c.modalities.iter().map(|m| m.name()).collect();
                format!("{}_{}_{}_stage{}", mods.join("+"), snake(&c.strategy), snake(&c.fusion_type), c.stage)
            }
        }
    }

    pub fn checkpoint(&self, ps: &ParamStore<f32>) -> Result<Checkpoint<f32>> {
        let to_json = |v: serde_json::Result<serde_json::Value>| v.map_err(|e| Error::Checkpoint(e.to_string()));
        let header = match self {
            PoseModel::Unimodal(n) => Header::new(
                "unimodal",
                to_json(serde_json::to_value(UnimodalBody {
                    modality: n.modality,
                    backbone: n.backbone.config().clone(),
                }))?,
            ),
            PoseModel::Fusion(f) => Header::new(
                "fusion",
                to_json(serde_json::to_value(FusionBody {
                    fusion: f.config().clone(),
                    backbone: f.trunk().config().clone(),
                }))?,
            ),
        };
        Ok(Checkpoint::from_store(header, ps))
    }

    /// Rebuilds the model a pose checkpoint describes and loads its values.
    pub fn from_checkpoint(ck: &Checkpoint<f32>) -> Result<(Self, ParamStore<f32>)> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = match ck.header.kind.as_str() {
            "unimodal" => {
                let b: UnimodalBody =
                    serde_json::from_value(ck.header.body.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                let backbone = Backbone::build(&mut ps, &backbone_prefix(b.modality), &b.backbone, &mut rng)?;
                PoseModel::Unimodal(UnimodalNet {
                    backbone,
                    modality: b.modality,
                })
            }
            "fusion" => {
                let b: FusionBody =
                    serde_json::from_value(ck.header.body.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
                PoseModel::Fusion(FusedModel::build(&mut ps, &b.fusion, &b.backbone, &mut rng)?)
            }
            k => return Err(Error::Checkpoint(format!("`{k}` is not a pose checkpoint"))),
        };
        let n = ps.load_prefixed("", &ck.tensors)?;
        if n != ps.len() {
            return Err(Error::Checkpoint(format!("checkpoint fills {n} of {} tensors", ps.len())));
        }
        Ok((model, ps))
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Pose results table: one row per joint plus `Total`, one column per model.
/// Columns keep their first-seen order; writing a known column replaces it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    columns: Vec<(String, Vec<String>)>,
}

impl MetricsTable {
    fn rows() -> impl Iterator<Item = &'static str> {
        JOINTS.iter().copied().chain(std::iter::once("Total"))
    }

    /// The table at `path`, or an empty one when the file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Report(format!("{}: {m}", path.display()));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty table".into()))?.split(',').collect();
        if header.first() != Some(&"Joint") {
            return Err(bad("first column must be `Joint`".into()));
        }
        let mut columns: Vec<(String, Vec<String>)> = header[1..].iter().map(|n| (n.to_string(), Vec::new())).collect();
        let mut count = 0;
        for (line, want) in lines.zip(Self::rows()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.first() != Some(&want) || cells.len() != header.len() {
                return Err(bad(format!("malformed row `{line}`")));
            }
            for (c, v) in columns.iter_mut().zip(&cells[1..]) {
                c.1.push(v.to_string());
            }
            count += 1;
        }
        if count != NUM_JOINTS + 1 {
            return Err(bad(format!("expected {} rows, found {count}", NUM_JOINTS + 1)));
        }
        Ok(Self { columns })
    }

    pub fn upsert(&mut self, name: &str, report: &PckhReport, mode: TotalMode) {
        let values: Vec<String> = report
            .per_joint
            .iter()
            .copied()
            .chain(std::iter::once(report.total_by(mode)))
            .map(|v| format!("{v:.2}"))
            .collect();
        match self.columns.iter_mut().find(|(n, _)| n == name) {
            Some(c) => c.1 = values,
            None => self.columns.push((name.to_string(), values)),
        }
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("Joint");
        for (n, _) in &self.columns {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (r, label) in Self::rows().enumerate() {
            s.push_str(label);
            for (_, v) in &self.columns {
                s.push(',');
                s.push_str(&v[r]);
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn record_metrics(rec: &mut RunRecorder, columns: &[(String, PckhReport)], mode: TotalMode) -> Result<()> {
    let path = rec.out().join(METRICS_FILE);
    let mut table = MetricsTable::load(&path)?;
    for (name, r) in columns {
        if name.contains(',') {
            return Err(Error::Config(format!("metrics label `{name}` contains a comma")));
        }
        table.upsert(name, r, mode);
        log::info!("{name}: PCKh@0.5 total {:.2} over {} samples", r.total_by(mode), r.samples);
    }
    table.save(&path)?;
    rec.add(&path, "metrics");
    Ok(())
}

fn open_dataset(root: &Path) -> Result<DatasetLayout> {
    DatasetLayout::open(root)
}

fn split_for(cfg: &ExperimentConfig, layout: &DatasetLayout) -> Result<DatasetSplit> {
    let subjects = layout.subjects();
    match cfg.dataset.split {
        SplitMode::Default => DatasetSplit::default_for(&subjects),
        SplitMode::All => Ok(DatasetSplit::all(&subjects)),
    }
}

fn split_subjects(split: &DatasetSplit, which: EvalSplit) -> &[u32] {
    match which {
        EvalSplit::Train => split.fit_subjects(),
        EvalSplit::Val => &split.val,
        EvalSplit::Test => &split.test,
    }
}

/// Evaluation-mode PCKh of `samples`; an empty set is a report error.
fn evaluate_samples<N: PoseNet>(net: &N, ps: &ParamStore<f32>, samples: &[PoseSample]) -> Result<(PckhReport, Vec<(Skeleton, Skeleton)>)> {
    if samples.is_empty() {
        return Err(Error::Report("no samples to evaluate".into()));
    }
    let pairs = predict_skeletons(net, ps, samples, EVAL_BATCH)?;
    Ok((evaluate_pckh(&pairs, PCKH_THRESHOLD)?, pairs))
}

fn load_samples(
    layout: &DatasetLayout,
    subjects: &[u32],
    modalities: &[Modality],
    covers: &[Cover],
    crop: CropMode,
    size: usize,
) -> Result<(Vec<SampleKey>, Vec<PoseSample>)> {
    let keys = layout.index(subjects, modalities, covers)?;
    let samples = layout
        .iter(&keys, modalities)
        .map(|s| prepare_sample(&s?, layout, modalities, crop, size))
        .collect::<Result<Vec<_>>>()?;
    Ok((keys, samples))
}

fn frame(sample: &MultimodalSample, layout: &DatasetLayout, crop: CropMode, size: usize) -> Result<MultimodalSample> {
    match crop {
        CropMode::SquareBox => square_crop(sample, layout.alignment(), size),
        CropMode::Full => align_and_resize(sample, layout.alignment(), size),
    }
}

fn save_overlay(rec: &mut RunRecorder, label: &str, tag: &str, image: &Image, gt: &Skeleton, pred: &Skeleton) -> Result<()> {
    let dir = rec.out().join(OVERLAY_DIR).join(label);
    create_dir(&dir)?;
    let path = dir.join(format!("{tag}.png"));
    render_overlay(image, gt, pred).save_png(&path)?;
    rec.add(&path, "overlay");
    Ok(())
}

/// Draws predictions of the first `n` samples on the network-frame image of `shown`.
#[allow(clippy::too_many_arguments)]
fn write_overlays(
    rec: &mut RunRecorder,
    layout: &DatasetLayout,
    label: &str,
    keys: &[SampleKey],
    preds: &[(Skeleton, Skeleton)],
    shown: Modality,
    crop: CropMode,
    size: usize,
    n: usize,
) -> Result<()> {
    for (key, (pred, gt)) in keys.iter().zip(preds).take(n) {
        let framed = frame(&layout.load(*key, &[shown])?, layout, crop, size)?;
        save_overlay(rec, label, &framed.tag(), framed.image(shown)?, gt, pred)?;
    }
    Ok(())
}

fn write_pose_losses(rec: &mut RunRecorder, label: &str, history: &[EpochLoss]) -> Result<PathBuf> {
    let path = rec.out().join(format!("pose_losses_{label}.csv"));
    let mut s = String::from("epoch,loss\n");
    for h in history {
        s.push_str(&format!("{},{}\n", h.epoch, h.loss));
    }
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    rec.add(&path, "losses");
    Ok(path)
}

/// Trains with the schedule and, when validation samples exist, keeps the
/// parameters of the epoch with the best validation PCKh.
fn train_selected<N: PoseNet>(
    net: &N,
    ps: &mut ParamStore<f32>,
    train: &[PoseSample],
    val: &[PoseSample],
    schedule: &PoseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLoss>> {
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let history = train_pose_with(net, ps, train, schedule, rng, |e, ps| {
        log::info!("epoch {}: loss {:.6}", e.epoch, e.loss);
        if val.is_empty() {
            return Ok(());
        }
        let (r, _) = evaluate_samples(net, ps, val)?;
        if best.as_ref().is_none_or(|(b, _, _)| r.total > *b) {
            best = Some((r.total, e.epoch, ps.clone()));
        }
        Ok(())
    })?;
    if let Some((total, epoch, snapshot)) = best {
        log::info!("selected epoch {epoch} (validation PCKh {total:.2})");
        *ps = snapshot;
    }
    Ok(history)
}

fn start(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<RunRecorder> {
    cfg.validate()?;
    RunRecorder::start(out, command, cfg.seed()?, cfg)
}

/// Writes a synthetic dataset into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "gen-data")?;
    generate_synthetic_dataset(out, &cfg.synthetic_config()?)?;
    let mut files = Vec::new();
    collect_files(out, &mut files)?;
    files.sort();
    for f in files {
        if f.file_name().is_some_and(|n| n == crate::harness::manifest::MANIFEST_FILE) {
            continue;
        }
        let kind = if f.extension().is_some_and(|e| e == "png") { "image" } else { "dataset" };
        rec.add(&f, kind);
    }
    rec.finish()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Trains one backbone on `train.modality`, evaluates it on the test split.
pub fn train_unimodal(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "train-unimodal")?;
    let m = cfg
        .train
        .modality
        .ok_or_else(|| Error::Config("train-unimodal needs train.modality".into()))?;
    let layout = open_dataset(&cfg.dataset.root)?;
    let split = split_for(cfg, &layout)?;
    let bcfg = cfg.backbone_config(m)?;
    let size = bcfg.input_size;
    let (crop, covers) = (cfg.dataset.crop, &cfg.dataset.covers);
    let (_, train) = load_samples(&layout, split.fit_subjects(), &[m], covers, crop, size)?;
    let (_, val) = load_samples(&layout, &split.val, &[m], covers, crop, size)?;
    let mut rng = rng_for(cfg.seed()?, STREAM_UNIMODAL);
    let mut ps = ParamStore::new();
    let net = PoseModel::Unimodal(UnimodalNet {
        backbone: Backbone::build(&mut ps, &backbone_prefix(m), &bcfg, &mut rng)?,
        modality: m,
    });
    let history = train_selected(&net, &mut ps, &train, &val, &cfg.train.schedule(), &mut rng)?;
    drop(train);
    finish_pose_run(cfg, &mut rec, &layout, &split, &net, &ps, &history, &unimodal_checkpoint_name(m))?;
    rec.finish()
}

fn checkpoint_dir(rec: &RunRecorder) -> Result<PathBuf> {
    let dir = rec.out().join(CHECKPOINT_DIR);
    create_dir(&dir)?;
    Ok(dir)
}

/// Checkpoint, test-split metrics, overlays and loss CSV of a trained pose model.
#[allow(clippy::too_many_arguments)]
fn finish_pose_run(
    cfg: &ExperimentConfig,
    rec: &mut RunRecorder,
    layout: &DatasetLayout,
    split: &DatasetSplit,
    net: &PoseModel,
    ps: &ParamStore<f32>,
    history: &[EpochLoss],
    ckpt_name: &str,
) -> Result<()> {
    let ck = checkpoint_dir(rec)?.join(ckpt_name);
    net.checkpoint(ps)?.save(&ck)?;
    rec.add(&ck, "checkpoint");
    let label = cfg.eval.label.clone().unwrap_or_else(|| net.label());
    write_pose_losses(rec, &label, history)?;
    let mods = net.modalities();
    let size = net.input_size();
    let (keys, test) = load_samples(layout, &split.test, &mods, &cfg.dataset.covers, cfg.dataset.crop, size)?;
    let (report, preds) = evaluate_samples(net, ps, &test)?;
    record_metrics(rec, &[(label.clone(), report)], cfg.eval.total)?;
    write_overlays(rec, layout, &label, &keys, &preds, mods[0], cfg.dataset.crop, size, cfg.train.overlays)
}

/// Trains a fusion model on the configured modalities.
pub fn train_fusion(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "train-fusion")?;
    cfg.check_fusion_checkpoints()?;
    let f = cfg.fusion()?;
    let fcfg = f.fusion_config();
    let layout = open_dataset(&cfg.dataset.root)?;
    let split = split_for(cfg, &layout)?;
    let bcfg = cfg.backbone_config(f.primary)?;
    let mut rng = rng_for(cfg.seed()?, STREAM_FUSION);
    let mut ps = ParamStore::new();
    let model = FusedModel::build(&mut ps, &fcfg, &bcfg, &mut rng)?;
    for (&m, path) in &f.checkpoints {
        let ck = Checkpoint::<f32>::load(path)?;
        check_unimodal(&ck, m, path)?;
        let n = model.load_backbone(&mut ps, m, &ck.scoped(&backbone_prefix(m)))?;
        log::info!("loaded {n} tensors for {m} from {}", path.display());
    }
    let size = bcfg.input_size;
    let (crop, covers) = (cfg.dataset.crop, &cfg.dataset.covers);
    let (_, train) = load_samples(&layout, split.fit_subjects(), &fcfg.modalities, covers, crop, size)?;
    let (_, val) = load_samples(&layout, &split.val, &fcfg.modalities, covers, crop, size)?;
    let net = PoseModel::Fusion(model);
    let history = train_selected(&net, &mut ps, &train, &val, &cfg.train.schedule(), &mut rng)?;
    drop(train);
    finish_pose_run(cfg, &mut rec, &layout, &split, &net, &ps, &history, FUSION_CHECKPOINT)?;
    rec.finish()
}

fn check_unimodal(ck: &Checkpoint<f32>, m: Modality, path: &Path) -> Result<()> {
    if ck.header.kind != "unimodal" {
        return Err(Error::Config(format!("{} is a `{}` checkpoint, not uni-modal", path.display(), ck.header.kind)));
    }
    let body: UnimodalBody = serde_json::from_value(ck.header.body.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if body.modality != m {
        return Err(Error::Config(format!("{} holds a {} model, configured for {m}", path.display(), body.modality)));
    }
    Ok(())
}

fn require_checkpoint(p: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = p.ok_or_else(|| Error::Config(format!("{what} checkpoint is not configured")))?;
    if !p.is_file() {
        return Err(Error::Config(format!("{what} checkpoint {} does not exist", p.display())));
    }
    Ok(p.clone())
}

/// Evaluates `eval.checkpoint` on `eval.split` of `eval.root` (or the dataset).
pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "evaluate")?;
    let path = require_checkpoint(cfg.eval.checkpoint.as_ref(), "evaluation")?;
    let (net, ps) = PoseModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    let root = cfg.eval.root.as_ref().unwrap_or(&cfg.dataset.root);
    let layout = open_dataset(root)?;
    let split = split_for(cfg, &layout)?;
    let subjects = split_subjects(&split, cfg.eval.split);
    if subjects.is_empty() {
        return Err(Error::Report(format!("the {:?} split has no subjects", cfg.eval.split)));
    }
    let mods = net.modalities();
    let size = net.input_size();
    let (keys, samples) = load_samples(&layout, subjects, &mods, &cfg.dataset.covers, cfg.dataset.crop, size)?;
    let (report, preds) = evaluate_samples(&net, &ps, &samples)?;
    let label = cfg
        .eval
        .label
        .clone()
        .unwrap_or_else(|| format!("{}_{}", net.label(), snake(&cfg.eval.split)));
    record_metrics(&mut rec, &[(label.clone(), report)], cfg.eval.total)?;
    write_overlays(&mut rec, &layout, &label, &keys, &preds, mods[0], cfg.dataset.crop, size, cfg.train.overlays)?;
    rec.finish()
}

/// Translation pairs of `subjects`, built one subject at a time.
fn translation_pairs(
    layout: &DatasetLayout,
    subjects: &[u32],
    source: Modality,
    target: Modality,
    covers: &[Cover],
    size: usize,
) -> Result<Vec<TranslationPair>> {
    let mut pairs = Vec::new();
    for &s in subjects {
        let keys = layout.index(&[s], &[source, target], covers)?;
        let samples = layout.iter(&keys, &[source, target]).collect::<Result<Vec<_>>>()?;
        pairs.extend(prepare_translation_pairs(&samples, layout.alignment(), source, target, size)?);
    }
    Ok(pairs)
}

/// Trains the source-to-target translator on the training subjects.
pub fn train_cgan(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "train-cgan")?;
    let tcfg = cfg.gan()?.translation_config()?;
    let layout = open_dataset(&cfg.dataset.root)?;
    let split = split_for(cfg, &layout)?;
    let size = tcfg.generator.input_size;
    let pairs = translation_pairs(&layout, split.fit_subjects(), tcfg.source, tcfg.target, &cfg.dataset.covers, size)?;
    log::info!("{} translation pairs", pairs.len());
    let mut rng = rng_for(cfg.seed()?, STREAM_GAN);
    let mut ps = ParamStore::new();
    let t = Translator::build(&mut ps, &tcfg, &mut rng)?;
    let history = train_translation(&t, &mut ps, &pairs, &mut rng, |e, _| {
        if !(e.g_l1.is_finite() && e.g_adv.is_finite() && e.d_loss.is_finite()) {
            return Err(Error::Numeric(format!("non-finite losses at epoch {}", e.epoch)));
        }
        log::info!("epoch {}: g_l1 {:.5} g_adv {:.5} d {:.5}", e.epoch, e.g_l1, e.g_adv, e.d_loss);
        Ok(())
    })?;
    let losses = rec.out().join(LOSSES_FILE);
    write_loss_csv(&losses, &history)?;
    rec.add(&losses, "losses");
    let ck = checkpoint_dir(&rec)?.join(TRANSLATOR_CHECKPOINT);
    t.checkpoint(&ps)?.save(&ck)?;
    rec.add(&ck, "checkpoint");
    let chart = rec.out().join("generator_l1.png");
    let mut series = read_series(&losses, "g_l1")?;
    series.name = "generator L1".into();
    line_chart(&chart, "Generator L1 loss", "epoch", "L1", &[series])?;
    rec.add(&chart, "plot");
    rec.finish()
}

/// Metrics column names written by [`reconstruct_eval`].
pub const RECONSTRUCT_COLUMNS: [&str; 3] = ["real", "synthetic_square_bb", "synthetic_no_bb"];

/// Replaces the `target` image of each sample by a translated `source` image
/// composited on white at the subject box.
fn synthesize(t: &Translator, ps: &ParamStore<f32>, layout: &DatasetLayout, samples: &[MultimodalSample]) -> Result<Vec<MultimodalSample>> {
    let spec = layout.alignment();
    let (src, tgt) = (t.config.source, t.config.target);
    let size = t.config.generator.input_size;
    let (rw, rh) = spec.reference_size()?;
    let (tw, th) = spec.size(tgt)?;
    let to_ref = spec.transform(tgt)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let boxes = chunk
            .iter()
            .map(|s| translation_box(&reference_frame_joints(s, spec)?))
            .collect::<Result<Vec<_>>>()?;
        let crops = chunk
            .iter()
            .zip(&boxes)
            .map(|(s, b)| translation_crop(s, spec, src, b, size))
            .collect::<Result<Vec<_>>>()?;
        let fakes = t.translate(ps, &crops, None)?;
        for ((s, b), fake) in chunk.iter().zip(&boxes).zip(&fakes) {
            let canvas = composite_on_white(fake, b, rw, rh)?;
            let mut s = s.clone();
            s.images.insert(tgt, warp(&canvas, &to_ref, tw, th, 1.0));
            out.push(s);
        }
    }
    Ok(out)
}

/// Source images through the translator, then the fusion model, with and
/// without the square subject crop, next to the same model on real images.
pub fn reconstruct_eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = start(cfg, out, "reconstruct-eval")?;
    let gan = cfg.gan()?;
    let tpath = require_checkpoint(gan.checkpoint.as_ref(), "translator")?;
    let fpath = require_checkpoint(cfg.eval.checkpoint.as_ref(), "fusion")?;
    let (t, tps) = Translator::from_checkpoint(&Checkpoint::load(&tpath)?)?;
    let (net, ps) = PoseModel::from_checkpoint(&Checkpoint::load(&fpath)?)?;
    let mods = net.modalities();
    if !matches!(net, PoseModel::Fusion(_)) || !mods.contains(&t.config.source) || !mods.contains(&t.config.target) {
        return Err(Error::Config(format!(
            "{} must be a fusion model over {} and {}",
            fpath.display(),
            t.config.source,
            t.config.target
        )));
    }
    let root = cfg.eval.root.as_ref().unwrap_or(&cfg.dataset.root);
    let layout = open_dataset(root)?;
    let split = split_for(cfg, &layout)?;
    let subjects = split_subjects(&split, cfg.eval.split).to_vec();
    if subjects.is_empty() {
        return Err(Error::Report(format!("the {:?} split has no subjects", cfg.eval.split)));
    }
    let size = net.input_size();
    let variants = [
        (RECONSTRUCT_COLUMNS[0], cfg.dataset.crop, false),
        (RECONSTRUCT_COLUMNS[1], CropMode::SquareBox, true),
        (RECONSTRUCT_COLUMNS[2], CropMode::Full, true),
    ];
    let mut prepared: Vec<Vec<PoseSample>> = vec![Vec::new(); variants.len()];
    let mut shown: BTreeMap<usize, Vec<MultimodalSample>> = BTreeMap::new();
    for &s in &subjects {
        let keys = layout.index(&[s], &mods, &cfg.dataset.covers)?;
        let real = layout.iter(&keys, &mods).collect::<Result<Vec<_>>>()?;
        let synth = synthesize(&t, &tps, &layout, &real)?;
        for (v, &(_, crop, synthetic)) in variants.iter().enumerate() {
            let src = if synthetic { &synth } else { &real };
            for sample in src {
                prepared[v].push(prepare_sample(sample, &layout, &mods, crop, size)?);
            }
            let kept = shown.entry(v).or_default();
            let room = cfg.train.overlays.saturating_sub(kept.len());
            kept.extend(src.iter().take(room).cloned());
        }
    }
    let mut columns = Vec::new();
    for (v, &(name, crop, _)) in variants.iter().enumerate() {
        let (report, preds) = evaluate_samples(&net, &ps, &prepared[v])?;
        for (sample, (pred, gt)) in shown[&v].iter().zip(&preds) {
            let framed = frame(sample, &layout, crop, size)?;
            save_overlay(&mut rec, name, &framed.tag(), framed.image(t.config.target)?, gt, pred)?;
        }
        columns.push((name.to_string(), report));
    }
    record_metrics(&mut rec, &columns, cfg.eval.total)?;
    rec.finish()
}

/// One chart per value column of the configured CSVs, one series per file.
pub fn emit_plots(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    let mut rec = RunRecorder::start(out, "plot", cfg.seed.unwrap_or(0), cfg)?;
    let inputs = &cfg.plot.inputs;
    let first = inputs.first().ok_or_else(|| Error::Plot("no input CSVs configured (plot.inputs)".into()))?;
    let text = std::fs::read_to_string(first).map_err(|e| Error::io(first, e))?;
    let header = text.lines().next().ok_or_else(|| Error::Plot(format!("{} is empty", first.display())))?;
    let columns: Vec<&str> = header.split(',').skip(1).map(str::trim).collect();
    if columns.is_empty() {
        return Err(Error::Plot(format!("{} has no value columns", first.display())));
    }
    for col in columns {
        let mut series: Vec<Series> = inputs.iter().map(|p| read_series(p, col)).collect::<Result<_>>()?;
        let mut names: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        if names.len() < series.len() {
            for (s, p) in series.iter_mut().zip(inputs) {
                s.name = p.display().to_string();
            }
        }
        let path = rec.out().join(format!("plot_{col}.png"));
        line_chart(&path, col, "epoch", col, &series)?;
        rec.add(&path, "plot");
    }
    rec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::table_csv;

    fn report(k: f64) -> PckhReport {
        PckhReport {
            per_joint: std::array::from_fn(|j| k + j as f64),
            total: k + 6.5,
            instance_total: k + 6.0,
            samples: 3,
            excluded: 0,
        }
    }

    #[test]
    fn metrics_table_matches_report_format_and_upserts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let mut t = MetricsTable::load(&p).unwrap();
        t.upsert("a", &report(10.0), TotalMode::JointMean);
        t.upsert("b", &report(20.0), TotalMode::JointMean);
        assert_eq!(t.to_csv(), table_csv(&[("a", &report(10.0)), ("b", &report(20.0))], TotalMode::JointMean));
        t.save(&p).unwrap();
        let mut back = MetricsTable::load(&p).unwrap();
        assert_eq!(back, t);
        back.upsert("a", &report(30.0), TotalMode::JointMean);
        assert_eq!(back.column_names(), ["a", "b"]);
        assert_eq!(back.to_csv(), table_csv(&[("a", &report(30.0)), ("b", &report(20.0))], TotalMode::JointMean));
        back.upsert("b", &report(20.0), TotalMode::InstanceMean);
        assert!(back.to_csv().ends_with("\nTotal,36.50,26.00\n"));
    }

    #[test]
    fn malformed_tables_are_report_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        std::fs::write(&p, "Joint,a\nRight Ankle,1.00\n").unwrap();
        assert!(matches!(MetricsTable::load(&p), Err(Error::Report(_))));
        std::fs::write(&p, "Model,a\n").unwrap();
        assert!(matches!(MetricsTable::load(&p), Err(Error::Report(_))));
    }
}
