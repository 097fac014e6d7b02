//! Experiment configuration.
//!
//! A TOML document whose keys are namespaced by table:
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! root = "data/synthetic"
//! split = "default"            # or "all": train and evaluate on every subject
//! covers = ["uncover", "cover1", "cover2"]
//! crop = "square_box"          # or "full"
//! subjects = 6                 # gen-data only
//! poses = 12
//! profile = "danalab"
//!
//! [backbone]
//! preset = "tiny"              # or "w32"
//! input_size = 128             # optional override of the preset
//!
//! [train]
//! modality = "lwir"            # train-unimodal
//! epochs = 100
//! batch_size = 64
//! lr = 1e-3
//!
//! [fusion]
//! stage = 3
//! fusion_type = "concatenation"
//! strategy = "end_to_end"
//! modalities = ["visible", "lwir"]
//! primary = "visible"
//! checkpoints = { visible = "runs/vis/checkpoints/unimodal_visible.ckpt" }
//!
//! [gan]
//! source = "lwir"
//! target = "visible"
//! preset = "tiny"
//! epochs_total = 200
//!
//! [eval]
//! checkpoint = "runs/fusion/checkpoints/fusion.ckpt"
//! split = "test"
//! total = "joint_mean"         # or "instance_mean"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::synthetic::{Profile, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionType, Strategy};
use crate::metrics::TotalMode;
use crate::harness::pose::{CropMode, PoseSchedule};
use crate::modality::{Cover, Modality};
use crate::reconstruction::{GanObjectiveConfig, TranslationConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub train: TrainSection,
    pub fusion: Option<FusionSection>,
    pub gan: Option<GanSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub plot: PlotSection,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Subject-disjoint train/validation/test split.
    #[default]
    Default,
    /// Every subject in both training and evaluation sets.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub split: SplitMode,
    pub covers: Vec<Cover>,
    pub crop: CropMode,
    pub subjects: u32,
    pub poses: u32,
    pub profile: Profile,
    pub residual_heat: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            split: SplitMode::Default,
            covers: Cover::ALL.to_vec(),
            crop: CropMode::SquareBox,
            subjects: 8,
            poses: 16,
            profile: Profile::Danalab,
            residual_heat: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub preset: String,
    /// Overrides the preset's square input side.
    pub input_size: Option<usize>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            preset: "w32".into(),
            input_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub modality: Option<Modality>,
    pub epochs: usize,
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Overlays rendered after evaluation.
    pub overlays: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = PoseSchedule::default();
        Self {
            modality: None,
            epochs: s.epochs,
            steps: s.steps,
            batch_size: s.batch_size,
            lr: s.lr,
            lr_milestones: s.lr_milestones,
            lr_gamma: s.lr_gamma,
            overlays: 4,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> PoseSchedule {
        PoseSchedule {
            epochs: self.epochs,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_milestones: self.lr_milestones.clone(),
            lr_gamma: self.lr_gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub stage: usize,
    pub fusion_type: FusionType,
    pub strategy: Strategy,
    pub modalities: Vec<Modality>,
    pub primary: Modality,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    /// Uni-modal checkpoints per modality; required by frozen strategies,
    /// used as initialization by end-to-end training when present.
    #[serde(default)]
    pub checkpoints: BTreeMap<Modality, PathBuf>,
}

fn default_dropout() -> f64 {
    0.2
}

impl FusionSection {
    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            dropout_p: self.dropout_p,
            ..FusionConfig::new(self.stage, self.fusion_type, self.strategy, self.modalities.clone(), self.primary)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSection {
    #[serde(default = "default_source")]
    pub source: Modality,
    #[serde(default = "default_target")]
    pub target: Modality,
    #[serde(default = "default_gan_preset")]
    pub preset: String,
    #[serde(flatten)]
    pub objective: GanObjectiveConfig,
    /// Translator checkpoint for reconstruct-eval.
    pub checkpoint: Option<PathBuf>,
}

fn default_source() -> Modality {
    Modality::Lwir
}

fn default_target() -> Modality {
    Modality::Visible
}

fn default_gan_preset() -> String {
    "standard".into()
}

impl GanSection {
    pub fn translation_config(&self) -> Result<TranslationConfig> {
        let tiny = match self.preset.as_str() {
            "tiny" => true,
            "standard" => false,
            p => return Err(Error::Config(format!("unknown gan preset `{p}`"))),
        };
        Ok(TranslationConfig {
            objective: self.objective.clone(),
            ..TranslationConfig::new(self.source, self.target, tiny)
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Pose checkpoint for evaluate, fusion checkpoint for reconstruct-eval.
    pub checkpoint: Option<PathBuf>,
    pub split: EvalSplit,
    /// Dataset to evaluate on instead of `dataset.root`.
    pub root: Option<PathBuf>,
    /// Metrics column name; derived from the model when absent.
    pub label: Option<String>,
    /// How the `Total` row is formed.
    pub total: TotalMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotSection {
    /// Loss CSVs to draw; one series per file.
    pub inputs: Vec<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and parses `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.root);
        if let Some(f) = &mut self.fusion {
            f.checkpoints.values_mut().for_each(fix);
        }
        if let Some(p) = self.gan.as_mut().and_then(|g| g.checkpoint.as_mut()) {
            fix(p);
        }
        if let Some(p) = &mut self.eval.checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.eval.root {
            fix(p);
        }
        self.plot.inputs.iter_mut().for_each(fix);
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn backbone_config(&self, m: Modality) -> Result<BackboneConfig> {
        let mut cfg = BackboneConfig::preset(&self.backbone.preset, m.channels())?;
        if let Some(s) = self.backbone.input_size {
            cfg.input_size = s;
        }
        Ok(cfg)
    }

    pub fn synthetic_config(&self) -> Result<SyntheticConfig> {
        Ok(SyntheticConfig {
            profile: self.dataset.profile,
            covers: self.dataset.covers.clone(),
            residual_heat: self.dataset.residual_heat,
            ..SyntheticConfig::new(self.dataset.subjects, self.dataset.poses, self.seed()?)
        })
    }

    /// Checks everything that does not need the file system.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.dataset.covers.is_empty() {
            return Err(Error::Config("dataset.covers is empty".into()));
        }
        self.backbone_config(Modality::Lwir)?.validate()?;
        self.train.schedule().validate()?;
        if let Some(f) = &self.fusion {
            f.fusion_config().validate()?;
            if let Some(m) = f.checkpoints.keys().find(|m| !f.modalities.contains(m)) {
                return Err(Error::Config(format!("fusion checkpoint given for {m}, which is not fused")));
            }
        }
        if let Some(g) = &self.gan {
            g.translation_config()?.validate()?;
        }
        Ok(())
    }

    /// Fusion section, required by fusion commands.
    pub fn fusion(&self) -> Result<&FusionSection> {
        self.fusion.as_ref().ok_or_else(|| Error::Config("missing [fusion] section".into()))
    }

    pub fn gan(&self) -> Result<&GanSection> {
        self.gan.as_ref().ok_or_else(|| Error::Config("missing [gan] section".into()))
    }

    /// Frozen strategies need a uni-modal checkpoint for every fused modality.
    pub fn check_fusion_checkpoints(&self) -> Result<()> {
        let f = self.fusion()?;
        if f.strategy.is_frozen() {
            for m in &f.modalities {
                let p = f.checkpoints.get(m).ok_or_else(|| {
                    Error::Config(format!("{:?} fusion needs a uni-modal checkpoint for {m}", f.strategy))
                })?;
                if !p.is_file() {
                    return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 3
[dataset]
root = "d"
covers = ["uncover"]
[backbone]
preset = "tiny"
[train]
modality = "lwir"
steps = 5
[fusion]
stage = 3
fusion_type = "concatenation"
strategy = "frozen_weighted"
modalities = ["visible", "lwir"]
primary = "visible"
checkpoints = { visible = "a.ckpt", lwir = "b.ckpt" }
[gan]
preset = "tiny"
epochs_total = 30
lr_constant_epochs = 15
"#;

    #[test]
    fn parses_namespaced_sections() {
        let mut cfg = ExperimentConfig::parse(FULL).unwrap();
        cfg.validate().unwrap();
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.dataset.root, Path::new("/base/d"));
        let f = cfg.fusion().unwrap();
        assert_eq!(f.checkpoints[&Modality::Lwir], Path::new("/base/b.ckpt"));
        assert_eq!(f.dropout_p, 0.2);
        let g = cfg.gan().unwrap().translation_config().unwrap();
        assert_eq!((g.objective.epochs_total, g.objective.lambda_l1), (30, 100.0));
        assert_eq!(cfg.train.schedule().steps, Some(5));
    }

    #[test]
    fn rejects_bad_documents() {
        let cases = [
            FULL.replace("seed = 3", ""),
            FULL.replace(r#"modalities = ["visible", "lwir"]"#, r#"modalities = ["visible"]"#),
            FULL.replace(r#"modality = "lwir""#, r#"modality = "thermal""#),
            FULL.replace("[fusion]", "[fusion]\ndropout_p = 1.0"),
            FULL.replace("[fusion]\nstage = 3", "[fusion]\nstage = 4"),
            FULL.replace("[train]", "[train]\nbogus = 1"),
            FULL.replace(r#"preset = "tiny"
[train]"#, r#"preset = "w48"
[train]"#),
        ];
        for (i, text) in cases.iter().enumerate() {
            let r = ExperimentConfig::parse(text).and_then(|c| c.validate());
            assert!(matches!(r, Err(Error::Config(_))), "case {i}: {r:?}");
        }
    }

    #[test]
    fn frozen_fusion_requires_existing_checkpoints() {
        let cfg = ExperimentConfig::parse(FULL).unwrap();
        assert!(matches!(cfg.check_fusion_checkpoints(), Err(Error::Config(_))));
    }
}
