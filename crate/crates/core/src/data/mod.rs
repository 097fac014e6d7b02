//! Datasets: on-disk layout, preprocessing into the common network frame,
//! heatmap targets, translation pairs and a synthetic generator.

mod image;
pub mod layout;
pub mod preprocess;
pub mod synthetic;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use self::image::Image;
pub use layout::{load_slp_layout, AlignmentSpec, ChannelStats, DatasetLayout, DatasetStats, SampleKey};
pub use preprocess::{
    align_and_resize, composite_on_white, make_target_heatmaps, normalize, prepare_translation_pairs,
    reference_frame_joints, square_crop, translation_box, translation_crop, warp, Affine, BBox, TranslationPair,
    BBOX_MARGIN, HEATMAP_SIGMA, NORM_EPS,
};

use crate::backbone::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::modality::{Cover, Modality};

/// 14 `(x, y)` joint positions in continuous pixel coordinates.
pub type Joints = [[f64; 2]; NUM_JOINTS];

/// Coordinate frame that a sample's joints refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    /// Native pixel grid of the named modality.
    Native(Modality),
    /// Square network frame of the given side, shared by every image.
    Common(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub subject: u32,
    pub pose: u32,
    pub cover: Cover,
    pub images: BTreeMap<Modality, Image>,
    pub joints: Joints,
    pub frame: Frame,
}

impl MultimodalSample {
    pub fn image(&self, m: Modality) -> Result<&Image> {
        self.images
            .get(&m)
            .ok_or_else(|| Error::Input(format!("sample {}/{} has no {m} image", self.subject, self.pose)))
    }

    /// Name used for per-sample artefacts: `<subject>_<pose>_<cover>`.
    pub fn tag(&self) -> String {
        format!("{:05}_{:06}_{}", self.subject, self.pose, self.cover)
    }
}

/// Subject partition. Validation subjects are a subset of the training pool
/// held out for checkpoint selection; train and test are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl DatasetSplit {
    /// Sorted subjects split 90:12 into a training pool and a test set (so
    /// 102 subjects give the first 90 and the following 12), with at least
    /// one test subject. The last tenth of the pool is validation.
    pub fn default_for(subjects: &[u32]) -> Result<Self> {
        let mut s = subjects.to_vec();
        s.sort_unstable();
        s.dedup();
        let n = s.len();
        if n < 2 {
            return Err(Error::Config(format!("a train/test split needs at least 2 subjects, got {n}")));
        }
        let n_test = ((n as f64 * 12.0 / 102.0).round() as usize).clamp(1, n - 1);
        let n_train = n - n_test;
        let pool = &s[..n_train];
        let n_val = (n_train as f64 / 10.0).round() as usize;
        let split = Self {
            train: pool[..n_train - n_val].to_vec(),
            val: pool[n_train - n_val..].to_vec(),
            test: s[n_train..n_train + n_test].to_vec(),
        };
        Ok(split)
    }

    /// Every subject is used for both training and evaluation.
    pub fn all(subjects: &[u32]) -> Self {
        Self {
            train: subjects.to_vec(),
            val: Vec::new(),
            test: subjects.to_vec(),
        }
    }

    /// Subjects optimised on: the training pool minus validation.
    pub fn fit_subjects(&self) -> &[u32] {
        &self.train
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_on_102_subjects() {
        let ids: Vec<u32> = (1..=102).collect();
        let s = DatasetSplit::default_for(&ids).unwrap();
        assert_eq!(s.train, (1..=81).collect::<Vec<_>>());
        assert_eq!(s.val, (82..=90).collect::<Vec<_>>());
        assert_eq!(s.test, (91..=102).collect::<Vec<_>>());
    }
}
