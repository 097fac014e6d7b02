//! Multimodal in-bed pose estimation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`graph`]), a
//! multi-branch high-resolution heatmap backbone ([`backbone`]), intermediate
//! feature fusion across modalities ([`fusion`]), a conditional GAN for
//! cross-modality image translation ([`reconstruction`]), dataset handling
//! ([`data`]), evaluation ([`metrics`]) and experiment orchestration
//! ([`harness`]).

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod modality;
pub mod nn;
pub mod optim;
pub mod reconstruction;
pub mod tensor;

pub use error::{Error, Result};
pub use backbone::{Backbone, BackboneConfig, BranchFeatureSet, Heatmaps, JOINTS, NUM_JOINTS};
pub use graph::{Graph, Var};
pub use modality::{Cover, Modality};
pub use nn::{Mode, ParamId, ParamStore};
pub use tensor::{Element, Tensor};
