//! Siamese trackers with a compact latent network for first-frame adaptation.

pub mod analysis;
pub mod checkpoint;
pub mod clnet;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod geometry;
pub mod nn;
pub mod patch;
pub mod siamese;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use checkpoint::Checkpoint;
pub use clnet::{
    adjusted_forward, augment_weights, fc_adjust, latent_encode, Augmentation, Branch, BranchNet, ClNet, ClNetConfig,
    FcDeltaMode, LatentFeature, NormMode, WeightDelta,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{assign_labels, generate_anchors, iou, AnchorGrid, BBox, Label, LabelMap};
pub use nn::Params;
pub use siamese::{dw_xcorr_heads, head_forward, BackboneConfig, FcModel, HeadWeights, RpnModel};
pub use tensor::FeatureMap;
