//! Class-wise feature route attribution for small convolutional classifiers,
//! with model disassembly into per-class sub-models and reassembly of
//! sub-models into multi-class ones.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod format;
pub mod network;
pub mod routeviz;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use attribution::{
    attribute_class, build_mask, build_mask_raw, union_masks, AttributionMap, RouteMask, SaliencyMode, SamplePolicy,
};
pub use autodiff::{Tape, Target};
pub use data::{load_idx, Dataset};
pub use error::{Error, Result};
pub use format::{load_model, save_model};
pub use network::{lenet, Label, LayerSpec, Model};
pub use surgery::{assemble_cross, assemble_same, bridge, disassemble, stats, CompressionStats, SubModelPlan};
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, evaluate_restricted, fine_tune, train, TrainConfig};
