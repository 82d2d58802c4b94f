//! Volumetric 3D-ResNet classification with Layer Grad-CAM explanations and
//! Heat-Score localization, plus the training and evaluation harness around
//! them.

pub mod io;
pub mod phantom;
pub mod resnet;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod volume;
pub mod xai;

pub use tensor::{Element, Tensor, TensorError};
pub use volume::{Volume, VolumeError};
