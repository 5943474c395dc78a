//! Weakly-supervised localization and segmentation of small bright round
//! targets ("nodules") in grayscale images.
//!
//! A small CNN with global-average-pooling heads is trained on slice-level
//! labels only. Its dense-layer weights turn head activations into a nodule
//! activation map ([`nam`]); the map's most prominent watershed blob bounds a
//! multi-phase ICM segmentation, and masking each candidate in turn
//! (residual maps) picks the one that explains the activation ([`segment`]).
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors, layer kernels, reverse-mode tape
//! - [`model`]: the GAP-headed classifier, training, weight files
//! - [`nam`]: activation maps, residual maps, the screening distance
//! - [`segment`]: watershed scope, ICM, candidates, fine selection, pipeline
//! - [`data`]: synthetic generator, stratified split, PGM and dataset I/O
//! - [`eval`]: Dice, detection rates, size-binned reports

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nam;
pub mod region;
pub mod segment;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Label, Model, ModelConfig};
pub use nam::Nam;
pub use region::{BBox, Pixel, PixelSet};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/activation_maps.md")]
    pub mod activation_maps {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    pub mod segmentation {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
