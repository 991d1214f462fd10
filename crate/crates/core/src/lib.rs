//! Inverse procedural material fitting for indoor photographs.
//!
//! Given aligned photographs, per-pixel geometry and lighting estimates, and
//! material part masks, this crate recovers procedural material-graph
//! parameters, UV placements, and global light intensities so that re-rendered
//! parts match the photos. The layers, bottom to top:
//!
//! * [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode autodiff;
//! * [`matgraph`]: procedural texture graphs producing albedo/normal/roughness;
//! * [`render`]: differentiable per-part shading under spatially-varying
//!   lighting grids;
//! * [`align`]: mask matching and box warping between photo and geometry
//!   rasters, plus fitting-view selection;
//! * [`fit`]: statistics + feature losses, graph selection, and the material
//!   optimizers;
//! * [`relight`]: global light-intensity and per-view exposure solves;
//! * [`bundle`]: on-disk scene bundles (manifest + images) and fitted-asset
//!   output;
//! * [`pipeline`]: end-to-end stages behind the CLI, plus baselines, metrics,
//!   and synthetic scene generation.

pub mod align;
pub mod bundle;
pub mod fit;
pub mod gradcheck;
pub mod matgraph;
pub mod metrics;
pub mod pfm;
pub mod pipeline;
pub mod relight;
pub mod render;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use tape::{AdError, Gradients, Tape, Var};
pub use tensor::Tensor;
