//! Multi-task clarity regression and foreground segmentation.
//!
//! A small shared-encoder network predicts an image clarity score and a
//! per-pixel foreground mask in one pass. Everything it needs is here: a
//! reverse-mode autodiff engine, the gated multi-task objective, a synthetic
//! blur/segmentation dataset, SGD training in two strategies, evaluation
//! metrics and a cover assessment record built from both outputs.

pub mod assess;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Activation, ConvGeom, Reduction, Tape, Var};
pub use network::{GroupSet, MultiTaskNet, NetConfig, NetError, ParamGroup};
pub use tensor::{Element, Tensor, TensorError};
