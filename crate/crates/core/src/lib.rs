//! Visibility-aware dense body estimation core.
//!
//! The crate covers the numerical pipeline downstream of a dense body
//! network: a parametric body model with linear blend skinning, the 1D
//! heatmap coordinate codec, dense visibility labels derived from UV
//! correspondences, every training and fitting loss with analytic
//! gradients, an Adam-based model fitter, and the evaluation metrics.

pub mod body_model;
pub mod error;
pub mod evaluation;
pub mod fitter;
pub mod gradcheck;
pub mod io;
pub mod objectives;
pub mod obj;
pub mod projection;
pub mod synth;
pub mod visibility;

pub use error::{Error, Result};
