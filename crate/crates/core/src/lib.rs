//! Weakly supervised object localization with a multiscale attention
//! transformer and clustering-guided map refinement.

pub mod cam;
pub mod encoder;
pub mod error;
pub mod io;
pub mod localize;
pub mod multiscale;
pub mod numerics;
pub mod pipeline;
pub mod refine;
pub mod segmenter;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
