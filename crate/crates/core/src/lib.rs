//! Segmentation-guided sparse transformer for under-display-camera image
//! restoration, with a degradation simulator that synthesizes its own
//! training pairs.

pub mod attention;
pub mod autograd;
pub mod cli;
pub mod blocks;
pub mod container;
pub mod degrade;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod gradsuite;
pub mod imageio;
pub mod layers;
pub mod model;
pub mod params;
pub mod seg;
pub mod tensor;
pub mod train;

pub use autograd::{Ctx, Gradients, Mode, PadMode, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
