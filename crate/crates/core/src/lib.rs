//! Weakly supervised lesion segmentation with class-conditional diffusion models.
//!
//! A denoiser is trained on diseased images and their healthy counterfactuals.
//! At inference the noise predicted under the healthy and the diseased label is
//! differenced; the difference map is thresholded at several timesteps, the
//! resulting masks are summarised into uncertainty maps, and a dense CRF
//! refines random subsets of them into one final mask.

pub mod data;
pub mod densecrf;
pub mod diffseg;
pub mod diffusion;
pub mod error;
pub mod filter;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod refine;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
pub use raster::{BinaryMask, Image, RealMap};
pub use rng::RngStream;
