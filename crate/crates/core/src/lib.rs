//! Synthetic multispectral photoacoustic image generation.
//!
//! The crate covers the simulation side of the toolkit: probabilistic
//! tissue geometry generation, per-class optical property assignment from
//! chromophore spectra, voxel Monte Carlo light transport, and the
//! mask-to-dataset pipeline with its file formats.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod forearm;
pub mod labelmap;
pub mod mc;
pub mod optics;
pub mod pipeline;
pub mod rng;
pub mod spectra;
pub mod tissue;
pub mod volio;

pub use error::{CoreError, Result};
pub use rng::Rng64;
pub use tissue::{TissueClass, NUM_CLASSES};
