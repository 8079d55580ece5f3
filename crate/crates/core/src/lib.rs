//! Image forgery detection: resampling/compression classifiers over Radon
//! periodicity features, a Zernike-moment copy-move detector, and a cascade
//! that fuses both into an image-level decision with a localization mask.

pub mod copymove;
pub mod error;
pub mod eval;
pub mod features;
pub mod imaging;
pub mod mlp;
pub mod resample;
pub mod seg;
pub mod synth;

pub use error::{Error, Result};
