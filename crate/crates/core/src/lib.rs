//! Desk-scale toolkit for pixel-level watermark removal research.
//!
//! Two attacks share one data model: a patch-masking autoencoder attack
//! ([`hsn`]) and a masker-guided, autoregressive pixel reconstruction attack
//! ([`hsplus`]). Toy watermarkers ([`watermark`]), image manipulations,
//! metrics, losses, and an exhaustive checker for the reconstruction-order
//! argument ([`order_theory`]) complete the toolkit.

pub mod checkpoint;
pub mod empirical;
pub mod error;
pub mod features;
pub mod hsn;
pub mod hsplus;
pub mod io;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod order_theory;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{apply_mask, Cell, Granularity, ImageTensor, Mask, PatchGrid, RealMap, SoftMask, ValueDomain};
