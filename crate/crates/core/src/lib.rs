//! Simulation and reconstruction for dense one-bit ("jot") image sensors.
//!
//! The forward model turns a latent intensity image into stacks of binary
//! frames: the image is upsampled onto the jot grid, blurred by the optical
//! PSF, Poisson photoelectrons are drawn per jot and frame, and each jot fires
//! when its count reaches its threshold. Reconstruction inverts this with
//!
//! * [`solvers::ml_reconstruct`]: projected gradient descent on the
//!   binary-Poisson negative log-likelihood, no prior;
//! * [`solvers::fista_reconstruct`]: proximal gradient over a sparse code in a
//!   learned [`sparse::Dictionary`], patch by patch, with overlap averaging;
//! * [`mlnet`]: a fixed number of unrolled ISTA iterations trained end to end.
//!
//! Data-parallel loops (frames, patches, training samples) go through
//! [`par`], which uses rayon when the `parallel` feature is on and plain
//! iterators otherwise. Results are identical either way.

pub mod error;
pub mod formats;
pub mod harness;
pub mod ksvd;
pub mod likelihood;
pub mod metrics;
pub mod mlnet;
pub mod par;
pub mod sensor;
pub mod solvers;
pub mod sparse;
pub mod synth;

pub use error::{Error, Result};
pub use likelihood::Measurements;
pub use sensor::{
    BinaryFrameStack, DenseOperator, ForwardOperator, IntensityImage, LinearOperator, Psf,
    RngState, ThresholdMap,
};
pub use sparse::{Dictionary, Nonlinearity, PatchGrid};
