//! Core of the relighting engine: a small reverse-mode autodiff library over
//! rank-4 tensors, the self-calibrated encoder/decoder blocks, the
//! three-subnetwork light source transfer model, training losses, image
//! quality metrics and a deterministic synthetic scene renderer.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only
//! enables runtime CPU feature detection in the GEMM backend and a
//! frequency-domain path for large convolution kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod blocks;
pub mod error;
#[cfg(feature = "std")]
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use blocks::Norm;
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use metrics::MetricReport;
pub use net::{ArchConfig, ModelBundle, Network, Outputs, Variant};
pub use optim::{AdamConfig, AdamState};
pub use params::{Bound, ParamStore};
pub use tape::{Activation, BinaryKind, Tape, Var};
pub use tensor::{Scalar, Shape, Tensor};
pub use train::{Batch, StepLosses, Trainer};
