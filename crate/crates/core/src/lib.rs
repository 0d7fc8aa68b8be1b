//! Core algorithms for unified-prompt interactive segmentation.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, the CLI and
//! the HTTP service live in the companion `vpu` crate.
//!
//! Modules, bottom-up:
//!
//! * [`image`]: image planes and binary masks.
//! * [`pue`]: click / box / scribble encoding into one Gaussian prompt vector.
//! * [`tensor`]: a small tape-based reverse-mode autodiff over dense `f64` arrays.
//! * [`model`]: the network (patch encoder, dual cross-attention blocks, decoder).
//! * [`losses`]: normalized focal, DICE and prompt-to-pixel contrastive losses.
//! * [`interact`]: simulated users, session execution and NoC/NoF/IoU@k metrics.
//! * [`optim`]: Adam.
//! * [`train`]: iterative-prompt training step.
//! * [`synth`]: synthetic shapes instances with ground-truth masks.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod error;
pub mod image;
pub mod interact;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pue;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{BinaryMask, ImagePlane, ProbMap};
pub use pue::{EncoderConfig, Prompt, PromptKind, PromptVector};
pub use tensor::{Graph, Tensor, Var};
