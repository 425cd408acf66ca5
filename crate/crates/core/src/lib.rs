//! Multi-scale context aggregation on a small reverse-mode autodiff core.
//!
//! The crate is `no_std` + `alloc`. It provides:
//!
//! * [`tensor`], [`tape`], [`ops`]: dense `f64` tensors and differentiable
//!   primitives (convolution, pooling, bilinear resize, softmax, RoIAlign,
//!   fused losses) with a reverse-mode tape, plus [`gradcheck`] and [`optim`].
//! * [`pyramid`]: lateral reduction of backbone maps into a uniform-width
//!   feature pyramid.
//! * [`densefpn`]: stacked top-down/bottom-up dense fusion blocks with
//!   softmax-normalized cross-level weights.
//! * [`scp`]: per-level gated global-context blocks.
//! * [`hroie`]: RoIAlign crops from every level fused hierarchically with
//!   sigmoid gates, bottom-up for detection and top-down for masks.
//! * [`accounting`]: exact parameter and multiply-accumulate counts.
//! * [`toy`]: a synthetic instance-segmentation pipeline exercising all of the above.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod accounting;
pub mod densefpn;
pub mod error;
pub mod gradcheck;
pub mod hroie;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod pyramid;
pub mod scp;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
