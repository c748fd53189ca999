//! Clockwork diffusion: a split UNet whose low-resolution core is replaced
//! on scheduled steps by a lightweight adaptor fed with the previous step's
//! representation.

pub mod error;
pub mod numerics;
pub mod adaptor;
pub mod analysis;
pub mod clockwork;
pub mod sampler;
pub mod store;
pub mod unet;
pub mod cost;
pub mod distill;
pub mod cli;

pub use error::{Error, Result};
pub use numerics::Tensor;
