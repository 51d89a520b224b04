//! Multi-scale learnable query tokens bridging a frozen autoregressive
//! backbone and a flow-matching diffusion head, with the synthetic data,
//! filtering, and evaluation tooling around them.

pub mod backbone;
pub mod checkpoint;
pub mod connector;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod flowgen;
pub mod msq;
pub mod nn;
pub mod numcore;
pub mod optim;
pub mod pipeline;
pub mod shapeworld;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
