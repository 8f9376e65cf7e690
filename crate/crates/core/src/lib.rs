//! Desk-scale simulator of architecture-agnostic federated MRI
//! reconstruction: sites jointly train a site-prompted multi-scale
//! autoregressive image prior via weighted parameter averaging, then each
//! site trains its own reconstruction network on local data plus synthetic
//! data sampled from the prior under other sites' prompts.

pub mod ar_transformer;
pub mod config;
pub mod datasets;
pub mod error;
pub mod federation;
pub mod imaging;
pub mod nn;
pub mod numerics;
pub mod persistence;
pub mod pipeline;
pub mod recon;
pub mod vq_codec;

pub use error::{Error, Result};
pub use numerics::{ParamSet, Tensor};
