//! Two-stage personalized federated learning: a shared encoder learned with a
//! supervised contrastive loss, then per-client classifier heads on frozen features.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod numerics;
pub mod report;
pub mod supcon;

pub use error::{Error, Result};
