//! ProFe: decentralized federated learning with knowledge distillation,
//! class prototypes and 16-bit model exchange, plus FedAvg and FedProto
//! baselines, as a deterministic in-process simulator.

pub mod codec;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod federation;
pub mod harness;
pub mod nn;
pub mod prototype;
pub mod seed;

pub use error::{Error, Result};
