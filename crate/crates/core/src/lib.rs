//! Static input scales for LayerNorm/RMSNorm computed from model weights,
//! with a binary16-emulating forward pass to check that the scaled norms
//! neither overflow nor underflow.

pub mod cli;
pub mod engine;
pub mod fp16;
pub mod json;
pub mod linalg;
pub mod model;
pub mod report;
pub mod scales;
