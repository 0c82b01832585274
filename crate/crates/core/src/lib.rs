//! Rectified flow matching and advantage-weighted forward-process RL on
//! low-dimensional toy tasks.

pub mod error;
pub mod flow;
pub mod harness;
pub mod net;
pub mod nft;
pub mod rl;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
