//! Linear template walking: closed-form stride maps, periodic gaits,
//! stride-to-stride LQR and continuous time-projecting feedback.

pub mod analysis;
pub mod config;
pub mod ctpc;
pub mod error;
pub mod export;
pub mod gait;
pub mod harness;
pub mod linmodel;
pub mod search;
pub mod serde_util;
pub mod stepctl;

pub use error::{Error, Result};
