//! Motion-aware feature-cache reuse for edge/cloud video inference.

pub mod bench;
pub mod cache;
pub mod calibration;
pub mod dispatch;
pub mod error;
pub mod link;
pub mod modes;
pub mod motion;
pub mod pipeline;
pub mod refnet;
pub mod reuse;
pub mod rfap;
pub mod scenes;
pub mod server;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
