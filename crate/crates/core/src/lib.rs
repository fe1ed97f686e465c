//! Dual-branch focused attention for weakly supervised localization, with the
//! small trainable CNN, synthetic benchmark, and CAM evaluation pipeline that
//! exercise it end to end.

pub mod cam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dfm;
pub mod error;
pub mod io;
pub mod layers;
pub mod net;
pub mod rng;
pub mod tensor;

pub use error::{CoreError, Result};
