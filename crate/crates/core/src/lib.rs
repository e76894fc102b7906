//! Hierarchical self-supervised representation learning from video.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod videogen;

pub use error::{Error, Result};
