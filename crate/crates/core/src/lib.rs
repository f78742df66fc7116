//! Multi-task road extraction: joint road-region and road-border prediction
//! with border-aware graph reasoning.

pub mod attention;
pub mod cli;
pub mod border_head;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod structure_gnn;
pub mod train;

pub use error::{Error, Result};
