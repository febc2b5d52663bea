//! Distributed-acoustic-sensing traffic analysis: synthetic waterfalls,
//! event framing, labelled sample sets, from-scratch 1D/2D CNNs and
//! accuracy reporting.

mod binio;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod framing;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod sim;
pub mod waterfall;

pub use error::{Error, Result};
