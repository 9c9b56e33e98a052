//! Reference-tracking stochastic MPC over lossy Bernoulli channels with hard
//! input bounds.

pub mod channel;
pub mod compensator;
pub mod config;
pub mod error;
pub mod governor;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod policy;
pub mod qp;
pub mod rng;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
