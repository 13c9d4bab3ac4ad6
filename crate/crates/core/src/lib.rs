//! Distributed data-driven zeroing control barrier functions for connectivity
//! maintenance in leader-follower multi-agent systems with unknown dynamics.
//!
//! The pipeline is: roll out the (unknown) system to collect barrier
//! derivative samples ([`data`]), fit componentwise Jacobian interval bounds
//! with a pairwise LP ([`bounds`]), then at every control step pick an anchor
//! sample per barrier and split its certificate into per-leader constraints
//! ([`certify`]) that each leader enforces with a slack-penalized QP ([`qp`]).
//! [`sim`] runs the closed loop and the dataset-size / bound-scale study.

pub mod barriers;
pub mod bounds;
pub mod certify;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
