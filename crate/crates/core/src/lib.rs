//! Robust graph information bottleneck.
//!
//! Unsupervised node embeddings trained with a min-max objective: a feature
//! PGD attacker minimises a mutual-information objective while the encoder
//! maximises it. See the README for the CLI and file formats.

pub mod attack;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod mi;
pub mod rng;
pub mod sparse;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
