//! branchtail: simulation and numerical verification toolkit for the
//! branching fixed-point equation R =_D sum_{i<=N} C_i R_i + Q with
//! real-valued (possibly negative) weights.
//!
//! The crate is organized around the pipeline:
//! law ([`law`]) -> tree sampling ([`treesim`]) -> moment analysis
//! ([`moments`]) -> tail constants ([`tail`]), with exact small-law
//! machinery in [`oracle`] and the tilted measure algebra in [`renewal`].

mod emp;
pub mod error;
pub mod treesim;
pub mod law;
pub mod moments;
pub mod oracle;
pub mod renewal;
pub mod tail;
pub mod rng;

pub use error::{Error, Result};
pub use law::{parse_law, BranchingLaw};
pub use rng::StreamRng;
