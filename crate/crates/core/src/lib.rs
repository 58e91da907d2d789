//! bisimkit: exact bisimulation metrics on finite MDPs, value-bound
//! certification, and bisimulation-based representation learning on
//! small distractor environments.

pub mod bisim;
pub mod config;
pub mod dbc;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod ot;
pub mod sac;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
