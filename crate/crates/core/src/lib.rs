//! Simulation laboratory for pipelined BFT blockchains.

pub mod consensus;
pub mod execution;
pub mod harness;
pub mod hash;
pub mod message;
pub mod multisig;
pub mod nodes;
pub mod pipeline;
mod serde_pairs;
pub mod simnet;
pub mod storage;
pub mod types;

pub use execution::{execute, inclusion_proof, state_digest, verify_proof, ChainState, GasConfig};
pub use hash::Digest;
pub use types::*;
