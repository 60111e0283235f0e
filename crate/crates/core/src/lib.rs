//! Split variational information bottleneck (VIB) training across simulated
//! user devices and servers, with a Raft-lite consensus ledger recording the
//! mutual-information bounds of every batch and a DoS fault injector.
//!
//! Devices host the Gaussian encoder, servers host the classifier decoder.
//! Each training round moves latent statistics device → server and split
//! gradients server → device; servers then hand their ledgers to the leader,
//! which commits a hash-linked block when a quorum of followers responds.

pub mod attack;
pub mod checkpoint;
pub mod consensus;
pub mod data;
pub mod error;
pub mod ledger;
pub mod node;
pub mod numerics;
pub mod orchestrator;
pub mod rng;
pub mod split;
pub mod vib;

pub use error::{Error, Result};
pub use node::NodeId;
