//! Deterministic network simulation: wire codec, adversary, event loop,
//! simulated world and the global property checkers.

pub mod adversary;
pub mod campaign;
pub mod codec;
pub mod invariants;
pub mod network;
pub mod transcript;
pub mod world;
