//! Credential lifecycle management for trusted applications, with a
//! deterministic network simulator to attack it.
//!
//! Start with [`scenario::Scenario`] to run procedures from a TOML file, or
//! build a [`simnet::world::World`] and call the functions in
//! [`procedures`] directly. The guide in `book/` covers the file format, the
//! procedures and the adversary model.

pub mod actors;
pub mod attest;
pub mod crypto;
pub mod pki;
pub mod procedures;
pub mod scenario;
pub mod simnet;
pub mod stcp;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/procedures.md")]
    mod procedures {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/adversary.md")]
    mod adversary {}
    #[doc = include_str!("../../../book/src/invariants.md")]
    mod invariants {}
    #[doc = include_str!("../../../book/src/transcripts.md")]
    mod transcripts {}
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
}
