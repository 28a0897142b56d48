//! Application messages carried inside STCP records.

use super::{ProcedureKind, Step};
use crate::crypto::{self, Digest, Signature};
use crate::pki::Identity;
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

/// One procedure message. Commands from the TSM and MA carry a signature
/// under the sender's command key, bound to the session transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppMessage {
    pub procedure: ProcedureKind,
    pub run: u64,
    pub step: Step,
    pub body: Vec<u8>,
    pub command_sig: Option<Signature>,
}

impl AppMessage {
    pub fn signed_bytes(&self, transcript_hash: &Digest) -> Vec<u8> {
        crypto::hash_parts(&[
            b"teecred/command",
            &transcript_hash.0,
            &self.procedure.to_bytes(),
            &self.run.to_be_bytes(),
            &self.step.to_bytes(),
            &self.body,
        ])
        .0
        .to_vec()
    }
}

impl Canonical for AppMessage {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.procedure);
        w.put(&self.run);
        w.put(&self.step);
        w.put_bytes(&self.body);
        w.put(&self.command_sig);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            procedure: r.get()?,
            run: r.get()?,
            step: r.get()?,
            body: r.bytes()?,
            command_sig: r.get()?,
        })
    }
}

/// Where to reach another TA or authority: identity, network address and the
/// certificate fingerprint the initiator pins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetInfo {
    pub identity: Identity,
    pub address: String,
    pub fingerprint: Digest,
}

impl TargetInfo {
    pub fn address_of(identity: &Identity) -> String {
        format!("sim://{}", identity.id)
    }
}

impl Canonical for TargetInfo {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.identity);
        w.put(&self.address);
        w.put(&self.fingerprint);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            identity: r.get()?,
            address: r.get()?,
            fingerprint: r.get()?,
        })
    }
}
