//! Single-level PKI: one certificate authority certifies the attestation and
//! command keys of every TSM, TA and authority in a world.

use std::fmt;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

/// Simulation tick. Certificates are valid over an inclusive tick window.
pub type LogicalTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "TA")]
    Ta,
    #[serde(rename = "TSM")]
    Tsm,
    #[serde(rename = "BA")]
    Ba,
    #[serde(rename = "RA")]
    Ra,
    #[serde(rename = "MA")]
    Ma,
    #[serde(rename = "CA")]
    Ca,
}

impl Role {
    const ALL: [Role; 6] = [Role::Ta, Role::Tsm, Role::Ba, Role::Ra, Role::Ma, Role::Ca];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Ta => "TA",
            Role::Tsm => "TSM",
            Role::Ba => "BA",
            Role::Ra => "RA",
            Role::Ma => "MA",
            Role::Ca => "CA",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Canonical for Role {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(*self as u8);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        Role::ALL
            .get(tag as usize)
            .copied()
            .ok_or(DecodeError::InvalidTag { what: "role", tag })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub id: String,
    pub role: Role,
}

impl Identity {
    pub fn new(id: impl Into<String>, role: Role) -> Self {
        Self {
            id: id.into(),
            role,
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.role, self.id)
    }
}

impl Canonical for Identity {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.id);
        w.put(&self.role);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            id: r.get()?,
            role: r.get()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub not_before: LogicalTime,
    pub not_after: LogicalTime,
}

impl Validity {
    pub fn new(not_before: LogicalTime, not_after: LogicalTime) -> Result<Self, PkiError> {
        if not_after < not_before {
            return Err(PkiError::InvertedValidity {
                not_before,
                not_after,
            });
        }
        Ok(Self {
            not_before,
            not_after,
        })
    }

    pub fn contains(&self, now: LogicalTime) -> bool {
        (self.not_before..=self.not_after).contains(&now)
    }
}

impl Canonical for Validity {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.not_before);
        w.put(&self.not_after);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            not_before: r.get()?,
            not_after: r.get()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PkiError {
    #[error("validity window is inverted: not_after {not_after} < not_before {not_before}")]
    InvertedValidity {
        not_before: LogicalTime,
        not_after: LogicalTime,
    },
    #[error("certificate authority identity must have role CA, got {0}")]
    NotACa(Role),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertRejection {
    #[error("certificate signature does not verify")]
    BadSignature,
    #[error("certificate is outside its validity window")]
    Expired,
    #[error("certificate issuer is not the trusted root")]
    UnknownIssuer,
}

/// Binds an identity on a device to its attestation and command keys.
///
/// TA certificates bind the pair (device, TA identity) jointly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: Identity,
    pub device: String,
    pub attestation_key: PublicKey,
    pub command_key: PublicKey,
    pub issuer: Identity,
    pub validity: Validity,
    pub signature: Signature,
}

impl Certificate {
    pub fn to_be_signed(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put(&"teecred/cert/v1".to_string());
        w.put(&self.subject);
        w.put(&self.device);
        w.put(&self.attestation_key);
        w.put(&self.command_key);
        w.put(&self.issuer);
        w.put(&self.validity);
        w.into_bytes()
    }

    pub fn fingerprint(&self) -> Digest {
        crypto::hash(&self.to_bytes())
    }
}

impl Canonical for Certificate {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.subject);
        w.put(&self.device);
        w.put(&self.attestation_key);
        w.put(&self.command_key);
        w.put(&self.issuer);
        w.put(&self.validity);
        w.put(&self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            subject: r.get()?,
            device: r.get()?,
            attestation_key: r.get()?,
            command_key: r.get()?,
            issuer: r.get()?,
            validity: r.get()?,
            signature: r.get()?,
        })
    }
}

/// Public half of the CA, distributed to every actor at setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    pub identity: Identity,
    pub public_key: PublicKey,
}

pub struct CertificateAuthority {
    identity: Identity,
    keypair: SigningKeyPair,
}

impl CertificateAuthority {
    pub fn new(identity: Identity, keypair: SigningKeyPair) -> Result<Self, PkiError> {
        if identity.role != Role::Ca {
            return Err(PkiError::NotACa(identity.role));
        }
        Ok(Self { identity, keypair })
    }

    pub fn generate<R: RngCore + CryptoRng>(id: &str, rng: &mut R) -> Self {
        Self {
            identity: Identity::new(id, Role::Ca),
            keypair: SigningKeyPair::generate(rng),
        }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor {
            identity: self.identity.clone(),
            public_key: self.keypair.public(),
        }
    }

    pub fn secret_bytes(&self) -> &[u8; crypto::KEY_LEN] {
        self.keypair.secret_bytes()
    }

    pub fn issue_certificate(
        &self,
        subject: Identity,
        device: impl Into<String>,
        attestation_key: PublicKey,
        command_key: PublicKey,
        validity: Validity,
    ) -> Result<Certificate, PkiError> {
        // Re-check in case the caller built the window by hand.
        Validity::new(validity.not_before, validity.not_after)?;
        let mut cert = Certificate {
            subject,
            device: device.into(),
            attestation_key,
            command_key,
            issuer: self.identity.clone(),
            validity,
            signature: Signature([0; crypto::SIGNATURE_LEN]),
        };
        cert.signature = self.keypair.sign(&cert.to_be_signed());
        Ok(cert)
    }
}

pub fn verify_certificate(
    cert: &Certificate,
    root: &TrustAnchor,
    now: LogicalTime,
) -> Result<(), CertRejection> {
    if cert.issuer != root.identity || cert.issuer.role != Role::Ca {
        return Err(CertRejection::UnknownIssuer);
    }
    crypto::verify(&root.public_key, &cert.to_be_signed(), &cert.signature)
        .map_err(|_| CertRejection::BadSignature)?;
    if !cert.validity.contains(now) {
        return Err(CertRejection::Expired);
    }
    Ok(())
}
