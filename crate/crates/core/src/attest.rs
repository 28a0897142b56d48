//! Simulated platform measurement and quotes.
//!
//! A platform is measured into an ordered list of component digests, much like
//! a chain of TPM PCR extends. A quote signs that list together with a
//! verifier-chosen nonce and a digest of the channel transcript, so a quote
//! produced for one handshake is useless in any other.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair, NONCE_LEN};
use crate::pki::Identity;
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("platform snapshot has no components")]
    EmptySnapshot,
}

/// Which kind of TEE hosts a trusted application. Only the shape of the
/// measured components differs; every protocol treats both the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TeeFlavor {
    #[default]
    #[serde(rename = "gp-tee")]
    GpTee,
    #[serde(rename = "enclave")]
    Enclave,
}

impl TeeFlavor {
    fn tag(self) -> &'static [u8] {
        match self {
            TeeFlavor::GpTee => b"gp-tee",
            TeeFlavor::Enclave => b"enclave",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub image: Vec<u8>,
}

/// The code and configuration loaded on a platform, in load order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformSnapshot {
    pub flavor: TeeFlavor,
    pub components: Vec<Component>,
}

impl PlatformSnapshot {
    /// Boot loader, trusted OS, then the TA image.
    pub fn gp_tee(boot_loader: &[u8], tee_os: &[u8], ta_image: &[u8]) -> Self {
        Self::from_parts(
            TeeFlavor::GpTee,
            [("boot-loader", boot_loader), ("tee-os", tee_os), ("ta-image", ta_image)],
        )
    }

    /// Enclave image and the identity of its signer.
    pub fn enclave(enclave_image: &[u8], signer: &[u8]) -> Self {
        Self::from_parts(
            TeeFlavor::Enclave,
            [("enclave-image", enclave_image), ("enclave-signer", signer)],
        )
    }

    fn from_parts<const N: usize>(flavor: TeeFlavor, parts: [(&str, &[u8]); N]) -> Self {
        Self {
            flavor,
            components: parts
                .into_iter()
                .map(|(name, image)| Component {
                    name: name.to_string(),
                    image: image.to_vec(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeasurementVector(Vec<Digest>);

impl MeasurementVector {
    pub fn new(entries: Vec<Digest>) -> Option<Self> {
        (!entries.is_empty()).then_some(Self(entries))
    }

    pub fn entries(&self) -> &[Digest] {
        &self.0
    }

    /// Digest of the whole ordered vector; what trust policies store.
    pub fn digest(&self) -> Digest {
        let parts: Vec<&[u8]> = self.0.iter().map(|d| d.as_bytes().as_slice()).collect();
        crypto::hash_parts(&parts)
    }
}

impl Canonical for MeasurementVector {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Self::new(r.get()?).ok_or(DecodeError::NonCanonical("empty measurement vector"))
    }
}

pub fn measure(platform: &PlatformSnapshot) -> Result<MeasurementVector, AttestError> {
    if platform.components.is_empty() {
        return Err(AttestError::EmptySnapshot);
    }
    let entries = platform
        .components
        .iter()
        .map(|c| {
            crypto::hash_parts(&[
                b"teecred/measure",
                platform.flavor.tag(),
                c.name.as_bytes(),
                &c.image,
            ])
        })
        .collect();
    Ok(MeasurementVector(entries))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub tee_identity: Identity,
    pub measurements: MeasurementVector,
    pub nonce: [u8; NONCE_LEN],
    pub context_binding: Digest,
    pub signature: Signature,
}

impl Quote {
    fn signed_body(
        identity: &Identity,
        mv: &MeasurementVector,
        nonce: &[u8; NONCE_LEN],
        binding: &Digest,
    ) -> Vec<u8> {
        let mut w = Writer::new();
        w.put(&"teecred/quote/v1".to_string());
        w.put(identity);
        w.put(mv);
        w.put(nonce);
        w.put(binding);
        w.into_bytes()
    }
}

impl Canonical for Quote {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.tee_identity);
        w.put(&self.measurements);
        w.put(&self.nonce);
        w.put(&self.context_binding);
        w.put(&self.signature);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            tee_identity: r.get()?,
            measurements: r.get()?,
            nonce: r.get()?,
            context_binding: r.get()?,
            signature: r.get()?,
        })
    }
}

pub fn generate_quote(
    attestation_key: &SigningKeyPair,
    identity: &Identity,
    mv: &MeasurementVector,
    nonce: &[u8; NONCE_LEN],
    binding: &Digest,
) -> Quote {
    let signature = attestation_key.sign(&Quote::signed_body(identity, mv, nonce, binding));
    Quote {
        tee_identity: identity.clone(),
        measurements: mv.clone(),
        nonce: *nonce,
        context_binding: *binding,
        signature,
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuoteRejection {
    #[error("quote signature does not verify")]
    BadSignature,
    #[error("quote nonce is not the one the verifier issued")]
    StaleNonce,
    #[error("quote is bound to a different channel")]
    BindingMismatch,
    #[error("platform is not registered in the trust policy")]
    UnknownPlatform,
    #[error("measurements do not match any trusted reference")]
    MeasurementMismatch,
}

/// Expected measurement digests per platform identity.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustPolicy {
    expected: BTreeMap<Identity, BTreeSet<Digest>>,
}

impl TrustPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allow(&mut self, identity: Identity, measurement: Digest) {
        self.expected.entry(identity).or_default().insert(measurement);
    }

    /// Registers an identity that will never be trusted.
    pub fn register_untrusted(&mut self, identity: Identity) {
        self.expected.entry(identity).or_default();
    }

    pub fn lookup(&self, identity: &Identity) -> Option<&BTreeSet<Digest>> {
        self.expected.get(identity)
    }

    pub fn trusts(&self, identity: &Identity, measurement: &Digest) -> bool {
        self.lookup(identity).is_some_and(|set| set.contains(measurement))
    }
}

/// Checks, in order: signature, nonce, channel binding, platform registration,
/// measurements.
pub fn verify_quote(
    quote: &Quote,
    policy: &TrustPolicy,
    expected_nonce: &[u8; NONCE_LEN],
    expected_binding: &Digest,
    attestation_pubkey: &PublicKey,
) -> Result<(), QuoteRejection> {
    let body = Quote::signed_body(
        &quote.tee_identity,
        &quote.measurements,
        &quote.nonce,
        &quote.context_binding,
    );
    crypto::verify(attestation_pubkey, &body, &quote.signature)
        .map_err(|_| QuoteRejection::BadSignature)?;
    if quote.nonce != *expected_nonce {
        return Err(QuoteRejection::StaleNonce);
    }
    if quote.context_binding != *expected_binding {
        return Err(QuoteRejection::BindingMismatch);
    }
    let expected = policy
        .lookup(&quote.tee_identity)
        .ok_or(QuoteRejection::UnknownPlatform)?;
    if !expected.contains(&quote.measurements.digest()) {
        return Err(QuoteRejection::MeasurementMismatch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;
    use crate::pki::Role;

    fn snapshot() -> PlatformSnapshot {
        PlatformSnapshot::gp_tee(b"bl-1.0", b"optee-3.2", b"wallet-ta")
    }

    fn fixture() -> (SigningKeyPair, Identity, MeasurementVector, TrustPolicy) {
        let key = SigningKeyPair::generate(&mut seeded_rng(21));
        let id = Identity::new("ta-a", Role::Ta);
        let mv = measure(&snapshot()).unwrap();
        let mut policy = TrustPolicy::new();
        policy.allow(id.clone(), mv.digest());
        (key, id, mv, policy)
    }

    #[test]
    fn measurement_is_deterministic_and_sensitive() {
        assert_eq!(measure(&snapshot()).unwrap(), measure(&snapshot()).unwrap());
        let changed = PlatformSnapshot::gp_tee(b"bl-1.0", b"optee-3.2", b"wallet-tb");
        let (a, b) = (measure(&snapshot()).unwrap(), measure(&changed).unwrap());
        assert_ne!(a, b);
        assert_eq!(a.entries()[..2], b.entries()[..2]);
    }

    #[test]
    fn flavor_changes_the_measurement() {
        let mut s = snapshot();
        s.flavor = TeeFlavor::Enclave;
        assert_ne!(measure(&s).unwrap(), measure(&snapshot()).unwrap());
    }

    #[test]
    fn empty_snapshot_is_an_error() {
        let empty = PlatformSnapshot {
            flavor: TeeFlavor::Enclave,
            components: vec![],
        };
        assert_eq!(measure(&empty), Err(AttestError::EmptySnapshot));
    }

    #[test]
    fn fresh_quote_is_trusted() {
        let (key, id, mv, policy) = fixture();
        let nonce = [1; NONCE_LEN];
        let binding = crypto::hash(b"transcript");
        let q = generate_quote(&key, &id, &mv, &nonce, &binding);
        assert_eq!(verify_quote(&q, &policy, &nonce, &binding, &key.public()), Ok(()));
    }

    #[test]
    fn stale_nonce_and_binding_are_rejected() {
        let (key, id, mv, policy) = fixture();
        let binding = crypto::hash(b"transcript");
        let q = generate_quote(&key, &id, &mv, &[1; NONCE_LEN], &binding);
        assert_eq!(
            verify_quote(&q, &policy, &[2; NONCE_LEN], &binding, &key.public()),
            Err(QuoteRejection::StaleNonce)
        );
        assert_eq!(
            verify_quote(&q, &policy, &[1; NONCE_LEN], &crypto::hash(b"other"), &key.public()),
            Err(QuoteRejection::BindingMismatch)
        );
    }

    #[test]
    fn tampered_measurement_breaks_the_signature() {
        let (key, id, mv, policy) = fixture();
        let binding = crypto::hash(b"t");
        let mut q = generate_quote(&key, &id, &mv, &[1; NONCE_LEN], &binding);
        let mut entries = q.measurements.entries().to_vec();
        entries[2].0[0] ^= 1;
        q.measurements = MeasurementVector::new(entries).unwrap();
        assert_eq!(
            verify_quote(&q, &policy, &[1; NONCE_LEN], &binding, &key.public()),
            Err(QuoteRejection::BadSignature)
        );
    }

    #[test]
    fn unregistered_and_mismatched_platforms() {
        let (key, id, _, policy) = fixture();
        let binding = crypto::hash(b"t");
        let rogue = measure(&PlatformSnapshot::gp_tee(b"bl", b"os", b"rootkit")).unwrap();
        let q = generate_quote(&key, &id, &rogue, &[0; NONCE_LEN], &binding);
        assert_eq!(
            verify_quote(&q, &policy, &[0; NONCE_LEN], &binding, &key.public()),
            Err(QuoteRejection::MeasurementMismatch)
        );
        let stranger = Identity::new("ta-z", Role::Ta);
        let q = generate_quote(&key, &stranger, &rogue, &[0; NONCE_LEN], &binding);
        assert_eq!(
            verify_quote(&q, &policy, &[0; NONCE_LEN], &binding, &key.public()),
            Err(QuoteRejection::UnknownPlatform)
        );
    }

    #[test]
    fn empty_expected_set_means_never_trust() {
        let (key, id, mv, _) = fixture();
        let mut policy = TrustPolicy::new();
        policy.register_untrusted(id.clone());
        let binding = crypto::hash(b"t");
        let q = generate_quote(&key, &id, &mv, &[0; NONCE_LEN], &binding);
        assert_eq!(
            verify_quote(&q, &policy, &[0; NONCE_LEN], &binding, &key.public()),
            Err(QuoteRejection::MeasurementMismatch)
        );
    }

    #[test]
    fn quote_round_trips() {
        let (key, id, mv, _) = fixture();
        let q = generate_quote(&key, &id, &mv, &[3; NONCE_LEN], &crypto::hash(b"x"));
        assert_eq!(Quote::from_bytes(&q.to_bytes()).unwrap(), q);
    }
}
