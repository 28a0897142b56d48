//! Secure and Trusted Channel Protocol.
//!
//! A three-message, SIGMA-style handshake in which both ends present a
//! CA-issued certificate, a fresh X25519 share and a quote bound to the
//! running transcript, followed by an AEAD record layer.
//!
//! ```text
//! initiator                                   responder
//!   M1 { cert_i, nonce_i, eph_i }        -->
//!                                        <--  CookieChallenge { cookie }   (stateless)
//!   M1 { cert_i, nonce_i, eph_i, cookie } -->
//!                                        <--  M2 { cert_r, nonce_r, eph_r, quote_r, sig_r }
//!   M3 { quote_i, sig_i, confirm_mac }   -->
//! ```
//!
//! The responder does no asymmetric work and keeps no per-initiator state
//! until M1 carries a cookie it issued. Quotes are bound to the transcript
//! (`quote_r` to everything up to its emission, `quote_i` to everything up to
//! and including M2), so a quote cannot be relayed into another handshake.
//!
//! Handshake functions consume the pending state they advance; a rejected
//! handshake leaves nothing behind.

use std::collections::BTreeMap;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::attest::{self, MeasurementVector, Quote, QuoteRejection, TrustPolicy};
use crate::crypto::{
    self, AgreementPublic, Digest, EphemeralKeyPair, KeyPurpose, Signature, SigningKeyPair,
    SymmetricKey, AEAD_NONCE_LEN, KEY_LEN, NONCE_LEN,
};
use crate::pki::{self, CertRejection, Certificate, Identity, LogicalTime, TrustAnchor};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

pub const SESSION_ID_LEN: usize = 16;
pub type SessionId = [u8; SESSION_ID_LEN];
pub type Nonce = [u8; NONCE_LEN];

/// Cookies stay valid for the epoch they were minted in and the next one.
pub const COOKIE_EPOCH_TICKS: LogicalTime = 256;

/// Long-term material an actor brings to every handshake.
pub struct Endpoint {
    pub identity: Identity,
    pub certificate: Certificate,
    pub attestation_key: SigningKeyPair,
    pub command_key: SigningKeyPair,
    pub anchor: TrustAnchor,
    /// What this platform's quotes report.
    pub measurements: MeasurementVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M1 {
    pub session_id: SessionId,
    pub initiator_cert: Certificate,
    pub nonce_i: Nonce,
    pub ephemeral_pub_i: AgreementPublic,
    pub cookie: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CookieChallenge {
    pub session_id: SessionId,
    pub cookie: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M2 {
    pub session_id: SessionId,
    pub responder_cert: Certificate,
    pub nonce_r: Nonce,
    pub ephemeral_pub_r: AgreementPublic,
    pub quote_r: Quote,
    pub sig_r: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct M3 {
    pub session_id: SessionId,
    pub quote_i: Quote,
    pub sig_i: Signature,
    pub confirm_mac: Digest,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeMessage {
    M1(M1),
    Cookie(CookieChallenge),
    M2(M2),
    M3(M3),
}

impl HandshakeMessage {
    pub fn session_id(&self) -> &SessionId {
        match self {
            HandshakeMessage::M1(m) => &m.session_id,
            HandshakeMessage::Cookie(m) => &m.session_id,
            HandshakeMessage::M2(m) => &m.session_id,
            HandshakeMessage::M3(m) => &m.session_id,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HandshakeMessage::M1(m) if m.cookie.is_some() => "M1+cookie",
            HandshakeMessage::M1(_) => "M1",
            HandshakeMessage::Cookie(_) => "CookieChallenge",
            HandshakeMessage::M2(_) => "M2",
            HandshakeMessage::M3(_) => "M3",
        }
    }
}

impl Canonical for M1 {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.session_id);
        w.put(&self.initiator_cert);
        w.put(&self.nonce_i);
        w.put(&self.ephemeral_pub_i);
        w.put(&self.cookie);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            session_id: r.get()?,
            initiator_cert: r.get()?,
            nonce_i: r.get()?,
            ephemeral_pub_i: r.get()?,
            cookie: r.get()?,
        })
    }
}

impl Canonical for CookieChallenge {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.session_id);
        w.put(&self.cookie);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            session_id: r.get()?,
            cookie: r.get()?,
        })
    }
}

impl Canonical for M2 {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.session_id);
        w.put(&self.responder_cert);
        w.put(&self.nonce_r);
        w.put(&self.ephemeral_pub_r);
        w.put(&self.quote_r);
        w.put(&self.sig_r);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            session_id: r.get()?,
            responder_cert: r.get()?,
            nonce_r: r.get()?,
            ephemeral_pub_r: r.get()?,
            quote_r: r.get()?,
            sig_r: r.get()?,
        })
    }
}

impl Canonical for M3 {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.session_id);
        w.put(&self.quote_i);
        w.put(&self.sig_i);
        w.put(&self.confirm_mac);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            session_id: r.get()?,
            quote_i: r.get()?,
            sig_i: r.get()?,
            confirm_mac: r.get()?,
        })
    }
}

impl Canonical for HandshakeMessage {
    fn encode(&self, w: &mut Writer) {
        match self {
            HandshakeMessage::M1(m) => {
                w.put_u8(1);
                w.put(m);
            }
            HandshakeMessage::Cookie(m) => {
                w.put_u8(2);
                w.put(m);
            }
            HandshakeMessage::M2(m) => {
                w.put_u8(3);
                w.put(m);
            }
            HandshakeMessage::M3(m) => {
                w.put_u8(4);
                w.put(m);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(HandshakeMessage::M1(r.get()?)),
            2 => Ok(HandshakeMessage::Cookie(r.get()?)),
            3 => Ok(HandshakeMessage::M2(r.get()?)),
            4 => Ok(HandshakeMessage::M3(r.get()?)),
            tag => Err(DecodeError::InvalidTag {
                what: "handshake message",
                tag,
            }),
        }
    }
}

/// Transcript hashes and key schedule. Public so that offline oracles can
/// recompute them from wire bytes.
pub mod transcript {
    use super::*;

    /// Hash of M1 as first sent, i.e. without the cookie.
    pub fn after_m1(m1: &M1) -> Digest {
        let bare = M1 {
            cookie: None,
            ..m1.clone()
        };
        crypto::hash_parts(&[b"stcp/m1", &bare.to_bytes()])
    }

    /// What `quote_r` is bound to.
    pub fn responder_binding(
        th1: &Digest,
        cert: &Certificate,
        nonce_r: &Nonce,
        eph_r: &AgreementPublic,
    ) -> Digest {
        crypto::hash_parts(&[
            b"stcp/bind-r",
            th1.as_bytes(),
            &cert.to_bytes(),
            nonce_r,
            eph_r.as_bytes(),
        ])
    }

    pub fn responder_signed(binding_r: &Digest, quote_r: &Quote) -> Digest {
        crypto::hash_parts(&[b"stcp/sig-r", binding_r.as_bytes(), &quote_r.to_bytes()])
    }

    pub fn after_m2(binding_r: &Digest, quote_r: &Quote, sig_r: &Signature) -> Digest {
        crypto::hash_parts(&[
            b"stcp/m2",
            binding_r.as_bytes(),
            &quote_r.to_bytes(),
            sig_r.as_bytes(),
        ])
    }

    /// Full recomputation of the post-M2 transcript from the two messages.
    pub fn through_m2(m1: &M1, m2: &M2) -> Digest {
        let binding_r = responder_binding(
            &after_m1(m1),
            &m2.responder_cert,
            &m2.nonce_r,
            &m2.ephemeral_pub_r,
        );
        after_m2(&binding_r, &m2.quote_r, &m2.sig_r)
    }

    /// What `quote_i` is bound to.
    pub fn initiator_binding(th2: &Digest) -> Digest {
        crypto::hash_parts(&[b"stcp/bind-i", th2.as_bytes()])
    }

    pub fn initiator_signed(binding_i: &Digest, quote_i: &Quote) -> Digest {
        crypto::hash_parts(&[b"stcp/sig-i", binding_i.as_bytes(), &quote_i.to_bytes()])
    }

    pub fn after_m3(th2: &Digest, quote_i: &Quote, sig_i: &Signature) -> Digest {
        crypto::hash_parts(&[
            b"stcp/m3",
            th2.as_bytes(),
            &quote_i.to_bytes(),
            sig_i.as_bytes(),
        ])
    }

    pub fn established(th3: &Digest, confirm_mac: &Digest) -> Digest {
        crypto::hash_parts(&[b"stcp/done", th3.as_bytes(), confirm_mac.as_bytes()])
    }

    pub fn confirm_input(th3: &Digest) -> Vec<u8> {
        [b"stcp/confirm".as_slice(), th3.as_bytes()].concat()
    }

    /// Four directional keys from one KDF family:
    /// `kdf(dh, salt = nonce_i || nonce_r, info = th2 || label)`.
    pub fn derive_session_keys(
        shared: &[u8; KEY_LEN],
        nonce_i: &Nonce,
        nonce_r: &Nonce,
        th2: &Digest,
    ) -> SessionKeys {
        let salt = [nonce_i.as_slice(), nonce_r.as_slice()].concat();
        let derive = |label: &[u8], purpose| {
            let info = [th2.as_bytes().as_slice(), label].concat();
            let okm = crypto::kdf(shared, &salt, &info, KEY_LEN).expect("fixed length");
            SymmetricKey::session(okm.try_into().expect("fixed length"), purpose)
        };
        SessionKeys {
            initiator_to_responder: DirectionKeys {
                encrypt: derive(b"i2r/enc", KeyPurpose::SessionEncrypt),
                mac: derive(b"i2r/mac", KeyPurpose::SessionMac),
            },
            responder_to_initiator: DirectionKeys {
                encrypt: derive(b"r2i/enc", KeyPurpose::SessionEncrypt),
                mac: derive(b"r2i/mac", KeyPurpose::SessionMac),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionKeys {
    pub encrypt: SymmetricKey,
    pub mac: SymmetricKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub initiator_to_responder: DirectionKeys,
    pub responder_to_initiator: DirectionKeys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandshakeRole {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionState {
    AwaitM2,
    AwaitM3,
    Established,
    Failed,
    Closed,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HandshakeRejection {
    #[error("peer certificate rejected: {0}")]
    BadCert(CertRejection),
    #[error("peer is not the party this side expected")]
    PeerMismatch,
    #[error("peer quote rejected: {0}")]
    QuoteRejected(QuoteRejection),
    #[error("quote identity differs from certificate subject")]
    QuoteIdentityMismatch,
    #[error("handshake signature does not verify")]
    BadSignature,
    #[error("key confirmation failed")]
    BadConfirmMac,
    #[error("message belongs to a different session")]
    SessionMismatch,
    #[error("session was already started with this cookie")]
    Replayed,
    #[error("peer key share is invalid")]
    InvalidPeerKey,
}

/// Counters proving the responder does no work for unverified initiators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponderStats {
    pub cookies_issued: u64,
    pub cookies_validated: u64,
    pub ephemerals_generated: u64,
    pub quotes_signed: u64,
    pub sessions_allocated: u64,
}

/// Responder-local state: the cookie secret and a replay cache of session ids
/// that already passed cookie validation. Entries expire with their cookie.
pub struct Responder {
    cookie_secret: Zeroizing<[u8; KEY_LEN]>,
    started: BTreeMap<SessionId, LogicalTime>,
    pub stats: ResponderStats,
}

impl Responder {
    pub fn new<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            cookie_secret: Zeroizing::new(crypto::random_array(rng)),
            started: BTreeMap::new(),
            stats: ResponderStats::default(),
        }
    }

    fn cookie_for(&self, m1: &M1, from_addr: &str, epoch: u64) -> Digest {
        let mut w = Writer::new();
        w.put(&"stcp/cookie".to_string());
        w.put(&from_addr.to_string());
        w.put(&epoch);
        w.put(&m1.session_id);
        w.put(&m1.nonce_i);
        w.put(&m1.ephemeral_pub_i);
        w.put(&m1.initiator_cert.fingerprint());
        crypto::mac_raw(self.cookie_secret.as_ref(), &w.into_bytes())
    }

    fn cookie_valid(&self, m1: &M1, cookie: &Digest, from_addr: &str, now: LogicalTime) -> bool {
        let epoch = now / COOKIE_EPOCH_TICKS;
        // Compare in constant time via the MAC's own verify path.
        [Some(epoch), epoch.checked_sub(1)]
            .into_iter()
            .flatten()
            .any(|e| {
                let expect = self.cookie_for(m1, from_addr, e);
                constant_time_eq(expect.as_bytes(), cookie.as_bytes())
            })
    }

    fn expire(&mut self, now: LogicalTime) {
        let horizon = 2 * COOKIE_EPOCH_TICKS;
        self.started.retain(|_, at| now.saturating_sub(*at) <= horizon);
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Initiator state between sending M1 and receiving M2.
pub struct InitiatorPending {
    session_id: SessionId,
    peer: Identity,
    pin: Option<Digest>,
    nonce_i: Nonce,
    ephemeral: EphemeralKeyPair,
    m1: M1,
}

impl InitiatorPending {
    pub fn state(&self) -> SessionState {
        SessionState::AwaitM2
    }

    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn m1(&self) -> &M1 {
        &self.m1
    }

    /// Requires the responder certificate to have exactly this fingerprint.
    pub fn pin_fingerprint(mut self, fingerprint: Digest) -> Self {
        self.pin = Some(fingerprint);
        self
    }

    /// M1 again, now carrying the responder's cookie.
    pub fn answer_cookie(&self, challenge: &CookieChallenge) -> Result<M1, HandshakeRejection> {
        if challenge.session_id != self.session_id {
            return Err(HandshakeRejection::SessionMismatch);
        }
        Ok(M1 {
            cookie: Some(challenge.cookie),
            ..self.m1.clone()
        })
    }
}

/// Responder state between sending M2 and receiving M3.
pub struct ResponderPending {
    session_id: SessionId,
    peer_cert: Certificate,
    nonce_i: Nonce,
    nonce_r: Nonce,
    ephemeral: EphemeralKeyPair,
    peer_ephemeral: AgreementPublic,
    th2: Digest,
}

impl ResponderPending {
    pub fn state(&self) -> SessionState {
        SessionState::AwaitM3
    }

    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn peer(&self) -> &Identity {
        &self.peer_cert.subject
    }
}

#[allow(clippy::large_enum_variant)]
pub enum RespondOutcome {
    /// No cookie, or a cookie this responder did not mint. Nothing retained.
    Challenge(CookieChallenge),
    Proceed(ResponderPending, M2),
}

/// Draws the session id, nonce and ephemeral key for a new handshake, in that
/// order.
pub fn fresh_handshake_material<R: RngCore + CryptoRng>(
    rng: &mut R,
) -> (SessionId, Nonce, EphemeralKeyPair) {
    let session_id = crypto::random_array(rng);
    let nonce = crypto::random_array(rng);
    (session_id, nonce, EphemeralKeyPair::generate(rng))
}

pub fn initiate<R: RngCore + CryptoRng>(
    me: &Endpoint,
    peer: &Identity,
    rng: &mut R,
) -> (InitiatorPending, M1) {
    let (session_id, nonce_i, ephemeral) = fresh_handshake_material(rng);
    let m1 = M1 {
        session_id,
        initiator_cert: me.certificate.clone(),
        nonce_i,
        ephemeral_pub_i: ephemeral.public(),
        cookie: None,
    };
    let pending = InitiatorPending {
        session_id,
        peer: peer.clone(),
        pin: None,
        nonce_i,
        ephemeral,
        m1: m1.clone(),
    };
    (pending, m1)
}

pub fn respond<R: RngCore + CryptoRng>(
    me: &Endpoint,
    responder: &mut Responder,
    m1: &M1,
    from_addr: &str,
    now: LogicalTime,
    rng: &mut R,
) -> Result<RespondOutcome, HandshakeRejection> {
    let cookie_ok = m1
        .cookie
        .is_some_and(|c| responder.cookie_valid(m1, &c, from_addr, now));
    if !cookie_ok {
        responder.stats.cookies_issued += 1;
        return Ok(RespondOutcome::Challenge(CookieChallenge {
            session_id: m1.session_id,
            cookie: responder.cookie_for(m1, from_addr, now / COOKIE_EPOCH_TICKS),
        }));
    }
    responder.stats.cookies_validated += 1;
    responder.expire(now);
    if responder.started.contains_key(&m1.session_id) {
        return Err(HandshakeRejection::Replayed);
    }
    pki::verify_certificate(&m1.initiator_cert, &me.anchor, now)
        .map_err(HandshakeRejection::BadCert)?;

    let nonce_r: Nonce = crypto::random_array(rng);
    let ephemeral = EphemeralKeyPair::generate(rng);
    responder.stats.ephemerals_generated += 1;

    let th1 = transcript::after_m1(m1);
    let binding_r = transcript::responder_binding(&th1, &me.certificate, &nonce_r, &ephemeral.public());
    let quote_r = attest::generate_quote(
        &me.attestation_key,
        &me.identity,
        &me.measurements,
        &m1.nonce_i,
        &binding_r,
    );
    responder.stats.quotes_signed += 1;
    let sig_r = me
        .attestation_key
        .sign(transcript::responder_signed(&binding_r, &quote_r).as_bytes());
    let th2 = transcript::after_m2(&binding_r, &quote_r, &sig_r);

    responder.started.insert(m1.session_id, now);
    responder.stats.sessions_allocated += 1;
    let m2 = M2 {
        session_id: m1.session_id,
        responder_cert: me.certificate.clone(),
        nonce_r,
        ephemeral_pub_r: ephemeral.public(),
        quote_r,
        sig_r,
    };
    let pending = ResponderPending {
        session_id: m1.session_id,
        peer_cert: m1.initiator_cert.clone(),
        nonce_i: m1.nonce_i,
        nonce_r,
        ephemeral,
        peer_ephemeral: m1.ephemeral_pub_i,
        th2,
    };
    Ok(RespondOutcome::Proceed(pending, m2))
}

fn check_quote(
    quote: &Quote,
    cert: &Certificate,
    policy: &TrustPolicy,
    nonce: &Nonce,
    binding: &Digest,
) -> Result<(), HandshakeRejection> {
    if quote.tee_identity != cert.subject {
        return Err(HandshakeRejection::QuoteIdentityMismatch);
    }
    attest::verify_quote(quote, policy, nonce, binding, &cert.attestation_key)
        .map_err(HandshakeRejection::QuoteRejected)
}

pub fn complete(
    pending: InitiatorPending,
    me: &Endpoint,
    m2: &M2,
    policy: &TrustPolicy,
    now: LogicalTime,
) -> Result<(StcpSession, M3), HandshakeRejection> {
    if m2.session_id != pending.session_id {
        return Err(HandshakeRejection::SessionMismatch);
    }
    let cert = &m2.responder_cert;
    pki::verify_certificate(cert, &me.anchor, now).map_err(HandshakeRejection::BadCert)?;
    if cert.subject != pending.peer || pending.pin.is_some_and(|fp| fp != cert.fingerprint()) {
        return Err(HandshakeRejection::PeerMismatch);
    }

    let th1 = transcript::after_m1(&pending.m1);
    let binding_r = transcript::responder_binding(&th1, cert, &m2.nonce_r, &m2.ephemeral_pub_r);
    crypto::verify(
        &cert.attestation_key,
        transcript::responder_signed(&binding_r, &m2.quote_r).as_bytes(),
        &m2.sig_r,
    )
    .map_err(|_| HandshakeRejection::BadSignature)?;
    check_quote(&m2.quote_r, cert, policy, &pending.nonce_i, &binding_r)?;

    // Responder is authenticated and trusted; only now derive keys.
    let shared = pending
        .ephemeral
        .derive_shared_secret(&m2.ephemeral_pub_r)
        .map_err(|_| HandshakeRejection::InvalidPeerKey)?;
    let th2 = transcript::after_m2(&binding_r, &m2.quote_r, &m2.sig_r);
    let keys = transcript::derive_session_keys(&shared, &pending.nonce_i, &m2.nonce_r, &th2);
    drop(shared);

    let binding_i = transcript::initiator_binding(&th2);
    let quote_i = attest::generate_quote(
        &me.attestation_key,
        &me.identity,
        &me.measurements,
        &m2.nonce_r,
        &binding_i,
    );
    let sig_i = me
        .attestation_key
        .sign(transcript::initiator_signed(&binding_i, &quote_i).as_bytes());
    let th3 = transcript::after_m3(&th2, &quote_i, &sig_i);
    let confirm_mac = crypto::mac(
        &keys.initiator_to_responder.mac,
        &transcript::confirm_input(&th3),
    );
    let session = StcpSession {
        session_id: pending.session_id,
        role: HandshakeRole::Initiator,
        peer: cert.subject.clone(),
        peer_certificate: cert.clone(),
        keys: Some(keys),
        transcript_hash: transcript::established(&th3, &confirm_mac),
        send_counter: 0,
        recv_counter: 0,
        state: SessionState::Established,
    };
    let m3 = M3 {
        session_id: pending.session_id,
        quote_i,
        sig_i,
        confirm_mac,
    };
    Ok((session, m3))
}

pub fn finalize(
    pending: ResponderPending,
    m3: &M3,
    policy: &TrustPolicy,
) -> Result<StcpSession, HandshakeRejection> {
    if m3.session_id != pending.session_id {
        return Err(HandshakeRejection::SessionMismatch);
    }
    let cert = &pending.peer_cert;
    let binding_i = transcript::initiator_binding(&pending.th2);
    crypto::verify(
        &cert.attestation_key,
        transcript::initiator_signed(&binding_i, &m3.quote_i).as_bytes(),
        &m3.sig_i,
    )
    .map_err(|_| HandshakeRejection::BadSignature)?;
    check_quote(&m3.quote_i, cert, policy, &pending.nonce_r, &binding_i)?;

    let shared = pending
        .ephemeral
        .derive_shared_secret(&pending.peer_ephemeral)
        .map_err(|_| HandshakeRejection::InvalidPeerKey)?;
    let keys = transcript::derive_session_keys(&shared, &pending.nonce_i, &pending.nonce_r, &pending.th2);
    drop(shared);
    let th3 = transcript::after_m3(&pending.th2, &m3.quote_i, &m3.sig_i);
    if !crypto::mac_verify(
        &keys.initiator_to_responder.mac,
        &transcript::confirm_input(&th3),
        &m3.confirm_mac,
    ) {
        return Err(HandshakeRejection::BadConfirmMac);
    }
    Ok(StcpSession {
        session_id: pending.session_id,
        role: HandshakeRole::Responder,
        peer: cert.subject.clone(),
        peer_certificate: cert.clone(),
        keys: Some(keys),
        transcript_hash: transcript::established(&th3, &m3.confirm_mac),
        send_counter: 0,
        recv_counter: 0,
        state: SessionState::Established,
    })
}

/// One protected application message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub session_id: SessionId,
    pub sequence: u64,
    pub ciphertext: Vec<u8>,
}

impl Canonical for Record {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.session_id);
        w.put(&self.sequence);
        w.put(&self.ciphertext);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            session_id: r.get()?,
            sequence: r.get()?,
            ciphertext: r.get()?,
        })
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordRejection {
    #[error("session is not established")]
    NotEstablished,
    #[error("record belongs to another session")]
    WrongSession,
    #[error("record replayed or out of order")]
    ReplayOrReorder,
    #[error("record failed authentication")]
    AeadAuthFail,
}

/// An established channel. Keys are dropped when the session closes.
#[derive(Debug)]
pub struct StcpSession {
    session_id: SessionId,
    role: HandshakeRole,
    peer: Identity,
    peer_certificate: Certificate,
    keys: Option<SessionKeys>,
    transcript_hash: Digest,
    send_counter: u64,
    recv_counter: u64,
    state: SessionState,
}

fn record_nonce(sequence: u64) -> [u8; AEAD_NONCE_LEN] {
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    nonce[4..].copy_from_slice(&sequence.to_be_bytes());
    nonce
}

fn record_aad(session_id: &SessionId, sequence: u64) -> Vec<u8> {
    [session_id.as_slice(), &sequence.to_be_bytes()].concat()
}

impl StcpSession {
    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn role(&self) -> HandshakeRole {
        self.role
    }

    pub fn peer(&self) -> &Identity {
        &self.peer
    }

    pub fn peer_certificate(&self) -> &Certificate {
        &self.peer_certificate
    }

    pub fn keys(&self) -> Option<&SessionKeys> {
        self.keys.as_ref()
    }

    pub fn transcript_hash(&self) -> &Digest {
        &self.transcript_hash
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn counters(&self) -> (u64, u64) {
        (self.send_counter, self.recv_counter)
    }

    fn directions(&self) -> Option<(&DirectionKeys, &DirectionKeys)> {
        let keys = self.keys.as_ref()?;
        Some(match self.role {
            HandshakeRole::Initiator => (&keys.initiator_to_responder, &keys.responder_to_initiator),
            HandshakeRole::Responder => (&keys.responder_to_initiator, &keys.initiator_to_responder),
        })
    }

    pub fn send_record(&mut self, payload: &[u8]) -> Result<Record, RecordRejection> {
        if self.state != SessionState::Established {
            return Err(RecordRejection::NotEstablished);
        }
        let (send, _) = self.directions().ok_or(RecordRejection::NotEstablished)?;
        let sequence = self.send_counter;
        let ciphertext = crypto::aead_seal(
            &send.encrypt,
            &record_nonce(sequence),
            &record_aad(&self.session_id, sequence),
            payload,
        );
        self.send_counter += 1;
        Ok(Record {
            session_id: self.session_id,
            sequence,
            ciphertext,
        })
    }

    /// Accepts each sequence number exactly once and strictly in order.
    pub fn recv_record(&mut self, record: &Record) -> Result<Vec<u8>, RecordRejection> {
        if self.state != SessionState::Established {
            return Err(RecordRejection::NotEstablished);
        }
        if record.session_id != self.session_id {
            return Err(RecordRejection::WrongSession);
        }
        if record.sequence != self.recv_counter {
            return Err(RecordRejection::ReplayOrReorder);
        }
        let (_, recv) = self.directions().ok_or(RecordRejection::NotEstablished)?;
        let payload = crypto::aead_open(
            &recv.encrypt,
            &record_nonce(record.sequence),
            &record_aad(&self.session_id, record.sequence),
            &record.ciphertext,
        )
        .map_err(|_| RecordRejection::AeadAuthFail)?;
        self.recv_counter += 1;
        Ok(payload)
    }

    pub fn close(&mut self) {
        self.keys = None;
        self.state = SessionState::Closed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attest::{measure, PlatformSnapshot};
    use crate::crypto::{seeded_rng, SimRng};
    use crate::pki::{CertificateAuthority, Role, Validity};

    pub(crate) struct Fixture {
        pub ca: CertificateAuthority,
        pub policy: TrustPolicy,
        pub rng: SimRng,
    }

    impl Fixture {
        pub fn new(seed: u64) -> Self {
            let mut rng = seeded_rng(seed);
            let ca = CertificateAuthority::generate("root", &mut rng);
            Self {
                ca,
                policy: TrustPolicy::new(),
                rng,
            }
        }

        pub fn endpoint(&mut self, id: &str, role: Role, image: &[u8]) -> Endpoint {
            let identity = Identity::new(id, role);
            let att = SigningKeyPair::generate(&mut self.rng);
            let cmd = SigningKeyPair::generate(&mut self.rng);
            let certificate = self
                .ca
                .issue_certificate(
                    identity.clone(),
                    format!("{id}-device"),
                    att.public(),
                    cmd.public(),
                    Validity::new(0, 10_000).unwrap(),
                )
                .unwrap();
            let measurements = measure(&PlatformSnapshot::gp_tee(b"bl", b"os", image)).unwrap();
            self.policy.allow(identity.clone(), measurements.digest());
            Endpoint {
                identity,
                certificate,
                attestation_key: att,
                command_key: cmd,
                anchor: self.ca.anchor(),
                measurements,
            }
        }
    }

    fn handshake(
        fx: &mut Fixture,
        a: &Endpoint,
        b: &Endpoint,
        resp: &mut Responder,
    ) -> Result<(StcpSession, StcpSession), HandshakeRejection> {
        let (pending, m1) = initiate(a, &b.identity, &mut fx.rng);
        let RespondOutcome::Challenge(ch) = respond(b, resp, &m1, "a", 1, &mut fx.rng)? else {
            panic!("expected a cookie challenge");
        };
        let m1c = pending.answer_cookie(&ch)?;
        let RespondOutcome::Proceed(rp, m2) = respond(b, resp, &m1c, "a", 1, &mut fx.rng)? else {
            panic!("expected M2");
        };
        let (sa, m3) = complete(pending, a, &m2, &fx.policy, 1)?;
        let sb = finalize(rp, &m3, &fx.policy)?;
        Ok((sa, sb))
    }

    #[test]
    fn honest_handshake_establishes_matching_keys() {
        let mut fx = Fixture::new(1);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (sa, sb) = handshake(&mut fx, &a, &b, &mut resp).unwrap();
        assert_eq!(sa.state(), SessionState::Established);
        assert_eq!(sb.state(), SessionState::Established);
        assert_eq!(sa.keys(), sb.keys());
        assert_eq!(sa.transcript_hash(), sb.transcript_hash());
        assert_eq!(sa.peer(), &b.identity);
        assert_eq!(sb.peer(), &a.identity);
    }

    #[test]
    fn initiations_are_fresh() {
        let mut fx = Fixture::new(2);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let peer = Identity::new("ta", Role::Ta);
        let (_, m1a) = initiate(&a, &peer, &mut fx.rng);
        let (_, m1b) = initiate(&a, &peer, &mut fx.rng);
        assert_ne!(m1a.nonce_i, m1b.nonce_i);
        assert_ne!(m1a.ephemeral_pub_i, m1b.ephemeral_pub_i);
        assert_ne!(m1a.session_id, m1b.session_id);
        let msg = HandshakeMessage::M1(m1a);
        assert_eq!(HandshakeMessage::from_bytes(&msg.to_bytes()).unwrap(), msg);
    }

    #[test]
    fn cookieless_m1_allocates_nothing() {
        let mut fx = Fixture::new(3);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (_, m1) = initiate(&a, &b.identity, &mut fx.rng);
        assert!(matches!(
            respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng),
            Ok(RespondOutcome::Challenge(_))
        ));
        assert_eq!(resp.stats.ephemerals_generated, 0);
        assert_eq!(resp.stats.quotes_signed, 0);
        assert_eq!(resp.stats.sessions_allocated, 0);
        assert_eq!(resp.stats.cookies_issued, 1);
    }

    #[test]
    fn cookie_is_bound_to_address_and_epoch() {
        let mut fx = Fixture::new(4);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (pending, m1) = initiate(&a, &b.identity, &mut fx.rng);
        let Ok(RespondOutcome::Challenge(ch)) = respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let m1c = pending.answer_cookie(&ch).unwrap();
        // Other source address.
        assert!(matches!(
            respond(&b, &mut resp, &m1c, "mallory", 1, &mut fx.rng),
            Ok(RespondOutcome::Challenge(_))
        ));
        // Two epochs later.
        assert!(matches!(
            respond(&b, &mut resp, &m1c, "a", 1 + 2 * COOKIE_EPOCH_TICKS, &mut fx.rng),
            Ok(RespondOutcome::Challenge(_))
        ));
        // Next epoch is still fine.
        assert!(matches!(
            respond(&b, &mut resp, &m1c, "a", COOKIE_EPOCH_TICKS + 5, &mut fx.rng),
            Ok(RespondOutcome::Proceed(..))
        ));
        assert_eq!(resp.stats.ephemerals_generated, 1);
    }

    #[test]
    fn invalid_certificate_is_rejected_after_cookie() {
        let mut fx = Fixture::new(5);
        let mut a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        a.certificate.signature.0[3] ^= 0x40;
        let mut resp = Responder::new(&mut fx.rng);
        let (pending, m1) = initiate(&a, &b.identity, &mut fx.rng);
        let Ok(RespondOutcome::Challenge(ch)) = respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let m1c = pending.answer_cookie(&ch).unwrap();
        assert_eq!(
            respond(&b, &mut resp, &m1c, "a", 1, &mut fx.rng).err(),
            Some(HandshakeRejection::BadCert(CertRejection::BadSignature))
        );
        assert_eq!(resp.stats.ephemerals_generated, 0);
        assert_eq!(resp.stats.sessions_allocated, 0);
    }

    #[test]
    fn replayed_m1_is_rejected() {
        let mut fx = Fixture::new(6);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (pending, m1) = initiate(&a, &b.identity, &mut fx.rng);
        let Ok(RespondOutcome::Challenge(ch)) = respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let m1c = pending.answer_cookie(&ch).unwrap();
        assert!(respond(&b, &mut resp, &m1c, "a", 1, &mut fx.rng).is_ok());
        assert_eq!(
            respond(&b, &mut resp, &m1c, "a", 2, &mut fx.rng).err(),
            Some(HandshakeRejection::Replayed)
        );
    }

    #[test]
    fn untrusted_responder_measurement_is_rejected_before_keys() {
        let mut fx = Fixture::new(7);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let mut b = fx.endpoint("ta", Role::Ta, b"ta");
        b.measurements = measure(&PlatformSnapshot::gp_tee(b"bl", b"os", b"evil")).unwrap();
        let mut resp = Responder::new(&mut fx.rng);
        assert_eq!(
            handshake(&mut fx, &a, &b, &mut resp).err(),
            Some(HandshakeRejection::QuoteRejected(QuoteRejection::MeasurementMismatch))
        );
    }

    #[test]
    fn untrusted_initiator_measurement_is_rejected_in_finalize() {
        let mut fx = Fixture::new(8);
        let mut a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        a.measurements = measure(&PlatformSnapshot::gp_tee(b"bl", b"os", b"evil")).unwrap();
        let mut resp = Responder::new(&mut fx.rng);
        assert_eq!(
            handshake(&mut fx, &a, &b, &mut resp).err(),
            Some(HandshakeRejection::QuoteRejected(QuoteRejection::MeasurementMismatch))
        );
    }

    #[test]
    fn wrong_peer_or_pin_is_rejected() {
        let mut fx = Fixture::new(9);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (pending, m1) = initiate(&a, &b.identity, &mut fx.rng);
        let pending = pending.pin_fingerprint(crypto::hash(b"some other cert"));
        let Ok(RespondOutcome::Challenge(ch)) = respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let m1c = pending.answer_cookie(&ch).unwrap();
        let Ok(RespondOutcome::Proceed(_, m2)) = respond(&b, &mut resp, &m1c, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        assert_eq!(
            complete(pending, &a, &m2, &fx.policy, 1).err(),
            Some(HandshakeRejection::PeerMismatch)
        );
    }

    #[test]
    fn bad_confirm_mac_is_rejected() {
        let mut fx = Fixture::new(10);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (pending, m1) = initiate(&a, &b.identity, &mut fx.rng);
        let Ok(RespondOutcome::Challenge(ch)) = respond(&b, &mut resp, &m1, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let m1c = pending.answer_cookie(&ch).unwrap();
        let Ok(RespondOutcome::Proceed(rp, m2)) = respond(&b, &mut resp, &m1c, "a", 1, &mut fx.rng)
        else {
            panic!()
        };
        let (_, mut m3) = complete(pending, &a, &m2, &fx.policy, 1).unwrap();
        let wrong = SymmetricKey::session([9; 32], KeyPurpose::SessionMac);
        m3.confirm_mac = crypto::mac(&wrong, b"whatever");
        assert_eq!(
            finalize(rp, &m3, &fx.policy).err(),
            Some(HandshakeRejection::BadConfirmMac)
        );
    }

    #[test]
    fn records_round_trip_and_reject_replay_and_tamper() {
        let mut fx = Fixture::new(11);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (mut sa, mut sb) = handshake(&mut fx, &a, &b, &mut resp).unwrap();
        let r0 = sa.send_record(b"hello").unwrap();
        assert_eq!(sb.recv_record(&r0).unwrap(), b"hello");
        assert_eq!(sb.recv_record(&r0), Err(RecordRejection::ReplayOrReorder));

        let mut r1 = sa.send_record(b"second").unwrap();
        r1.ciphertext[0] ^= 1;
        assert_eq!(sb.recv_record(&r1), Err(RecordRejection::AeadAuthFail));
        r1.ciphertext[0] ^= 1;
        assert_eq!(sb.recv_record(&r1).unwrap(), b"second");

        // Reflection: a record sent by A cannot be accepted back by A.
        let r2 = sa.send_record(b"third").unwrap();
        let mut reflected = r2.clone();
        reflected.sequence = 0;
        assert!(sa.recv_record(&reflected).is_err());

        let mut foreign = r2;
        foreign.session_id[0] ^= 1;
        assert_eq!(sb.recv_record(&foreign), Err(RecordRejection::WrongSession));

        let reply = sb.send_record(b"ack").unwrap();
        assert_eq!(sa.recv_record(&reply).unwrap(), b"ack");
        assert_eq!(sa.counters(), (3, 1));
    }

    #[test]
    fn closed_session_drops_keys() {
        let mut fx = Fixture::new(12);
        let a = fx.endpoint("tsm", Role::Tsm, b"tsm");
        let b = fx.endpoint("ta", Role::Ta, b"ta");
        let mut resp = Responder::new(&mut fx.rng);
        let (mut sa, _) = handshake(&mut fx, &a, &b, &mut resp).unwrap();
        sa.close();
        assert!(sa.keys().is_none());
        assert_eq!(sa.send_record(b"x"), Err(RecordRejection::NotEstablished));
    }
}
