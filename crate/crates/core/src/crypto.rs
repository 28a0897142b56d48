//! Cryptographic primitives behind every handshake, record and sealed blob.
//!
//! The whole crate uses a single cipher profile:
//!
//! | role              | algorithm           |
//! |-------------------|---------------------|
//! | signatures        | Ed25519             |
//! | key agreement     | X25519              |
//! | key derivation    | HKDF-SHA-256        |
//! | AEAD              | ChaCha20-Poly1305   |
//! | hash / MAC        | SHA-256 / HMAC      |
//!
//! All randomness is drawn from a caller-supplied [`SimRng`] so that a world
//! seeded with the same value replays byte-for-byte.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::Signer;
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore, SeedableRng};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

pub const HASH_LEN: usize = 32;
pub const KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
/// Length of handshake and quote nonces.
pub const NONCE_LEN: usize = 32;
pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;
/// HKDF-SHA-256 can expand to at most 255 blocks.
pub const KDF_MAX_OUT: usize = 255 * HASH_LEN;

/// The deterministic random source every module draws from.
pub type SimRng = rand_chacha::ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("signature rejected")]
    BadSignature,
    #[error("malformed public key")]
    MalformedKey,
    #[error("peer key agreement value is invalid or low order")]
    InvalidPeerKey,
    #[error("requested output length {0} is out of range")]
    InvalidLength(usize),
    #[error("AEAD authentication failed")]
    AeadAuthFail,
}

/// Tag naming the cipher profile a key belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CipherProfile {
    Ed25519X25519HkdfSha256ChaChaPoly,
}

pub const PROFILE: CipherProfile = CipherProfile::Ed25519X25519HkdfSha256ChaChaPoly;

macro_rules! hex_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Option<Self> {
                let bytes = hex::decode(s).ok()?;
                Some(Self(bytes.try_into().ok()?))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad hex length"))
            }
        }
    };
}

hex_newtype!(Digest, HASH_LEN);
hex_newtype!(PublicKey, KEY_LEN);
hex_newtype!(AgreementPublic, KEY_LEN);
hex_newtype!(Signature, SIGNATURE_LEN);

/// A long-term Ed25519 key pair (attestation, command or CA key).
///
/// Deliberately neither `Clone` nor `Serialize`: the secret half never leaves
/// the actor that owns it.
pub struct SigningKeyPair {
    public: PublicKey,
    secret: ed25519_dalek::SigningKey,
    profile: CipherProfile,
}

impl SigningKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = ed25519_dalek::SigningKey::generate(rng);
        Self::from_dalek(secret)
    }

    pub fn from_secret_bytes(bytes: &[u8; KEY_LEN]) -> Self {
        Self::from_dalek(ed25519_dalek::SigningKey::from_bytes(bytes))
    }

    fn from_dalek(secret: ed25519_dalek::SigningKey) -> Self {
        Self {
            public: PublicKey(secret.verifying_key().to_bytes()),
            secret,
            profile: PROFILE,
        }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn profile(&self) -> CipherProfile {
        self.profile
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.secret.sign(message).to_bytes())
    }

    /// Raw secret scalar seed. Used by the leak scanner and compromise oracles.
    pub fn secret_bytes(&self) -> &[u8; KEY_LEN] {
        self.secret.as_bytes()
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn generate_signing_keypair<R: RngCore + CryptoRng>(rng: &mut R) -> SigningKeyPair {
    SigningKeyPair::generate(rng)
}

pub fn sign(secret: &SigningKeyPair, message: &[u8]) -> Signature {
    secret.sign(message)
}

/// Malformed keys and signatures are reported as rejections, never panics.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> Result<(), CryptoError> {
    let key =
        ed25519_dalek::VerifyingKey::from_bytes(&public.0).map_err(|_| CryptoError::MalformedKey)?;
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify_strict(message, &sig)
        .map_err(|_| CryptoError::BadSignature)
}

/// Fresh X25519 key pair for one handshake.
pub struct EphemeralKeyPair {
    public: AgreementPublic,
    secret: x25519_dalek::StaticSecret,
}

impl EphemeralKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(x25519_dalek::StaticSecret::random_from_rng(rng))
    }

    pub fn from_secret_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self::from_secret(x25519_dalek::StaticSecret::from(bytes))
    }

    fn from_secret(secret: x25519_dalek::StaticSecret) -> Self {
        let public = x25519_dalek::PublicKey::from(&secret);
        Self {
            public: AgreementPublic(public.to_bytes()),
            secret,
        }
    }

    pub fn public(&self) -> AgreementPublic {
        self.public
    }

    pub fn derive_shared_secret(
        &self,
        peer: &AgreementPublic,
    ) -> Result<Zeroizing<[u8; KEY_LEN]>, CryptoError> {
        let shared = self
            .secret
            .diffie_hellman(&x25519_dalek::PublicKey::from(peer.0));
        if !shared.was_contributory() {
            return Err(CryptoError::InvalidPeerKey);
        }
        Ok(Zeroizing::new(shared.to_bytes()))
    }
}

impl fmt::Debug for EphemeralKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EphemeralKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn derive_shared_secret(
    own: &EphemeralKeyPair,
    peer: &AgreementPublic,
) -> Result<Zeroizing<[u8; KEY_LEN]>, CryptoError> {
    own.derive_shared_secret(peer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyPurpose {
    SessionEncrypt,
    SessionMac,
    Sealing,
}

/// Fixed-length symmetric key tagged with what it may be used for.
#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    bytes: Zeroizing<[u8; KEY_LEN]>,
    purpose: KeyPurpose,
}

impl SymmetricKey {
    /// Session keys come out of the handshake KDF. Sealing keys can only be
    /// obtained from a [`StorageRootKey`].
    pub fn session(bytes: [u8; KEY_LEN], purpose: KeyPurpose) -> Self {
        assert_ne!(purpose, KeyPurpose::Sealing, "sealing keys derive from an SRK");
        Self {
            bytes: Zeroizing::new(bytes),
            purpose,
        }
    }

    pub fn purpose(&self) -> KeyPurpose {
        self.purpose
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymmetricKey({:?}, ..)", self.purpose)
    }
}

/// Processor-specific root from which all sealing keys of one TEE derive.
pub struct StorageRootKey(Zeroizing<[u8; KEY_LEN]>);

impl StorageRootKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = Zeroizing::new([0u8; KEY_LEN]);
        rng.fill_bytes(bytes.as_mut());
        Self(bytes)
    }

    pub fn derive_sealing_key(&self, label: &str) -> SymmetricKey {
        let okm = kdf(self.0.as_ref(), b"teecred/srk", label.as_bytes(), KEY_LEN)
            .expect("fixed length within bounds");
        let mut bytes = Zeroizing::new([0u8; KEY_LEN]);
        bytes.copy_from_slice(&okm);
        SymmetricKey {
            bytes,
            purpose: KeyPurpose::Sealing,
        }
    }

    pub fn secret_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for StorageRootKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StorageRootKey(..)")
    }
}

/// HKDF-SHA-256 extract-and-expand.
pub fn kdf(secret: &[u8], salt: &[u8], info: &[u8], out_len: usize) -> Result<Vec<u8>, CryptoError> {
    if out_len == 0 || out_len > KDF_MAX_OUT {
        return Err(CryptoError::InvalidLength(out_len));
    }
    let hk = hkdf::Hkdf::<Sha256>::new(Some(salt), secret);
    let mut okm = vec![0u8; out_len];
    hk.expand(info, &mut okm)
        .map_err(|_| CryptoError::InvalidLength(out_len))?;
    Ok(okm)
}

pub fn aead_seal(
    key: &SymmetricKey,
    nonce: &[u8; AEAD_NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(key.bytes.as_ref().into());
    cipher
        .encrypt(nonce.into(), Payload { msg: plaintext, aad })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers")
}

pub fn aead_open(
    key: &SymmetricKey,
    nonce: &[u8; AEAD_NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new(key.bytes.as_ref().into());
    cipher
        .decrypt(nonce.into(), Payload { msg: ciphertext, aad })
        .map_err(|_| CryptoError::AeadAuthFail)
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// Hash of a sequence of fields, each prefixed with its big-endian u32 length
/// so that field boundaries cannot be shifted.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u32).to_be_bytes());
        h.update(part);
    }
    Digest(h.finalize().into())
}

pub fn mac(key: &SymmetricKey, data: &[u8]) -> Digest {
    mac_raw(key.as_bytes(), data)
}

pub(crate) fn mac_raw(key: &[u8], data: &[u8]) -> Digest {
    let mut m = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(data);
    Digest(m.finalize().into_bytes().into())
}

/// Constant-time tag comparison.
pub fn mac_verify(key: &SymmetricKey, data: &[u8], tag: &Digest) -> bool {
    let mut m =
        <Hmac<Sha256> as Mac>::new_from_slice(key.as_bytes()).expect("hmac accepts any key length");
    m.update(data);
    m.verify_slice(&tag.0).is_ok()
}

pub fn random_array<const N: usize, R: RngCore + CryptoRng>(rng: &mut R) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}
