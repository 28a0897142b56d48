use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActorError, CredentialId, CredentialSet};
use crate::attest::PlatformSnapshot;
use crate::crypto::{self, Digest, StorageRootKey, AEAD_NONCE_LEN};
use crate::pki::Identity;
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

/// Credentials encrypted for untrusted storage under an SRK-derived key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub ciphertext: Vec<u8>,
    pub nonce: [u8; AEAD_NONCE_LEN],
    /// Binds the blob to the owning TA and the set version.
    pub aad: Digest,
    pub version: u64,
    pub srk_id: Identity,
}

impl Canonical for SealedBlob {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.ciphertext);
        w.put(&self.nonce);
        w.put(&self.aad);
        w.put(&self.version);
        w.put(&self.srk_id);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            ciphertext: r.get()?,
            nonce: r.get()?,
            aad: r.get()?,
            version: r.get()?,
            srk_id: r.get()?,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UseRejection {
    #[error("TA is locked for a pending update")]
    Locked,
    #[error("TA does not hold this credential")]
    NotHeld,
    #[error("credential has been revoked")]
    Revoked,
    #[error("sealed storage unreadable")]
    StorageFault,
}

/// A trusted application: identity, sealed store and the REE lock.
#[derive(Debug)]
pub struct TaState {
    identity: Identity,
    srk: StorageRootKey,
    sealed: Option<SealedBlob>,
    seal_version: u64,
    locked: bool,
    pub platform: PlatformSnapshot,
    /// Skips deletions it is told to perform. Used to exercise the reporting path.
    pub malicious: bool,
    pub events: Vec<String>,
}

fn seal_aad(owner: &Identity, version: u64) -> Digest {
    crypto::hash_parts(&[b"teecred/seal", &owner.to_bytes(), &version.to_be_bytes()])
}

fn backup_aad(owner: &Identity) -> Vec<u8> {
    [b"teecred/backup".as_slice(), &owner.to_bytes()].concat()
}

impl TaState {
    pub fn new(identity: Identity, srk: StorageRootKey, platform: PlatformSnapshot) -> Self {
        Self {
            identity,
            srk,
            sealed: None,
            seal_version: 0,
            locked: false,
            platform,
            malicious: false,
            events: Vec::new(),
        }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn srk(&self) -> &StorageRootKey {
        &self.srk
    }

    pub fn sealed(&self) -> Option<&SealedBlob> {
        self.sealed.as_ref()
    }

    /// Replaces stored state with `blob`, e.g. to simulate storage tampering or
    /// copying another TA's blob.
    pub fn set_sealed(&mut self, blob: Option<SealedBlob>) {
        self.sealed = blob;
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn seal_credentials<R: RngCore + CryptoRng>(
        &mut self,
        set: &CredentialSet,
        rng: &mut R,
    ) -> &SealedBlob {
        self.seal_version += 1;
        let key = self.srk.derive_sealing_key("credentials");
        let nonce = crypto::random_array(rng);
        let aad = seal_aad(&self.identity, self.seal_version);
        let ciphertext = crypto::aead_seal(&key, &nonce, aad.as_bytes(), &set.to_bytes());
        self.sealed.insert(SealedBlob {
            ciphertext,
            nonce,
            aad,
            version: self.seal_version,
            srk_id: self.identity.clone(),
        })
    }

    pub fn unseal_credentials(&self) -> Result<CredentialSet, ActorError> {
        let blob = self.sealed.as_ref().ok_or(ActorError::NoCredentials)?;
        // The expected binding is recomputed locally; the stored aad is not trusted.
        let aad = seal_aad(&self.identity, blob.version);
        let key = self.srk.derive_sealing_key("credentials");
        let plain = crypto::aead_open(&key, &blob.nonce, aad.as_bytes(), &blob.ciphertext)
            .map_err(|_| ActorError::AeadAuthFail)?;
        Ok(CredentialSet::from_bytes(&plain)?)
    }

    /// Current set, or empty when nothing has been sealed yet.
    pub fn credentials_or_empty(&self) -> Result<CredentialSet, ActorError> {
        match self.unseal_credentials() {
            Err(ActorError::NoCredentials) => Ok(CredentialSet::new()),
            other => other,
        }
    }

    pub fn delete_credentials<R: RngCore + CryptoRng>(
        &mut self,
        ids: &std::collections::BTreeSet<CredentialId>,
        rng: &mut R,
    ) -> Result<usize, ActorError> {
        let mut set = self.credentials_or_empty()?;
        let before = set.len();
        for id in ids {
            set.remove(id);
        }
        let removed = before - set.len();
        self.seal_credentials(&set, rng);
        Ok(removed)
    }

    pub fn provision<R: RngCore + CryptoRng>(
        &mut self,
        incoming: CredentialSet,
        rng: &mut R,
    ) -> Result<(), ActorError> {
        let mut set = self.credentials_or_empty()?;
        set.extend(incoming);
        self.seal_credentials(&set, rng);
        Ok(())
    }

    /// Drops the sealed store entirely, as after a device reset.
    pub fn wipe(&mut self) {
        self.sealed = None;
        self.events.push("wiped".into());
    }

    pub fn lock(&mut self) {
        if self.locked {
            self.events.push("lock requested while already locked".into());
        }
        self.locked = true;
    }

    pub fn unlock(&mut self) {
        if !self.locked {
            self.events.push("unlock requested while not locked".into());
        }
        self.locked = false;
    }

    /// An REE-side request to use a credential. Revocation status is the
    /// relying party's concern and is checked by the caller.
    pub fn use_credential(&self, id: &CredentialId) -> Result<(), UseRejection> {
        if self.locked {
            return Err(UseRejection::Locked);
        }
        let set = self
            .credentials_or_empty()
            .map_err(|_| UseRejection::StorageFault)?;
        if set.contains(id) {
            Ok(())
        } else {
            Err(UseRejection::NotHeld)
        }
    }

    /// Encrypts a credential set for remote backup. Only this TA's SRK can open it.
    pub fn export_backup<R: RngCore + CryptoRng>(&self, set: &CredentialSet, rng: &mut R) -> Vec<u8> {
        let key = self.srk.derive_sealing_key("backup");
        let nonce: [u8; AEAD_NONCE_LEN] = crypto::random_array(rng);
        let ct = crypto::aead_seal(&key, &nonce, &backup_aad(&self.identity), &set.to_bytes());
        [nonce.as_slice(), &ct].concat()
    }

    pub fn import_backup(&self, payload: &[u8]) -> Result<CredentialSet, ActorError> {
        if payload.len() < AEAD_NONCE_LEN {
            return Err(ActorError::AeadAuthFail);
        }
        let (nonce, ct) = payload.split_at(AEAD_NONCE_LEN);
        let key = self.srk.derive_sealing_key("backup");
        let plain = crypto::aead_open(
            &key,
            nonce.try_into().expect("split at nonce length"),
            &backup_aad(&self.identity),
            ct,
        )
        .map_err(|_| ActorError::AeadAuthFail)?;
        Ok(CredentialSet::from_bytes(&plain)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actors::tests::sample_set;
    use crate::crypto::seeded_rng;
    use crate::pki::Role;

    fn ta(id: &str, seed: u64) -> TaState {
        let mut rng = seeded_rng(seed);
        TaState::new(
            Identity::new(id, Role::Ta),
            StorageRootKey::generate(&mut rng),
            PlatformSnapshot::gp_tee(b"bl", b"os", id.as_bytes()),
        )
    }

    #[test]
    fn seal_unseal_round_trip() {
        let mut rng = seeded_rng(1);
        let mut a = ta("ta-a", 1);
        let set = sample_set(1, 3);
        a.seal_credentials(&set, &mut rng);
        assert_eq!(a.unseal_credentials().unwrap(), set);
        // Blob is retained after unsealing.
        assert!(a.sealed().is_some());
    }

    #[test]
    fn empty_set_seals_to_a_valid_blob() {
        let mut a = ta("ta-a", 1);
        a.seal_credentials(&CredentialSet::new(), &mut seeded_rng(2));
        assert!(a.unseal_credentials().unwrap().is_empty());
    }

    #[test]
    fn missing_blob_is_no_credentials() {
        assert_eq!(ta("ta-a", 1).unseal_credentials(), Err(ActorError::NoCredentials));
    }

    #[test]
    fn tampered_blob_fails_authentication() {
        let mut a = ta("ta-a", 1);
        a.seal_credentials(&sample_set(1, 1), &mut seeded_rng(2));
        let mut blob = a.sealed().unwrap().clone();
        blob.ciphertext[5] ^= 0x80;
        a.set_sealed(Some(blob));
        assert_eq!(a.unseal_credentials(), Err(ActorError::AeadAuthFail));
    }

    #[test]
    fn blob_moved_to_another_ta_does_not_open() {
        let mut a = ta("ta-a", 1);
        let mut b = ta("ta-b", 2);
        a.seal_credentials(&sample_set(1, 1), &mut seeded_rng(3));
        b.set_sealed(a.sealed().cloned());
        assert_eq!(b.unseal_credentials(), Err(ActorError::AeadAuthFail));
    }

    #[test]
    fn rolled_back_version_label_fails() {
        let mut a = ta("ta-a", 1);
        a.seal_credentials(&sample_set(1, 1), &mut seeded_rng(3));
        let mut blob = a.sealed().unwrap().clone();
        blob.version += 1;
        a.set_sealed(Some(blob));
        assert_eq!(a.unseal_credentials(), Err(ActorError::AeadAuthFail));
    }

    #[test]
    fn lock_blocks_ree_use() {
        let mut a = ta("ta-a", 1);
        let set = sample_set(1, 1);
        let id = *set.ids().first().unwrap();
        a.seal_credentials(&set, &mut seeded_rng(3));
        assert_eq!(a.use_credential(&id), Ok(()));
        a.lock();
        assert_eq!(a.use_credential(&id), Err(UseRejection::Locked));
        a.unlock();
        assert_eq!(a.use_credential(&id), Ok(()));
        assert_eq!(
            a.use_credential(&crypto::hash(b"unknown")),
            Err(UseRejection::NotHeld)
        );
    }

    #[test]
    fn redundant_lock_transitions_are_logged() {
        let mut a = ta("ta-a", 1);
        a.unlock();
        a.lock();
        a.lock();
        assert!(a.is_locked());
        assert_eq!(a.events.len(), 2);
    }

    #[test]
    fn backup_export_is_ta_bound() {
        let mut rng = seeded_rng(4);
        let a = ta("ta-a", 1);
        let b = ta("ta-b", 2);
        let set = sample_set(5, 2);
        let payload = a.export_backup(&set, &mut rng);
        assert_eq!(a.import_backup(&payload).unwrap(), set);
        assert_eq!(b.import_backup(&payload), Err(ActorError::AeadAuthFail));
        assert_eq!(a.import_backup(&payload[..4]), Err(ActorError::AeadAuthFail));
    }

    #[test]
    fn delete_and_provision() {
        let mut rng = seeded_rng(6);
        let mut a = ta("ta-a", 1);
        let set = sample_set(6, 3);
        a.provision(set.clone(), &mut rng).unwrap();
        let first: std::collections::BTreeSet<_> = set.ids().into_iter().take(1).collect();
        assert_eq!(a.delete_credentials(&first, &mut rng).unwrap(), 1);
        assert_eq!(a.unseal_credentials().unwrap().len(), 2);
        assert_eq!(a.delete_credentials(&first, &mut rng).unwrap(), 0);
    }
}
