//! Per-role state: trusted applications with sealed storage, and the
//! revocation, backup and maintenance authorities.

use std::collections::BTreeMap;
use std::fmt;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{self, Digest};
use crate::pki::{Identity, Validity};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

mod ba;
mod journal;
mod ma;
mod ra;
mod ta;

pub use ba::{BackupEntry, BackupStore};
pub use journal::{Journal, JournalError};
pub use ma::{AttemptReport, IssuedRecord, MaintenanceAuthority, ReportLog};
pub use ra::{RaJournalEntry, RevocationAuthority, RevocationEntry, RevocationList, RevocationMode};
pub use ta::{SealedBlob, TaState, UseRejection};

pub type CredentialId = Digest;

/// Length of generated credential material.
pub const MATERIAL_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActorError {
    #[error("no sealed credentials present")]
    NoCredentials,
    #[error("sealed storage failed authentication")]
    AeadAuthFail,
    #[error("stored data is corrupt: {0}")]
    Corrupt(#[from] DecodeError),
    #[error("caller {0} is not authorized for this operation")]
    Unauthorized(String),
    #[error("no backup {1} for {0}")]
    UnknownBackup(String, u64),
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("unknown credential {0}")]
    UnknownCredential(CredentialId),
}

/// One piece of authentication material held by a TA.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential {
    pub credential_id: CredentialId,
    pub issuer: Identity,
    pub subject: Identity,
    pub name: String,
    pub public_part: Vec<u8>,
    pub material: Zeroizing<Vec<u8>>,
    pub validity: Validity,
    pub version: u32,
}

impl Credential {
    pub fn compute_id(
        issuer: &Identity,
        subject: &Identity,
        name: &str,
        public_part: &[u8],
        version: u32,
    ) -> CredentialId {
        crypto::hash_parts(&[
            b"teecred/credential",
            &issuer.to_bytes(),
            &subject.to_bytes(),
            name.as_bytes(),
            public_part,
            &version.to_be_bytes(),
        ])
    }

    /// Mints a credential with fresh public part and material.
    pub fn issue<R: RngCore + CryptoRng>(
        issuer: Identity,
        subject: Identity,
        name: impl Into<String>,
        validity: Validity,
        version: u32,
        rng: &mut R,
    ) -> Self {
        let name = name.into();
        let public_part = crypto::random_array::<16, _>(rng).to_vec();
        let material = Zeroizing::new(crypto::random_array::<MATERIAL_LEN, _>(rng).to_vec());
        Self {
            credential_id: Self::compute_id(&issuer, &subject, &name, &public_part, version),
            issuer,
            subject,
            name,
            public_part,
            material,
            validity,
            version,
        }
    }

    pub fn id_is_consistent(&self) -> bool {
        self.credential_id
            == Self::compute_id(
                &self.issuer,
                &self.subject,
                &self.name,
                &self.public_part,
                self.version,
            )
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential")
            .field("id", &self.credential_id)
            .field("name", &self.name)
            .field("subject", &self.subject)
            .field("version", &self.version)
            .finish_non_exhaustive()
    }
}

impl Canonical for Credential {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.credential_id);
        w.put(&self.issuer);
        w.put(&self.subject);
        w.put(&self.name);
        w.put(&self.public_part);
        w.put(&*self.material);
        w.put(&self.validity);
        w.put(&self.version);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let c = Self {
            credential_id: r.get()?,
            issuer: r.get()?,
            subject: r.get()?,
            name: r.get()?,
            public_part: r.get()?,
            material: Zeroizing::new(r.get()?),
            validity: r.get()?,
            version: r.get()?,
        };
        if !c.id_is_consistent() {
            return Err(DecodeError::NonCanonical("credential id does not match contents"));
        }
        Ok(c)
    }
}

/// The set of credentials a TA holds, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CredentialSet {
    items: BTreeMap<CredentialId, Credential>,
}

impl CredentialSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: Credential) {
        self.items.insert(c.credential_id, c);
    }

    pub fn remove(&mut self, id: &CredentialId) -> Option<Credential> {
        self.items.remove(id)
    }

    pub fn get(&self, id: &CredentialId) -> Option<&Credential> {
        self.items.get(id)
    }

    pub fn contains(&self, id: &CredentialId) -> bool {
        self.items.contains_key(id)
    }

    pub fn ids(&self) -> std::collections::BTreeSet<CredentialId> {
        self.items.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Credential> {
        self.items.values()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn extend(&mut self, other: CredentialSet) {
        self.items.extend(other.items);
    }
}

impl FromIterator<Credential> for CredentialSet {
    fn from_iter<I: IntoIterator<Item = Credential>>(iter: I) -> Self {
        let mut set = Self::new();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl Canonical for CredentialSet {
    fn encode(&self, w: &mut Writer) {
        let items: Vec<&Credential> = self.items.values().collect();
        w.put_len(items.len());
        for c in items {
            w.put(c);
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let list: Vec<Credential> = r.get()?;
        let mut set = Self::new();
        for c in list {
            if set.items.last_key_value().is_some_and(|(k, _)| *k >= c.credential_id) {
                return Err(DecodeError::NonCanonical("credential set not sorted by id"));
            }
            set.insert(c);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;
    use crate::pki::Role;

    pub(crate) fn sample_set(seed: u64, n: usize) -> CredentialSet {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|i| {
                Credential::issue(
                    Identity::new("ma", Role::Ma),
                    Identity::new("ta-a", Role::Ta),
                    format!("cred-{i}"),
                    Validity::new(0, 1000).unwrap(),
                    1,
                    &mut rng,
                )
            })
            .collect()
    }

    #[test]
    fn credential_id_is_content_derived() {
        let set = sample_set(1, 2);
        let ids: Vec<_> = set.ids().into_iter().collect();
        assert_ne!(ids[0], ids[1]);
        assert!(set.iter().all(Credential::id_is_consistent));
    }

    #[test]
    fn version_changes_the_id() {
        let c = sample_set(2, 1).iter().next().unwrap().clone();
        let bumped = Credential::compute_id(&c.issuer, &c.subject, &c.name, &c.public_part, 2);
        assert_ne!(bumped, c.credential_id);
    }

    #[test]
    fn set_round_trips_and_rejects_forged_ids() {
        let set = sample_set(3, 3);
        assert_eq!(CredentialSet::from_bytes(&set.to_bytes()).unwrap(), set);

        let mut c = set.iter().next().unwrap().clone();
        c.version = 9;
        assert!(Credential::from_bytes(&c.to_bytes()).is_err());
    }

    #[test]
    fn debug_never_prints_material() {
        let c = sample_set(4, 1).iter().next().unwrap().clone();
        assert!(!format!("{c:?}").contains(&hex::encode(&*c.material)));
    }
}
