use std::collections::BTreeMap;
use std::path::Path;

use super::journal::{Journal, JournalError};
use super::ActorError;
use crate::crypto::{self, Digest};
use crate::pki::{Identity, LogicalTime, Role};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

/// One stored backup. The payload is opaque: encrypted under the owner's SRK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupEntry {
    pub owner: Identity,
    pub version: u64,
    pub payload: Vec<u8>,
    pub at: LogicalTime,
}

impl BackupEntry {
    pub fn digest(&self) -> Digest {
        crypto::hash(&self.to_bytes())
    }
}

impl Canonical for BackupEntry {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.owner);
        w.put(&self.version);
        w.put(&self.payload);
        w.put(&self.at);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            owner: r.get()?,
            version: r.get()?,
            payload: r.get()?,
            at: r.get()?,
        })
    }
}

/// Backup authority storage, keyed by (TA, version).
#[derive(Debug, Default)]
pub struct BackupStore {
    entries: BTreeMap<(Identity, u64), BackupEntry>,
    journal: Option<Journal>,
}

impl BackupStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resume(path: &Path) -> Result<Self, JournalError> {
        let mut store = Self::new();
        for e in Journal::replay::<BackupEntry>(path)? {
            store.entries.insert((e.owner.clone(), e.version), e);
        }
        store.journal = Some(Journal::open(path)?);
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_version(&self, owner: &Identity) -> u64 {
        self.latest_version(owner).map_or(1, |v| v + 1)
    }

    pub fn latest_version(&self, owner: &Identity) -> Option<u64> {
        self.entries
            .range((owner.clone(), 0)..=(owner.clone(), u64::MAX))
            .next_back()
            .map(|((_, v), _)| *v)
    }

    /// Only the owning TA may store.
    pub fn ba_store(
        &mut self,
        caller: &Identity,
        owner: &Identity,
        payload: Vec<u8>,
        at: LogicalTime,
    ) -> Result<u64, ActorError> {
        if caller != owner || owner.role != Role::Ta {
            return Err(ActorError::Unauthorized(caller.to_string()));
        }
        let entry = BackupEntry {
            owner: owner.clone(),
            version: self.next_version(owner),
            payload,
            at,
        };
        if let Some(j) = self.journal.as_mut() {
            j.append(&entry)
                .map_err(|e| ActorError::Unauthorized(format!("journal: {e}")))?;
        }
        let version = entry.version;
        self.entries.insert((owner.clone(), version), entry);
        Ok(version)
    }

    /// The owning TA or a maintenance authority may fetch. Authorization is
    /// checked before existence so the store leaks nothing to other callers.
    pub fn ba_fetch(
        &self,
        caller: &Identity,
        owner: &Identity,
        version: Option<u64>,
    ) -> Result<&BackupEntry, ActorError> {
        if caller != owner && caller.role != Role::Ma {
            return Err(ActorError::Unauthorized(caller.to_string()));
        }
        let version = version
            .or_else(|| self.latest_version(owner))
            .ok_or_else(|| ActorError::UnknownBackup(owner.to_string(), 0))?;
        self.entries
            .get(&(owner.clone(), version))
            .ok_or_else(|| ActorError::UnknownBackup(owner.to_string(), version))
    }

    pub fn iter(&self) -> impl Iterator<Item = &BackupEntry> {
        self.entries.values()
    }
}
