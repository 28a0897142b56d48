use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::journal::{Journal, JournalError};
use super::{ActorError, AttemptReport, CredentialId};
use crate::pki::{Identity, LogicalTime, Role};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevocationMode {
    /// Entries are revoked credentials.
    Blacklist,
    /// Entries are the only permitted credentials.
    Whitelist,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationEntry {
    pub registered_by: Identity,
    pub at: LogicalTime,
}

/// The master revocation list. Membership is one hash-map probe.
#[derive(Debug, Clone)]
pub struct RevocationList {
    mode: RevocationMode,
    entries: HashMap<CredentialId, RevocationEntry>,
}

impl RevocationList {
    pub fn new(mode: RevocationMode) -> Self {
        Self {
            mode,
            entries: HashMap::new(),
        }
    }

    pub fn mode(&self) -> RevocationMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &CredentialId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn is_revoked(&self, id: &CredentialId) -> bool {
        match self.mode {
            RevocationMode::Blacklist => self.contains(id),
            RevocationMode::Whitelist => !self.contains(id),
        }
    }

    /// Revokes `ids`. On a blacklist they are added; on a whitelist they are
    /// removed and `replacements` take their place. Returns how many entries
    /// changed on account of `ids`.
    pub fn register(
        &mut self,
        ids: &BTreeSet<CredentialId>,
        replacements: &BTreeSet<CredentialId>,
        by: &Identity,
        at: LogicalTime,
    ) -> usize {
        let entry = || RevocationEntry {
            registered_by: by.clone(),
            at,
        };
        match self.mode {
            RevocationMode::Blacklist => ids
                .iter()
                .filter(|id| self.entries.insert(**id, entry()).is_none())
                .count(),
            RevocationMode::Whitelist => {
                let removed = ids.iter().filter(|id| self.entries.remove(id).is_some()).count();
                for id in replacements {
                    self.entries.insert(*id, entry());
                }
                removed
            }
        }
    }

    /// Whitelist provisioning of freshly issued credentials. No-op on a blacklist.
    pub fn permit(&mut self, ids: &BTreeSet<CredentialId>, by: &Identity, at: LogicalTime) {
        if self.mode == RevocationMode::Whitelist {
            for id in ids {
                self.entries.insert(
                    *id,
                    RevocationEntry {
                        registered_by: by.clone(),
                        at,
                    },
                );
            }
        }
    }

    /// The revoked subset of `ids`.
    pub fn lookup(&self, ids: &BTreeSet<CredentialId>) -> BTreeSet<CredentialId> {
        ids.iter().filter(|id| self.is_revoked(id)).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaJournalEntry {
    Register {
        ids: BTreeSet<CredentialId>,
        replacements: BTreeSet<CredentialId>,
        by: Identity,
        at: LogicalTime,
    },
    Permit {
        ids: BTreeSet<CredentialId>,
        by: Identity,
        at: LogicalTime,
    },
}

impl Canonical for RaJournalEntry {
    fn encode(&self, w: &mut Writer) {
        match self {
            RaJournalEntry::Register {
                ids,
                replacements,
                by,
                at,
            } => {
                w.put_u8(1);
                w.put(ids);
                w.put(replacements);
                w.put(by);
                w.put(at);
            }
            RaJournalEntry::Permit { ids, by, at } => {
                w.put_u8(2);
                w.put(ids);
                w.put(by);
                w.put(at);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(RaJournalEntry::Register {
                ids: r.get()?,
                replacements: r.get()?,
                by: r.get()?,
                at: r.get()?,
            }),
            2 => Ok(RaJournalEntry::Permit {
                ids: r.get()?,
                by: r.get()?,
                at: r.get()?,
            }),
            tag => Err(DecodeError::InvalidTag {
                what: "ra journal entry",
                tag,
            }),
        }
    }
}

/// Revocation authority: the list plus reports of revoked-credential use
/// waiting to be delivered to the maintenance authority.
#[derive(Debug)]
pub struct RevocationAuthority {
    identity: Identity,
    list: RevocationList,
    pub pending_reports: Vec<AttemptReport>,
    journal: Option<Journal>,
}

impl RevocationAuthority {
    pub fn new(identity: Identity, mode: RevocationMode) -> Self {
        Self {
            identity,
            list: RevocationList::new(mode),
            pending_reports: Vec::new(),
            journal: None,
        }
    }

    /// Rebuilds state from an existing journal and keeps appending to it.
    pub fn resume(
        identity: Identity,
        mode: RevocationMode,
        path: &Path,
    ) -> Result<Self, JournalError> {
        let mut ra = Self::new(identity, mode);
        for entry in Journal::replay::<RaJournalEntry>(path)? {
            ra.apply(&entry);
        }
        ra.journal = Some(Journal::open(path)?);
        Ok(ra)
    }

    pub fn attach_journal(&mut self, journal: Journal) {
        self.journal = Some(journal);
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn list(&self) -> &RevocationList {
        &self.list
    }

    fn apply(&mut self, entry: &RaJournalEntry) -> usize {
        match entry {
            RaJournalEntry::Register {
                ids,
                replacements,
                by,
                at,
            } => self.list.register(ids, replacements, by, *at),
            RaJournalEntry::Permit { ids, by, at } => {
                self.list.permit(ids, by, *at);
                ids.len()
            }
        }
    }

    fn record(&mut self, entry: RaJournalEntry) -> Result<usize, ActorError> {
        if let Some(j) = self.journal.as_mut() {
            j.append(&entry)
                .map_err(|e| ActorError::Unauthorized(format!("journal: {e}")))?;
        }
        Ok(self.apply(&entry))
    }

    /// Only the maintenance authority may revoke.
    pub fn ra_register(
        &mut self,
        ids: &BTreeSet<CredentialId>,
        replacements: &BTreeSet<CredentialId>,
        by: &Identity,
        at: LogicalTime,
    ) -> Result<usize, ActorError> {
        if by.role != Role::Ma {
            return Err(ActorError::Unauthorized(by.to_string()));
        }
        self.record(RaJournalEntry::Register {
            ids: ids.clone(),
            replacements: replacements.clone(),
            by: by.clone(),
            at,
        })
    }

    pub fn permit(
        &mut self,
        ids: &BTreeSet<CredentialId>,
        by: &Identity,
        at: LogicalTime,
    ) -> Result<(), ActorError> {
        if !matches!(by.role, Role::Ma | Role::Tsm) {
            return Err(ActorError::Unauthorized(by.to_string()));
        }
        self.record(RaJournalEntry::Permit {
            ids: ids.clone(),
            by: by.clone(),
            at,
        })?;
        Ok(())
    }

    pub fn ra_lookup(
        &self,
        ids: &BTreeSet<CredentialId>,
        caller: &Identity,
    ) -> Result<BTreeSet<CredentialId>, ActorError> {
        if !matches!(caller.role, Role::Tsm | Role::Ma | Role::Ra) {
            return Err(ActorError::Unauthorized(caller.to_string()));
        }
        Ok(self.list.lookup(ids))
    }

    /// Queues a report when a revoked credential is presented.
    pub fn ra_report_attempt(
        &mut self,
        ta: &Identity,
        id: &CredentialId,
        at: LogicalTime,
    ) -> Option<AttemptReport> {
        if !self.list.is_revoked(id) {
            return None;
        }
        let report = AttemptReport {
            ta: ta.clone(),
            credential_id: *id,
            at,
        };
        self.pending_reports.push(report.clone());
        Some(report)
    }
}
