use std::collections::BTreeMap;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::{ActorError, Credential, CredentialId};
use crate::pki::{Identity, LogicalTime, Validity};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};

/// A revoked credential was presented by a TA.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptReport {
    pub ta: Identity,
    pub credential_id: CredentialId,
    pub at: LogicalTime,
}

impl Canonical for AttemptReport {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.ta);
        w.put(&self.credential_id);
        w.put(&self.at);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            ta: r.get()?,
            credential_id: r.get()?,
            at: r.get()?,
        })
    }
}

/// Append-only record of acknowledged attempt reports.
#[derive(Debug, Default, Clone)]
pub struct ReportLog {
    entries: Vec<AttemptReport>,
}

impl ReportLog {
    pub fn append(&mut self, reports: impl IntoIterator<Item = AttemptReport>) {
        self.entries.extend(reports);
    }

    pub fn entries(&self) -> &[AttemptReport] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuedRecord {
    pub subject: Identity,
    pub name: String,
    pub version: u32,
    pub superseded_by: Option<CredentialId>,
}

/// Maintenance authority: issues credentials and their updates, and keeps
/// the report log.
#[derive(Debug)]
pub struct MaintenanceAuthority {
    identity: Identity,
    issued: BTreeMap<CredentialId, IssuedRecord>,
    pub reports: ReportLog,
    pub validity: Validity,
}

impl MaintenanceAuthority {
    pub fn new(identity: Identity, validity: Validity) -> Self {
        Self {
            identity,
            issued: BTreeMap::new(),
            reports: ReportLog::default(),
            validity,
        }
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn issued(&self, id: &CredentialId) -> Option<&IssuedRecord> {
        self.issued.get(id)
    }

    pub fn issue<R: RngCore + CryptoRng>(
        &mut self,
        subject: &Identity,
        name: &str,
        rng: &mut R,
    ) -> Credential {
        self.mint(subject, name, 1, rng)
    }

    fn mint<R: RngCore + CryptoRng>(
        &mut self,
        subject: &Identity,
        name: &str,
        version: u32,
        rng: &mut R,
    ) -> Credential {
        let c = Credential::issue(
            self.identity.clone(),
            subject.clone(),
            name,
            self.validity,
            version,
            rng,
        );
        self.issued.insert(
            c.credential_id,
            IssuedRecord {
                subject: subject.clone(),
                name: name.to_string(),
                version,
                superseded_by: None,
            },
        );
        c
    }

    /// A replacement for `old` with fresh material and the next version.
    pub fn ma_issue_update<R: RngCore + CryptoRng>(
        &mut self,
        old: &CredentialId,
        subject: &Identity,
        rng: &mut R,
    ) -> Result<Credential, ActorError> {
        let record = self
            .issued
            .get(old)
            .ok_or(ActorError::UnknownCredential(*old))?
            .clone();
        if &record.subject != subject {
            return Err(ActorError::UnknownSubject(subject.to_string()));
        }
        let next = self.mint(subject, &record.name, record.version + 1, rng);
        if let Some(r) = self.issued.get_mut(old) {
            r.superseded_by = Some(next.credential_id);
        }
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seeded_rng;
    use crate::pki::Role;

    #[test]
    fn update_bumps_version_and_material() {
        let mut rng = seeded_rng(1);
        let mut ma = MaintenanceAuthority::new(Identity::new("ma", Role::Ma), Validity::new(0, 99).unwrap());
        let ta = Identity::new("ta", Role::Ta);
        let c1 = ma.issue(&ta, "wifi", &mut rng);
        let c2 = ma.ma_issue_update(&c1.credential_id, &ta, &mut rng).unwrap();
        assert_eq!(c2.version, 2);
        assert_eq!(c2.name, "wifi");
        assert_ne!(c2.credential_id, c1.credential_id);
        assert_ne!(*c2.material, *c1.material);
        assert_eq!(ma.issued(&c1.credential_id).unwrap().superseded_by, Some(c2.credential_id));
    }

    #[test]
    fn update_rejects_unknown_or_wrong_subject() {
        let mut rng = seeded_rng(2);
        let mut ma = MaintenanceAuthority::new(Identity::new("ma", Role::Ma), Validity::new(0, 99).unwrap());
        let ta = Identity::new("ta", Role::Ta);
        let c1 = ma.issue(&ta, "wifi", &mut rng);
        assert!(ma.ma_issue_update(&crate::crypto::hash(b"x"), &ta, &mut rng).is_err());
        assert!(ma
            .ma_issue_update(&c1.credential_id, &Identity::new("tb", Role::Ta), &mut rng)
            .is_err());
    }

    #[test]
    fn report_log_appends() {
        let mut log = ReportLog::default();
        let r = AttemptReport {
            ta: Identity::new("ta", Role::Ta),
            credential_id: crate::crypto::hash(b"c"),
            at: 3,
        };
        log.append([r.clone(), r]);
        assert_eq!(log.len(), 2);
    }
}
