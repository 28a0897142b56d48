//! Global property checkers. They read world state with an omniscient view
//! (every TA's SRK, every backup) that no protocol participant has.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::network::NetCounters;
use super::world::World;
use crate::actors::CredentialId;

/// Byte strings that must never appear in clear on the wire.
#[derive(Debug, Default, Clone)]
pub struct SecretRegistry {
    needles: Vec<(String, Vec<u8>)>,
    by_prefix: HashMap<[u8; PREFIX], Vec<usize>>,
}

const PREFIX: usize = 8;

impl SecretRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `bytes` under a descriptive label. Secrets shorter than the
    /// index prefix are ignored; every key and credential is 32 bytes.
    pub fn add(&mut self, label: impl Into<String>, bytes: &[u8]) {
        if bytes.len() < PREFIX {
            return;
        }
        let prefix: [u8; PREFIX] = bytes[..PREFIX].try_into().expect("length checked");
        let idx = self.needles.len();
        self.needles.push((label.into(), bytes.to_vec()));
        self.by_prefix.entry(prefix).or_default().push(idx);
    }

    pub fn len(&self) -> usize {
        self.needles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.needles.is_empty()
    }

    /// Label of the first registered secret found inside `haystack`.
    pub fn scan(&self, haystack: &[u8]) -> Option<&str> {
        if haystack.len() < PREFIX {
            return None;
        }
        for (start, window) in haystack.windows(PREFIX).enumerate() {
            let Some(candidates) = self.by_prefix.get(window) else {
                continue;
            };
            for &i in candidates {
                let (label, needle) = &self.needles[i];
                if haystack[start..].starts_with(needle) {
                    return Some(label);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    SecretOnWire {
        seq: u64,
        secret: String,
    },
    UntrustedPeerEstablished {
        initiator: String,
        responder: String,
        untrusted: String,
    },
    CredentialOnUntrustedPlatform {
        ta: String,
        credentials: usize,
    },
    ExposureToTsm {
        label: String,
        from: String,
        to: String,
    },
    CredentialLost {
        lineage: String,
    },
    DuplicateUsableAfterMigration {
        credential: String,
        holders: Vec<String>,
    },
    KeyMismatch {
        initiator: String,
        responder: String,
    },
    CounterImbalance {
        counters: NetCountersView,
        in_flight: u64,
    },
    StepOrder {
        procedure: String,
        run: u64,
        expected: Vec<String>,
        actual: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NetCountersView {
    pub sent: u64,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl From<NetCounters> for NetCountersView {
    fn from(c: NetCounters) -> Self {
        Self {
            sent: c.sent,
            injected: c.injected,
            delivered: c.delivered,
            dropped: c.dropped,
        }
    }
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::SecretOnWire { .. } => "secret-on-wire",
            Violation::UntrustedPeerEstablished { .. } => "untrusted-peer-established",
            Violation::CredentialOnUntrustedPlatform { .. } => "credential-on-untrusted-platform",
            Violation::ExposureToTsm { .. } => "exposure-to-tsm",
            Violation::CredentialLost { .. } => "credential-lost",
            Violation::DuplicateUsableAfterMigration { .. } => "duplicate-usable-after-migration",
            Violation::KeyMismatch { .. } => "key-mismatch",
            Violation::CounterImbalance { .. } => "counter-imbalance",
            Violation::StepOrder { .. } => "step-order",
        }
    }
}

/// Every credential id currently held, with its holders. Backups count as
/// holders under the name `BA:<id>`.
pub fn holdings(world: &World) -> BTreeMap<CredentialId, Vec<String>> {
    let mut out: BTreeMap<CredentialId, Vec<String>> = BTreeMap::new();
    for ta in world.tas() {
        // Unreadable storage holds nothing usable.
        if let Ok(set) = ta.credentials_or_empty() {
            for id in set.ids() {
                out.entry(id).or_default().push(ta.identity().to_string());
            }
        }
    }
    for (ba, store) in world.backup_stores() {
        for entry in store.iter() {
            let Some(owner) = world.ta(&entry.owner.id) else {
                continue;
            };
            if let Ok(set) = owner.import_backup(&entry.payload) {
                for id in set.ids() {
                    out.entry(id).or_default().push(format!("BA:{ba}"));
                }
            }
        }
    }
    out
}

/// A lineage is lost when none of its versions is held anywhere and at
/// least one version was never revoked.
pub fn check_no_loss(world: &World) -> Vec<Violation> {
    let held = holdings(world);
    world
        .truth
        .lineages
        .iter()
        .filter(|(_, ids)| {
            !ids.iter().any(|id| held.contains_key(id))
                && ids.iter().any(|id| !world.is_revoked_anywhere(id))
        })
        .map(|(lineage, _)| Violation::CredentialLost {
            lineage: lineage.to_string(),
        })
        .collect()
}

/// After a successful migration each migrated credential is usable on at most
/// one TA.
pub fn check_single_holder(world: &World) -> Vec<Violation> {
    let mut tas: BTreeMap<CredentialId, BTreeSet<String>> = BTreeMap::new();
    for ta in world.tas() {
        if let Ok(set) = ta.credentials_or_empty() {
            for id in set.ids() {
                tas.entry(id).or_default().insert(ta.identity().to_string());
            }
        }
    }
    let mut out = Vec::new();
    for id in world.truth.migrated.iter().flatten().collect::<BTreeSet<_>>() {
        if let Some(holders) = tas.get(id).filter(|h| h.len() > 1) {
            out.push(Violation::DuplicateUsableAfterMigration {
                credential: id.to_hex(),
                holders: holders.iter().cloned().collect(),
            });
        }
    }
    out
}

pub fn check_counters(world: &World) -> Vec<Violation> {
    if world.net.balanced() {
        Vec::new()
    } else {
        vec![Violation::CounterImbalance {
            counters: world.net.counters().into(),
            in_flight: world.net.in_flight(),
        }]
    }
}

/// No TA whose real platform state is untrusted may hold credentials.
pub fn check_untrusted_holders(world: &World) -> Vec<Violation> {
    world
        .tas()
        .filter(|ta| !world.platform_trusted(&ta.identity().id))
        .filter_map(|ta| {
            let n = ta.credentials_or_empty().map(|s| s.len()).unwrap_or(0);
            (n > 0).then(|| Violation::CredentialOnUntrustedPlatform {
                ta: ta.identity().to_string(),
                credentials: n,
            })
        })
        .collect()
}

/// State-based checks run between procedures.
pub fn check_state(world: &World) -> Vec<Violation> {
    let mut v = check_no_loss(world);
    v.extend(check_untrusted_holders(world));
    v.extend(check_single_holder(world));
    v.extend(check_counters(world));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_finds_embedded_secret() {
        let mut reg = SecretRegistry::new();
        let secret = [7u8; 32];
        reg.add("k", &secret);
        let mut body = vec![0u8; 50];
        body.extend_from_slice(&secret);
        body.extend_from_slice(&[1, 2, 3]);
        assert_eq!(reg.scan(&body), Some("k"));
    }

    #[test]
    fn scan_needs_the_whole_secret() {
        let mut reg = SecretRegistry::new();
        let secret: Vec<u8> = (0..32).collect();
        reg.add("k", &secret);
        assert_eq!(reg.scan(&secret[..31]), None);
        assert_eq!(reg.scan(&[]), None);
        let mut partial = secret.clone();
        partial[20] ^= 1;
        assert_eq!(reg.scan(&partial), None);
    }

    #[test]
    fn short_secrets_are_ignored() {
        let mut reg = SecretRegistry::new();
        reg.add("short", &[1, 2, 3]);
        assert!(reg.is_empty());
    }
}
