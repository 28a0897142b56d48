use std::collections::BTreeSet;

use proptest::prelude::*;
use teecred::actors::{Credential, CredentialId, CredentialSet, RevocationAuthority, RevocationMode, TaState};
use teecred::attest::PlatformSnapshot;
use teecred::crypto::{self, seeded_rng, Digest, SigningKeyPair, StorageRootKey};
use teecred::pki::{CertificateAuthority, Identity, Role, Validity};
use teecred::procedures::{ProcedureKind, Step};
use teecred::scenario::Scenario;
use teecred::simnet::campaign::{random_rules, AttackFamily};
use teecred::simnet::adversary::AdversaryProgram;
use teecred::simnet::codec::Canonical;
use teecred::stcp::{self, Endpoint, RespondOutcome, Responder, StcpSession};

fn credential_set(seed: u64, n: usize) -> CredentialSet {
    let mut rng = seeded_rng(seed);
    let issuer = Identity::new("ma", Role::Ma);
    let subject = Identity::new("ta", Role::Ta);
    (0..n)
        .map(|k| {
            Credential::issue(
                issuer.clone(),
                subject.clone(),
                format!("c{k}"),
                Validity::new(0, 1000 + k as u64).unwrap(),
                1 + (k % 3) as u32,
                &mut rng,
            )
        })
        .collect()
}

fn ta(id: &str, seed: u64) -> TaState {
    TaState::new(
        Identity::new(id, Role::Ta),
        StorageRootKey::generate(&mut seeded_rng(seed)),
        PlatformSnapshot::enclave(b"img", b"signer"),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn credential_set_encoding_round_trips(seed in any::<u64>(), n in 0usize..12) {
        let set = credential_set(seed, n);
        let bytes = set.to_bytes();
        let back = CredentialSet::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes.clone());
        prop_assert_eq!(back, set);
        // No strict prefix decodes.
        for cut in 0..bytes.len() {
            prop_assert!(CredentialSet::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn sealing_round_trips_and_detects_tampering(seed in any::<u64>(), n in 1usize..8, flip in any::<prop::sample::Index>()) {
        let set = credential_set(seed, n);
        let mut owner = ta("owner", seed);
        let mut rng = seeded_rng(seed ^ 1);
        owner.seal_credentials(&set, &mut rng);
        prop_assert_eq!(owner.unseal_credentials().unwrap(), set.clone());

        let good = owner.sealed().unwrap().clone();
        let mut bad = good.clone();
        let i = flip.index(bad.ciphertext.len());
        bad.ciphertext[i] ^= 0x80;
        owner.set_sealed(Some(bad));
        prop_assert!(owner.unseal_credentials().is_err());

        let mut stale = good.clone();
        stale.version += 1;
        owner.set_sealed(Some(stale));
        prop_assert!(owner.unseal_credentials().is_err());

        // Another TA cannot open the blob.
        let mut thief = ta("owner", seed.wrapping_add(1));
        thief.set_sealed(Some(good));
        prop_assert!(thief.unseal_credentials().is_err());
    }

    #[test]
    fn backup_payload_round_trips_only_for_its_owner(seed in any::<u64>(), n in 0usize..8) {
        let set = credential_set(seed, n);
        let owner = ta("owner", seed);
        let payload = owner.export_backup(&set, &mut seeded_rng(seed ^ 2));
        prop_assert_eq!(owner.import_backup(&payload).unwrap().to_bytes(), set.to_bytes());
        prop_assert!(ta("owner", seed.wrapping_add(7)).import_backup(&payload).is_err());
        prop_assert!(ta("other", seed).import_backup(&payload).is_err());
    }

    #[test]
    fn ra_lookup_matches_list_scan(
        whitelist in any::<bool>(),
        ops in prop::collection::vec((any::<bool>(), prop::collection::btree_set(0u8..24, 0..6), prop::collection::btree_set(0u8..24, 0..3)), 0..16),
        query in prop::collection::btree_set(0u8..24, 0..24),
    ) {
        let id = |k: u8| Digest(crypto::hash(&[k]).0);
        let mode = if whitelist { RevocationMode::Whitelist } else { RevocationMode::Blacklist };
        let ma = Identity::new("ma", Role::Ma);
        let mut ra = RevocationAuthority::new(Identity::new("ra", Role::Ra), mode);
        let mut listed: Vec<u8> = Vec::new();
        for (register, ids, repl) in &ops {
            let as_ids = |s: &BTreeSet<u8>| s.iter().map(|k| id(*k)).collect::<BTreeSet<CredentialId>>();
            if *register {
                ra.ra_register(&as_ids(ids), &as_ids(repl), &ma, 0).unwrap();
                if whitelist {
                    listed.retain(|x| !ids.contains(x));
                    listed.extend(repl.iter().copied());
                } else {
                    listed.extend(ids.iter().copied());
                }
            } else {
                ra.permit(&as_ids(ids), &ma, 0).unwrap();
                if whitelist {
                    listed.extend(ids.iter().copied());
                }
            }
        }
        let expected: BTreeSet<CredentialId> = query
            .iter()
            .filter(|q| listed.contains(q) != whitelist)
            .map(|k| id(*k))
            .collect();
        let q: BTreeSet<CredentialId> = query.iter().map(|k| id(*k)).collect();
        prop_assert_eq!(ra.ra_lookup(&q, &Identity::new("tsm", Role::Tsm)).unwrap(), expected);
    }

    #[test]
    fn step_names_round_trip(n in 1u8..40, c in prop::char::range('A', 'Z')) {
        for s in [Step::N(n), Step::L(c)] {
            prop_assert_eq!(s.to_string().parse::<Step>().unwrap(), s);
            prop_assert_eq!(Step::from_bytes(&s.to_bytes()).unwrap(), s);
        }
    }

    #[test]
    fn hash_parts_respects_boundaries(a in prop::collection::vec(any::<u8>(), 0..16), b in prop::collection::vec(any::<u8>(), 1..16)) {
        let joined = [a.as_slice(), b.as_slice()].concat();
        prop_assert_ne!(
            crypto::hash_parts(&[&a, &b]),
            crypto::hash_parts(&[&joined, &[]])
        );
    }
}

fn endpoint(ca: &CertificateAuthority, id: &str, seed: u64, policy: &mut teecred::attest::TrustPolicy) -> Endpoint {
    let mut rng = seeded_rng(seed);
    let identity = Identity::new(id, Role::Ta);
    let att = SigningKeyPair::generate(&mut rng);
    let cmd = SigningKeyPair::generate(&mut rng);
    let certificate = ca
        .issue_certificate(identity.clone(), "dev", att.public(), cmd.public(), Validity::new(0, 100).unwrap())
        .unwrap();
    let measurements = teecred::attest::measure(&PlatformSnapshot::enclave(id.as_bytes(), b"s")).unwrap();
    policy.allow(identity.clone(), measurements.digest());
    Endpoint {
        identity,
        certificate,
        attestation_key: att,
        command_key: cmd,
        anchor: ca.anchor(),
        measurements,
    }
}

fn session_pair(seed: u64) -> (StcpSession, StcpSession) {
    let mut rng = seeded_rng(seed);
    let ca = CertificateAuthority::generate("root", &mut rng);
    let mut policy = teecred::attest::TrustPolicy::new();
    let a = endpoint(&ca, "a", seed ^ 1, &mut policy);
    let b = endpoint(&ca, "b", seed ^ 2, &mut policy);
    let mut resp = Responder::new(&mut rng);
    let (pi, m1) = stcp::initiate(&a, &b.identity, &mut rng);
    let Ok(RespondOutcome::Challenge(ch)) = stcp::respond(&b, &mut resp, &m1, "a", 1, &mut rng) else {
        panic!("challenge expected");
    };
    let m1 = pi.answer_cookie(&ch).unwrap();
    let Ok(RespondOutcome::Proceed(pr, m2)) = stcp::respond(&b, &mut resp, &m1, "a", 1, &mut rng) else {
        panic!("M2 expected");
    };
    let (sa, m3) = stcp::complete(pi, &a, &m2, &policy, 1).unwrap();
    (sa, stcp::finalize(pr, &m3, &policy).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn records_arrive_once_and_in_order(
        seed in any::<u64>(),
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 1..10),
        bit in any::<prop::sample::Index>(),
    ) {
        let (mut a, mut b) = session_pair(seed);
        let mut sent = Vec::new();
        for p in &payloads {
            let rec = a.send_record(p).unwrap();
            prop_assert_eq!(&b.recv_record(&rec).unwrap(), p);
            // The same record a second time is refused.
            prop_assert!(b.recv_record(&rec).is_err());
            sent.push(rec);
        }
        for old in &sent {
            prop_assert!(b.recv_record(old).is_err());
        }
        let mut rec = a.send_record(b"tail").unwrap();
        let i = bit.index(rec.ciphertext.len());
        rec.ciphertext[i] ^= 1;
        prop_assert!(b.recv_record(&rec).is_err());
        // Reply direction uses its own keys and counters.
        let back = b.send_record(b"reply").unwrap();
        prop_assert_eq!(a.recv_record(&back).unwrap(), b"reply".to_vec());
    }
}

const CAMPAIGN: &str = include_str!("../../../scenarios/all-procedures.toml");

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever the adversary does, counters balance and no secret,
    /// credential loss or duplicate shows up.
    #[test]
    fn random_adversaries_never_break_invariants(seed in any::<u64>(), family in 0usize..4) {
        let family = [AttackFamily::Replay, AttackFamily::Tamper, AttackFamily::Drop, AttackFamily::Mixed][family];
        let base = Scenario::parse(CAMPAIGN).unwrap();
        let rules = random_rules(family, 200, seed);
        let run = base
            .with_adversary(AdversaryProgram { rules, rng_seed: seed, compromise: vec![] })
            .run()
            .unwrap();
        prop_assert!(run.world.violations.is_empty(), "{:?}", run.world.violations);
        let c = run.world.net.counters();
        prop_assert_eq!(c.delivered + c.dropped + run.world.net.in_flight(), c.sent + c.injected);
    }
}

#[test]
fn procedure_kind_names_round_trip() {
    for k in ProcedureKind::ALL {
        assert_eq!(k.as_str().parse::<ProcedureKind>().unwrap(), k);
        assert_eq!(ProcedureKind::from_bytes(&k.to_bytes()).unwrap(), k);
    }
}
