use std::collections::BTreeSet;

use super::messages::TargetInfo;
use super::{abort, resolve_credential, ProcedureKind, ProcedureOutcome, Run, Step, StepResult};
use crate::actors::{Credential, CredentialId, CredentialSet};
use crate::crypto;
use crate::pki::{Identity, Role};
use crate::simnet::codec::Canonical;
use crate::simnet::world::{ChannelId, World};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Source<'a> {
    Ma { ra: &'a str },
    Ba(&'a str),
}

/// Replaces credential `credential` on `ta` with a fresh version from `ma`,
/// then has the MA revoke the old one at `ra`.
pub fn run_update(world: &mut World, ma: &str, tsm: &str, ta: &str, ra: &str, credential: &str) -> ProcedureOutcome {
    let old = resolve_credential(world, credential, Some(ta));
    let mut run = Run::new(world, ProcedureKind::Update);
    let result = match old.len() {
        1 => update(&mut run, ma, tsm, ta, Source::Ma { ra }, old.first().copied()),
        0 => abort(Step::N(1), format!("{ta} has no credential named {credential}")),
        n => abort(Step::N(1), format!("{n} credentials named {credential} on {ta}")),
    };
    conclude(run, ta, result)
}

/// Re-provisions `ta` from its latest backup at `ba`, driven by `ma`.
pub fn run_restore(world: &mut World, ma: &str, tsm: &str, ta: &str, ba: &str) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Restore);
    let result = update(&mut run, ma, tsm, ta, Source::Ba(ba), None);
    conclude(run, ta, result)
}

fn conclude(mut run: Run<'_>, ta: &str, result: StepResult<()>) -> ProcedureOutcome {
    if result.is_err() && run.world.ta(ta).is_some_and(|t| t.is_locked()) {
        run.world.needs_operator_retry.insert(ta.to_string());
        run.warn(format!("{ta} left locked; operator retry needed"));
    }
    run.finish(result)
}

/// Body of the TSM's Update Ready: where to fetch the update and which
/// credential it replaces.
type UpdateReady = (TargetInfo, Option<CredentialId>);

fn update(
    run: &mut Run<'_>,
    ma: &str,
    tsm: &str,
    ta: &str,
    source: Source<'_>,
    old: Option<CredentialId>,
) -> StepResult<()> {
    let mut roles = vec![(ma, Role::Ma, 1), (tsm, Role::Tsm, 1), (ta, Role::Ta, 4)];
    match source {
        Source::Ma { ra } => roles.push((ra, Role::Ra, 13)),
        Source::Ba(ba) => roles.push((ba, Role::Ba, 8)),
    }
    for (id, role, step) in roles {
        let ident = run.identity(Step::N(step), id)?;
        if ident.role != role {
            return abort(Step::N(step), format!("{ident} is not a {}", role.as_str()));
        }
    }
    let (source_id, source_label) = match source {
        Source::Ma { .. } => (ma, "MA"),
        Source::Ba(ba) => (ba, "BA"),
    };
    let source_ident = run.identity(Step::N(1), source_id)?;
    let source_fp = run
        .world
        .actor(source_id)
        .expect("resolved")
        .endpoint
        .certificate
        .fingerprint();
    let ta_ident = run.identity(Step::N(1), ta)?;

    let ma_tsm = run.stcp(Step::N(1), ma, tsm, None)?;
    let body = run.send(Step::N(2), ma_tsm, ma, "Update Ready", (ta_ident.clone(), old).to_bytes())?;
    let (for_ta, old): (Identity, Option<CredentialId>) = run.decode(Step::N(2), &body)?;
    if for_ta != ta_ident {
        return abort(Step::N(2), format!("update announced for {for_ta}"));
    }
    run.send(Step::N(3), ma_tsm, tsm, "Ack.", Vec::new())?;

    let tsm_ta = run.stcp(Step::N(4), tsm, ta, None)?;
    let fetch_from: UpdateReady = (
        TargetInfo {
            address: TargetInfo::address_of(&source_ident),
            identity: source_ident.clone(),
            fingerprint: source_fp,
        },
        old,
    );
    let body = run.send(Step::N(5), tsm_ta, tsm, "Update Ready", fetch_from.to_bytes())?;
    let (fetch_from, old): UpdateReady = run.decode(Step::N(5), &body)?;

    run.world.ta_mut(ta).expect("role checked").lock();
    run.local(Step::N(6), ta, "Prepare and Lock TA", crypto::hash(&old.to_bytes()))?;
    run.send(Step::N(7), tsm_ta, ta, "Ack.", Vec::new())?;

    let s8 = Step::N(8);
    if fetch_from.identity.role.as_str() != source_label {
        return abort(s8, format!("unexpected update source {}", fetch_from.identity));
    }
    let ta_src = run.stcp(s8, ta, &fetch_from.identity.id, Some(fetch_from.fingerprint))?;
    let requester = run.world.channel(ta_src).expect("open").responder_end.peer().clone();
    if requester != ta_ident {
        return abort(s8, format!("{source_id} expected {ta_ident} but {requester} connected"));
    }

    let body = run.send(Step::N(9), ta_src, ta, "Fetch Credential Update", old.to_bytes())?;
    let wanted: Option<CredentialId> = run.decode(Step::N(9), &body)?;
    let incoming = match source {
        Source::Ma { .. } => fetch_from_ma(run, ma, &requester, wanted, ta_src)?,
        Source::Ba(ba) => fetch_from_ba(run, ba, &requester, ta_src)?,
    };

    let new_ids = incoming.ids();
    {
        let (t, rng) = run.world.ta_rng(ta).expect("role checked");
        let mut set = match t.credentials_or_empty() {
            Ok(s) => s,
            Err(e) => return abort(Step::N(11), format!("{ta} cannot unseal: {e}")),
        };
        // The old credential goes before the TA unlocks.
        if let Some(old) = old {
            set.remove(&old);
        }
        set.extend(incoming);
        t.seal_credentials(&set, rng);
        t.unlock();
    }
    run.local(Step::N(11), ta, "Seal c'_i and Unlock", crypto::hash(&new_ids.to_bytes()))?;
    run.send(Step::N(12), ta_src, ta, "Ack.", Vec::new())?;

    match source {
        Source::Ma { ra } => {
            let ma_ra = run.stcp(Step::N(13), ma, ra, None)?;
            let revoke = (old.into_iter().collect::<BTreeSet<_>>(), new_ids);
            let body = run.send(Step::N(14), ma_ra, ma, "Revoke c_i", revoke.to_bytes())?;
            let (old_ids, replacements): (BTreeSet<CredentialId>, BTreeSet<CredentialId>) =
                run.decode(Step::N(14), &body)?;
            let by = run.world.channel(ma_ra).expect("open").responder_end.peer().clone();
            let at = run.world.net.now();
            if let Err(e) = run
                .world
                .ra_mut(ra)
                .expect("role checked")
                .ra_register(&old_ids, &replacements, &by, at)
            {
                return abort(Step::N(15), e);
            }
            run.send(Step::N(15), ma_ra, ra, "Ack.", Vec::new())?;
            run.send(Step::N(16), ma_tsm, ma, "Success", Vec::new())?;
        }
        Source::Ba(_) => {
            run.send(Step::N(16), tsm_ta, ta, "Success", Vec::new())?;
        }
    }
    Ok(())
}

fn fetch_from_ma(
    run: &mut Run<'_>,
    ma: &str,
    requester: &Identity,
    wanted: Option<CredentialId>,
    chan: ChannelId,
) -> StepResult<CredentialSet> {
    let s10 = Step::N(10);
    let Some(old) = wanted else {
        return abort(s10, "no credential named for update");
    };
    let fresh = {
        let (m, rng) = run.world.ma_rng(ma).expect("role checked");
        match m.ma_issue_update(&old, requester, rng) {
            Ok(c) => c,
            Err(e) => return abort(s10, e),
        }
    };
    run.world.register_credential(&fresh);
    let body = run.send(s10, chan, ma, "Transmit New Credential c'_i", fresh.to_bytes())?;
    let c: Credential = run.decode(s10, &body)?;
    if c.subject != *requester {
        return abort(s10, format!("credential issued for {}", c.subject));
    }
    Ok(std::iter::once(c).collect())
}

fn fetch_from_ba(run: &mut Run<'_>, ba: &str, requester: &Identity, chan: ChannelId) -> StepResult<CredentialSet> {
    let s10 = Step::N(10);
    let payload = match run.world.ba(ba).expect("role checked").ba_fetch(requester, requester, None) {
        Ok(entry) => entry.payload.clone(),
        Err(e) => return abort(s10, e),
    };
    let body = run.send(s10, chan, ba, "Transmit New Credential c'_i", payload)?;
    match run.world.ta(&requester.id).expect("TA").import_backup(&body) {
        Ok(set) => Ok(set),
        Err(e) => abort(s10, format!("backup unreadable: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedures::{figures, run_backup, run_wipe, Status};
    use crate::simnet::world::tests::basic_config;

    fn labels(f: &[figures::FigureStep]) -> Vec<String> {
        f.iter().map(|s| s.label.to_string()).collect()
    }

    #[test]
    fn update_rotates_and_revokes() {
        let mut w = World::build(&basic_config(41)).unwrap();
        let old = *resolve_credential(&w, "c1", Some("ta-a")).first().unwrap();
        let out = run_update(&mut w, "ma", "tsm", "ta-a", "ra", "c1");
        assert_eq!(out.status, Status::Success, "{:?}", out.status);
        assert_eq!(out.labels(), labels(&figures::UPDATE));

        let set = w.ta("ta-a").unwrap().unseal_credentials().unwrap();
        let c1: Vec<_> = set.iter().filter(|c| c.name == "c1").collect();
        assert_eq!(c1.len(), 1);
        assert_eq!(c1[0].version, 2);
        assert!(!set.contains(&old));
        assert!(w.ra("ra").unwrap().list().contains(&old));
        assert!(!w.ta("ta-a").unwrap().is_locked());
        assert!(w.violations.is_empty(), "{:?}", w.violations);
    }

    #[test]
    fn ta_is_locked_between_steps_six_and_eleven() {
        use std::sync::{Arc, Mutex};
        let mut w = World::build(&basic_config(42)).unwrap();
        let id = *resolve_credential(&w, "c2", Some("ta-a")).first().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        w.set_step_hook(Box::new(move |w, rec| {
            let r = w.ta("ta-a").unwrap().use_credential(&id);
            log.lock().unwrap().push((rec.step, r.is_err()));
        }));
        assert!(run_update(&mut w, "ma", "tsm", "ta-a", "ra", "c1").status.is_success());
        for (step, refused) in seen.lock().unwrap().iter() {
            let inside = matches!(step, Step::N(n) if (6..11).contains(n));
            assert_eq!(*refused, inside, "step {step}");
        }
    }

    #[test]
    fn restore_after_wipe_is_byte_exact() {
        let mut w = World::build(&basic_config(43)).unwrap();
        let before = w.ta("ta-a").unwrap().unseal_credentials().unwrap().to_bytes();
        assert!(run_backup(&mut w, "tsm", "ta-a", "ba").status.is_success());
        run_wipe(&mut w, "ta-a");
        let out = run_restore(&mut w, "ma", "tsm", "ta-a", "ba");
        assert_eq!(out.status, Status::Success, "{:?}", out.status);
        assert_eq!(out.labels(), labels(&figures::RESTORE));
        assert_eq!(w.ta("ta-a").unwrap().unseal_credentials().unwrap().to_bytes(), before);
        assert!(w.violations.is_empty(), "{:?}", w.violations);
    }

    #[test]
    fn abort_after_lock_leaves_ta_locked() {
        let mut cfg = basic_config(44);
        cfg.actors[5].offline = true;
        let mut w = World::build(&cfg).unwrap();
        // MA offline: step 1 fails before any lock.
        let out = run_update(&mut w, "ma", "tsm", "ta-a", "ra", "c1");
        assert!(matches!(out.status, Status::Aborted { step: Step::N(1), .. }));
        assert!(!w.ta("ta-a").unwrap().is_locked());

        let mut cfg = basic_config(44);
        cfg.adversary.rules = vec![crate::simnet::adversary::Rule {
            when: crate::simnet::adversary::RuleMatch {
                label_contains: Some("Fetch Credential Update".into()),
                ..Default::default()
            },
            action: crate::simnet::adversary::Action::Drop,
        }];
        let mut w = World::build(&cfg).unwrap();
        let out = run_update(&mut w, "ma", "tsm", "ta-a", "ra", "c1");
        assert!(matches!(out.status, Status::Aborted { step: Step::N(9), .. }), "{:?}", out.status);
        assert!(w.ta("ta-a").unwrap().is_locked());
        assert!(w.needs_operator_retry.contains("ta-a"));
    }
}
