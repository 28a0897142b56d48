use super::messages::TargetInfo;
use super::{abort, ProcedureKind, ProcedureOutcome, Run, Step, StepResult};
use crate::crypto;
use crate::pki::{Identity, Role};
use crate::simnet::codec::Canonical;
use crate::simnet::world::World;

/// Stores an encrypted copy of `ta`'s credentials at `ba`. The payload is
/// sealed under a key only the TA can derive; the TSM only coordinates.
pub fn run_backup(world: &mut World, tsm: &str, ta: &str, ba: &str) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Backup);
    let result = backup(&mut run, tsm, ta, ba);
    run.finish(result)
}

fn backup(run: &mut Run<'_>, tsm: &str, ta: &str, ba: &str) -> StepResult<()> {
    for (id, role, step) in [(tsm, Role::Tsm, 1), (ba, Role::Ba, 1), (ta, Role::Ta, 5)] {
        let ident = run.identity(Step::N(step), id)?;
        if ident.role != role {
            return abort(Step::N(step), format!("{ident} is not a {}", role.as_str()));
        }
    }

    let tsm_ba = run.stcp(Step::N(1), tsm, ba, None)?;
    let ta_id = run.identity(Step::N(2), ta)?;
    let body = run.send(Step::N(2), tsm_ba, tsm, "Backup Request", ta_id.to_bytes())?;
    let expected_owner: Identity = run.decode(Step::N(2), &body)?;
    let next = run.world.ba(ba).expect("role checked").next_version(&expected_owner);
    run.local(Step::N(3), ba, "Prepare", crypto::hash(&next.to_bytes()))?;
    run.send(Step::N(4), tsm_ba, ba, "Ack.", Vec::new())?;

    let tsm_ta = run.stcp(Step::N(5), tsm, ta, None)?;
    let ba_cert = run
        .world
        .channel(tsm_ba)
        .expect("open")
        .initiator_end
        .peer_certificate()
        .clone();
    let target = TargetInfo {
        address: TargetInfo::address_of(&ba_cert.subject),
        identity: ba_cert.subject.clone(),
        fingerprint: ba_cert.fingerprint(),
    };
    let body = run.send(Step::N(6), tsm_ta, tsm, "Prepare Backup to BA", target.to_bytes())?;
    let target: TargetInfo = run.decode(Step::N(6), &body)?;

    let c = match run.world.ta(ta).expect("role checked").credentials_or_empty() {
        Ok(c) => c,
        Err(e) => return abort(Step::N(7), format!("{ta} cannot unseal: {e}")),
    };
    if c.is_empty() {
        run.warn("backing up an empty credential set");
    }
    run.local(Step::N(7), ta, "Unseal C", crypto::hash(&c.ids().to_bytes()))?;
    run.send(Step::N(8), tsm_ta, ta, "Ack.", Vec::new())?;

    let s9 = Step::N(9);
    if target.identity.role != Role::Ba {
        return abort(s9, format!("backup target {} is not a BA", target.identity));
    }
    let ta_ba = run.stcp(s9, ta, &target.identity.id, Some(target.fingerprint))?;
    let owner = run.world.channel(ta_ba).expect("open").responder_end.peer().clone();
    if owner != expected_owner {
        return abort(s9, format!("{ba} expected {expected_owner} but {owner} connected"));
    }

    let payload = {
        let (t, rng) = run.world.ta_rng(ta).expect("role checked");
        t.export_backup(&c, rng)
    };
    let payload = run.send(Step::N(10), ta_ba, ta, "Transmit C", payload)?;
    let at = run.world.net.now();
    let version = match run
        .world
        .ba_mut(ba)
        .expect("role checked")
        .ba_store(&owner, &owner, payload.clone(), at)
    {
        Ok(v) => v,
        Err(e) => return abort(Step::N(11), e),
    };
    run.local(Step::N(11), ba, "Store C", crypto::hash(&payload))?;
    run.send(Step::N(12), ta_ba, ba, "Ack.", version.to_bytes())?;
    run.send(Step::N(13), tsm_ba, ba, "Success", Vec::new())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedures::{figures, Status};
    use crate::simnet::world::tests::basic_config;

    #[test]
    fn backup_stores_a_payload_only_the_ta_can_open() {
        let mut w = World::build(&basic_config(31)).unwrap();
        let c = w.ta("ta-a").unwrap().unseal_credentials().unwrap();
        let out = run_backup(&mut w, "tsm", "ta-a", "ba");
        assert_eq!(out.status, Status::Success, "{:?}", out.status);
        let golden: Vec<_> = figures::BACKUP.iter().map(|f| f.label.to_string()).collect();
        assert_eq!(out.labels(), golden);

        let owner = w.identity("ta-a").unwrap();
        let entry = w.ba("ba").unwrap().ba_fetch(&owner, &owner, None).unwrap();
        let restored = w.ta("ta-a").unwrap().import_backup(&entry.payload).unwrap();
        assert_eq!(restored.to_bytes(), c.to_bytes());
        assert!(w.ta("ta-b").unwrap().import_backup(&entry.payload).is_err());
        assert!(w.violations.is_empty(), "{:?}", w.violations);
    }

    #[test]
    fn empty_set_backs_up_with_a_warning() {
        let mut w = World::build(&basic_config(32)).unwrap();
        let out = run_backup(&mut w, "tsm", "ta-b", "ba");
        assert!(out.status.is_success());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn offline_ba_aborts_at_step_one() {
        let mut cfg = basic_config(33);
        cfg.actors[6].offline = true;
        let mut w = World::build(&cfg).unwrap();
        let out = run_backup(&mut w, "tsm", "ta-a", "ba");
        assert!(matches!(out.status, Status::Aborted { step: Step::N(1), .. }));
    }
}
