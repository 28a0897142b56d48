use std::collections::BTreeSet;

use super::messages::TargetInfo;
use super::{abort, ProcedureKind, ProcedureOutcome, Run, Step, StepResult};
use crate::actors::{CredentialId, CredentialSet};
use crate::crypto;
use crate::pki::{Identity, Role};
use crate::simnet::codec::Canonical;

/// Moves every credential of `ta_a` to `ta_b`. The source copy is deleted only
/// after the TSM has seen success from `ta_b` and commands deletion.
pub fn run_migration(world: &mut crate::simnet::world::World, tsm: &str, ta_a: &str, ta_b: &str) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Migration);
    let result = migrate(&mut run, tsm, ta_a, ta_b);
    if result.is_err() {
        let both = held_by_both(&run, ta_a, ta_b);
        if both > 0 {
            run.warn(format!(
                "aborted before deletion: {both} credential(s) present on both TAs"
            ));
        }
    }
    run.finish(result)
}

fn held_by_both(run: &Run<'_>, a: &str, b: &str) -> usize {
    let ids = |id: &str| -> BTreeSet<CredentialId> {
        run.world
            .ta(id)
            .and_then(|t| t.credentials_or_empty().ok())
            .map(|s| s.ids())
            .unwrap_or_default()
    };
    ids(a).intersection(&ids(b)).count()
}

fn expect_role(run: &Run<'_>, step: Step, id: &str, role: Role) -> StepResult<Identity> {
    let ident = run.identity(step, id)?;
    if ident.role != role {
        return abort(step, format!("{ident} is not a {}", role.as_str()));
    }
    Ok(ident)
}

fn migrate(run: &mut Run<'_>, tsm: &str, ta_a: &str, ta_b: &str) -> StepResult<()> {
    expect_role(run, Step::N(1), tsm, Role::Tsm)?;
    let a_id = expect_role(run, Step::N(1), ta_a, Role::Ta)?;
    let b_id = expect_role(run, Step::N(1), ta_b, Role::Ta)?;

    let s1 = Step::N(1);
    let tsm_a = run.stcp(s1, tsm, ta_a, None)?;
    run.send(Step::N(2), tsm_a, tsm, "Initiate Migration", Vec::new())?;

    let c: CredentialSet = match run.world.ta(ta_a).expect("role checked").unseal_credentials() {
        Ok(c) => c,
        Err(e) => return abort(Step::N(3), format!("{ta_a} cannot unseal: {e}")),
    };
    let ids = c.ids();
    run.local(Step::N(3), ta_a, "Prepare C", crypto::hash(&ids.to_bytes()))?;
    run.send(Step::N(4), tsm_a, ta_a, "Ack.", Vec::new())?;

    let tsm_b = run.stcp(Step::N(5), tsm, ta_b, None)?;
    let b_cert_fp = run
        .world
        .channel(tsm_b)
        .expect("open")
        .initiator_end
        .peer_certificate()
        .fingerprint();
    let a_cert_fp = run
        .world
        .channel(tsm_a)
        .expect("open")
        .initiator_end
        .peer_certificate()
        .fingerprint();
    let source = TargetInfo {
        identity: a_id.clone(),
        address: TargetInfo::address_of(&a_id),
        fingerprint: a_cert_fp,
    };
    let body = run.send(
        Step::N(6),
        tsm_b,
        tsm,
        "Prepare Migration from TA_A",
        source.to_bytes(),
    )?;
    let expected_source: TargetInfo = run.decode(Step::N(6), &body)?;
    run.send(Step::N(7), tsm_b, ta_b, "Ack.", Vec::new())?;

    let target = TargetInfo {
        identity: b_id.clone(),
        address: TargetInfo::address_of(&b_id),
        fingerprint: b_cert_fp,
    };
    let body = run.send(Step::N(8), tsm_a, tsm, "ID of TA_B", target.to_bytes())?;
    let target: TargetInfo = run.decode(Step::N(8), &body)?;
    if target.identity != b_id {
        return abort(Step::N(8), format!("told to migrate to {}", target.identity));
    }

    let s9 = Step::N(9);
    let a_b = run.stcp(s9, ta_a, &target.identity.id, Some(target.fingerprint))?;
    let initiator = run.world.channel(a_b).expect("open").responder_end.peer_certificate().clone();
    if initiator.subject != expected_source.identity || initiator.fingerprint() != expected_source.fingerprint {
        return abort(s9, format!("{ta_b} expected {} but {} connected", expected_source.identity, initiator.subject));
    }

    let body = run.send(Step::N(10), a_b, ta_a, "Transfer C", c.to_bytes())?;
    let incoming: CredentialSet = run.decode(Step::N(10), &body)?;
    let incoming_ids = incoming.ids();
    {
        let (ta, rng) = run.world.ta_rng(ta_b).expect("role checked");
        if let Err(e) = ta.provision(incoming, rng) {
            return abort(Step::N(11), format!("{ta_b} cannot provision: {e}"));
        }
    }
    run.local(Step::N(11), ta_b, "Provision C", crypto::hash(&incoming_ids.to_bytes()))?;
    run.send(Step::N(12), a_b, ta_b, "Ack.", Vec::new())?;
    run.send(Step::N(13), tsm_b, ta_b, "Success", Vec::new())?;

    let body = run.send(Step::N(14), tsm_a, tsm, "Delete Credentials", ids.to_bytes())?;
    let to_delete: BTreeSet<CredentialId> = run.decode(Step::N(14), &body)?;
    {
        let (ta, rng) = run.world.ta_rng(ta_a).expect("role checked");
        if ta.malicious {
            ta.events.push("ignored delete command".into());
        } else if let Err(e) = ta.delete_credentials(&to_delete, rng) {
            return abort(Step::N(15), format!("{ta_a} cannot delete: {e}"));
        }
    }
    run.local(Step::N(15), ta_a, "Delete C", crypto::hash(&to_delete.to_bytes()))?;
    run.send(Step::N(16), tsm_a, ta_a, "Success", Vec::new())?;

    run.world.truth.migrated.push(ids);
    Ok(())
}
