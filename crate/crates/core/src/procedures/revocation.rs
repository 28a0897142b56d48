use std::collections::BTreeSet;

use super::{abort, deferred, resolve_credential, ProcedureKind, ProcedureOutcome, Run, Step, StepResult};
use crate::actors::{AttemptReport, CredentialId};
use crate::crypto;
use crate::pki::Role;
use crate::simnet::codec::Canonical;
use crate::simnet::world::{ChannelId, World};

/// Fresh channel attempts before reporting is deferred.
const REPORT_ATTEMPTS: usize = 3;

fn check_role(run: &Run<'_>, step: Step, id: &str, role: Role) -> StepResult<()> {
    let ident = run.identity(step, id)?;
    if ident.role != role {
        return abort(step, format!("{ident} is not a {}", role.as_str()));
    }
    Ok(())
}

/// Strips every credential the RA lists as revoked from `ta`.
pub fn run_revocation(world: &mut World, tsm: &str, ta: &str, ra: &str) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Revocation);
    let result = revoke(&mut run, tsm, ta, ra);
    run.finish(result)
}

fn revoke(run: &mut Run<'_>, tsm: &str, ta: &str, ra: &str) -> StepResult<()> {
    check_role(run, Step::N(1), tsm, Role::Tsm)?;
    check_role(run, Step::N(1), ta, Role::Ta)?;
    check_role(run, Step::N(5), ra, Role::Ra)?;

    let tsm_ta = run.stcp(Step::N(1), tsm, ta, None)?;
    run.send(Step::N(2), tsm_ta, tsm, "Reveal C", Vec::new())?;
    let c = match run.world.ta(ta).expect("role checked").credentials_or_empty() {
        Ok(c) => c,
        Err(e) => return abort(Step::N(3), format!("{ta} cannot unseal: {e}")),
    };
    let ids = c.ids();
    run.local(Step::N(3), ta, "Unseal C", crypto::hash(&ids.to_bytes()))?;
    // Identifiers only: the TSM never needs the material.
    let body = run.send(Step::N(4), tsm_ta, ta, "Show C", ids.to_bytes())?;
    let shown: BTreeSet<CredentialId> = run.decode(Step::N(4), &body)?;

    let tsm_ra = run.stcp(Step::N(5), tsm, ra, None)?;
    let body = run.send(Step::N(6), tsm_ra, tsm, "Lookup C", shown.to_bytes())?;
    let query: BTreeSet<CredentialId> = run.decode(Step::N(6), &body)?;
    let caller = run
        .world
        .channel(tsm_ra)
        .expect("open")
        .responder_end
        .peer()
        .clone();
    let rc = match run.world.ra(ra).expect("role checked").ra_lookup(&query, &caller) {
        Ok(rc) => rc,
        Err(e) => return abort(Step::N(7), e),
    };
    let body = run.send(Step::N(7), tsm_ra, ra, "Revoked RC", rc.to_bytes())?;
    let rc: BTreeSet<CredentialId> = run.decode(Step::N(7), &body)?;
    run.send(Step::N(8), tsm_ra, tsm, "Ack.", Vec::new())?;

    let body = run.send(Step::N(9), tsm_ta, tsm, "Revoke RC", rc.to_bytes())?;
    let rc: BTreeSet<CredentialId> = run.decode(Step::N(9), &body)?;
    let stray = rc.difference(&ids).count();
    if stray > 0 {
        run.warn(format!("{stray} revoked id(s) not held by {ta}"));
    }
    if rc.is_empty() {
        run.warn("nothing to revoke");
    } else {
        let (t, rng) = run.world.ta_rng(ta).expect("role checked");
        if t.malicious {
            t.events.push("ignored revoke command".into());
        } else if let Err(e) = t.delete_credentials(&rc, rng) {
            return abort(Step::N(10), format!("{ta} cannot update: {e}"));
        }
    }
    run.local(Step::N(10), ta, "Update RC ∈ C", crypto::hash(&rc.to_bytes()))?;
    run.send(Step::N(11), tsm_ta, ta, "Success", Vec::new())?;
    Ok(())
}

/// Steps A to C. The MA-RA channel stays open for attempt reports.
pub fn run_registration(world: &mut World, ma: &str, ra: &str, ids: &BTreeSet<CredentialId>) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Registration);
    let result = register(&mut run, ma, ra, ids);
    run.finish(result)
}

fn register(run: &mut Run<'_>, ma: &str, ra: &str, ids: &BTreeSet<CredentialId>) -> StepResult<()> {
    check_role(run, Step::L('A'), ma, Role::Ma)?;
    check_role(run, Step::L('A'), ra, Role::Ra)?;
    if ids.is_empty() {
        run.warn("no credentials to register");
    }
    if let Some(old) = run.world.standing.remove(&(ma.to_string(), ra.to_string())) {
        run.world.close_channel(old);
    }
    let chan = run.stcp(Step::L('A'), ma, ra, None)?;
    let body = run.send(
        Step::L('B'),
        chan,
        ma,
        "Add Revoked Creds.",
        (ids.clone(), BTreeSet::<CredentialId>::new()).to_bytes(),
    )?;
    let (ids, replacements): (BTreeSet<CredentialId>, BTreeSet<CredentialId>) = run.decode(Step::L('B'), &body)?;
    let by = run.world.channel(chan).expect("open").responder_end.peer().clone();
    let at = run.world.net.now();
    let r = run.world.ra_mut(ra).expect("role checked");
    if let Err(e) = r.ra_register(&ids, &replacements, &by, at) {
        return abort(Step::L('C'), e);
    }
    run.send(Step::L('C'), chan, ra, "Success", Vec::new())?;
    run.world.standing.insert((ma.to_string(), ra.to_string()), chan);
    Ok(())
}

/// Steps D and E: the RA hands its pending attempt reports to the MA. Uses
/// the standing registration channel when there is one.
pub fn run_reporting(world: &mut World, ra: &str, ma: &str) -> ProcedureOutcome {
    let mut run = Run::new(world, ProcedureKind::Reporting);
    let result = report(&mut run, ra, ma);
    run.finish(result)
}

fn report_channel(run: &mut Run<'_>, ra: &str, ma: &str) -> StepResult<ChannelId> {
    if let Some(&chan) = run.world.standing.get(&(ma.to_string(), ra.to_string())) {
        run.reuse(chan);
        return Ok(chan);
    }
    let mut last = None;
    for _ in 0..REPORT_ATTEMPTS {
        match run.stcp(Step::L('A'), ma, ra, None) {
            Ok(chan) => {
                run.world.standing.insert((ma.to_string(), ra.to_string()), chan);
                return Ok(chan);
            }
            Err(e) => last = Some(e.reason),
        }
    }
    deferred(
        Step::L('D'),
        format!(
            "no channel to {ma} after {REPORT_ATTEMPTS} attempts ({})",
            last.unwrap_or_default()
        ),
    )
}

fn report(run: &mut Run<'_>, ra: &str, ma: &str) -> StepResult<()> {
    check_role(run, Step::L('D'), ra, Role::Ra)?;
    check_role(run, Step::L('D'), ma, Role::Ma)?;
    let pending = run.world.ra(ra).expect("role checked").pending_reports.clone();
    if pending.is_empty() {
        run.warn("no pending reports");
        return Ok(());
    }
    let chan = report_channel(run, ra, ma)?;
    let body = run.send(Step::L('D'), chan, ra, "Report Attempts", pending.to_bytes())?;
    let reports: Vec<AttemptReport> = run.decode(Step::L('D'), &body)?;
    let m = run.world.ma_mut(ma).expect("role checked");
    let fresh: Vec<AttemptReport> = reports
        .into_iter()
        .filter(|r| !m.reports.entries().contains(r))
        .collect();
    m.reports.append(fresh);
    run.send(Step::L('E'), chan, ma, "Ack.", Vec::new())?;
    let r = run.world.ra_mut(ra).expect("role checked");
    r.pending_reports.retain(|p| !pending.contains(p));
    Ok(())
}

/// A REE-side request to use `credential` on `ta`, checked against the RA by
/// the relying party. Use of a revoked credential is reported to the MA.
pub fn run_use_credential(
    world: &mut World,
    ta: &str,
    ra: Option<&str>,
    ma: Option<&str>,
    credential: &str,
) -> Vec<ProcedureOutcome> {
    let ids = resolve_credential(world, credential, Some(ta));
    let mut run = Run::new(world, ProcedureKind::UseCredential);
    let mut reported = false;
    let result = (|| {
        if ids.is_empty() {
            return abort(Step::N(1), format!("no credential named {credential} for {ta}"));
        }
        let Some(t) = run.world.ta(ta) else {
            return abort(Step::N(1), format!("{ta} is not a TA"));
        };
        let who = t.identity().clone();
        for id in &ids {
            let short = &id.to_hex()[..12];
            if let Err(rej) = run.world.ta(ta).expect("checked").use_credential(id) {
                run.world.event(ta, format!("refused use of {short}: {rej}"));
                run.warn(format!("refused: {rej}"));
                continue;
            }
            run.world.event(ta, format!("used {short}"));
            let Some(ra) = ra else { continue };
            let at = run.world.net.now();
            let Some(r) = run.world.ra_mut(ra) else {
                return abort(Step::N(1), format!("{ra} is not an RA"));
            };
            if r.ra_report_attempt(&who, id, at).is_some() {
                run.world.event(ra, format!("revoked credential {short} presented by {who}"));
                run.warn("revoked credential used; attempt reported");
                reported = true;
            }
        }
        Ok(())
    })();
    let mut out = vec![run.finish(result)];
    if let (true, Some(ra), Some(ma)) = (reported, ra, ma) {
        out.push(run_reporting(world, ra, ma));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedures::{figures, Status};
    use crate::simnet::world::tests::basic_config;

    fn labels(f: &[figures::FigureStep]) -> Vec<String> {
        f.iter().map(|s| s.label.to_string()).collect()
    }

    #[test]
    fn revocation_removes_listed_credentials() {
        let mut w = World::build(&basic_config(21)).unwrap();
        let c2 = resolve_credential(&w, "c2", None);
        let reg = run_registration(&mut w, "ma", "ra", &c2);
        assert!(reg.status.is_success());
        assert_eq!(reg.labels(), labels(&figures::REGISTRATION));

        let out = run_revocation(&mut w, "tsm", "ta-a", "ra");
        assert_eq!(out.status, Status::Success, "{:?}", out.status);
        assert_eq!(out.labels(), labels(&figures::REVOCATION));
        let left = w.ta("ta-a").unwrap().unseal_credentials().unwrap();
        assert_eq!(left.len(), 1);
        assert!(!left.contains(c2.iter().next().unwrap()));
        assert!(w.violations.is_empty(), "{:?}", w.violations);
    }

    #[test]
    fn empty_intersection_changes_nothing() {
        let mut w = World::build(&basic_config(22)).unwrap();
        let version = w.ta("ta-a").unwrap().sealed().unwrap().version;
        let out = run_revocation(&mut w, "tsm", "ta-a", "ra");
        assert!(out.status.is_success());
        assert_eq!(w.ta("ta-a").unwrap().sealed().unwrap().version, version);
        assert!(out.warnings.iter().any(|w| w == "nothing to revoke"));
    }

    #[test]
    fn malicious_reuse_is_reported_over_the_standing_channel() {
        let mut cfg = basic_config(23);
        cfg.actors[2].malicious = true;
        let mut w = World::build(&cfg).unwrap();
        let c2 = resolve_credential(&w, "c2", None);
        run_registration(&mut w, "ma", "ra", &c2);
        assert!(run_revocation(&mut w, "tsm", "ta-a", "ra").status.is_success());
        let outs = run_use_credential(&mut w, "ta-a", Some("ra"), Some("ma"), "c2");
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[1].status, Status::Success, "{:?}", outs[1].status);
        assert_eq!(outs[1].labels(), labels(&figures::REPORTING));
        assert_eq!(w.ma("ma").unwrap().reports.len(), 1);
        assert!(w.ra("ra").unwrap().pending_reports.is_empty());
    }

    #[test]
    fn unreachable_ma_defers_reporting() {
        let mut cfg = basic_config(24);
        cfg.actors[2].malicious = true;
        let mut w = World::build(&cfg).unwrap();
        let c2 = resolve_credential(&w, "c2", None);
        run_registration(&mut w, "ma", "ra", &c2);
        run_revocation(&mut w, "tsm", "ta-a", "ra");
        w.close_channel(*w.standing.values().next().unwrap());
        w.net.set_offline("ma", true);
        let outs = run_use_credential(&mut w, "ta-a", Some("ra"), Some("ma"), "c2");
        assert!(matches!(outs[1].status, Status::Deferred { .. }));
        assert_eq!(w.ra("ra").unwrap().pending_reports.len(), 1);
    }
}
