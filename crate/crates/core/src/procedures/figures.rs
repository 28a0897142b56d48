//! Golden step tables. Parties are symbolic; `from == to` marks a step that
//! happens inside one actor.

use super::{ProcedureKind, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FigureStep {
    pub step: Step,
    pub from: &'static str,
    pub to: &'static str,
    pub label: &'static str,
}

const fn s(n: u8, from: &'static str, to: &'static str, label: &'static str) -> FigureStep {
    FigureStep {
        step: Step::N(n),
        from,
        to,
        label,
    }
}

const fn l(c: char, from: &'static str, to: &'static str, label: &'static str) -> FigureStep {
    FigureStep {
        step: Step::L(c),
        from,
        to,
        label,
    }
}

pub const MIGRATION: [FigureStep; 16] = [
    s(1, "TSM", "TA_A", "STCP"),
    s(2, "TSM", "TA_A", "Initiate Migration"),
    s(3, "TA_A", "TA_A", "Prepare C"),
    s(4, "TA_A", "TSM", "Ack."),
    s(5, "TSM", "TA_B", "STCP"),
    s(6, "TSM", "TA_B", "Prepare Migration from TA_A"),
    s(7, "TA_B", "TSM", "Ack."),
    s(8, "TSM", "TA_A", "ID of TA_B"),
    s(9, "TA_A", "TA_B", "STCP"),
    s(10, "TA_A", "TA_B", "Transfer C"),
    s(11, "TA_B", "TA_B", "Provision C"),
    s(12, "TA_B", "TA_A", "Ack."),
    s(13, "TA_B", "TSM", "Success"),
    s(14, "TSM", "TA_A", "Delete Credentials"),
    s(15, "TA_A", "TA_A", "Delete C"),
    s(16, "TA_A", "TSM", "Success"),
];

pub const REVOCATION: [FigureStep; 11] = [
    s(1, "TSM", "TA", "STCP"),
    s(2, "TSM", "TA", "Reveal C"),
    s(3, "TA", "TA", "Unseal C"),
    s(4, "TA", "TSM", "Show C"),
    s(5, "TSM", "RA", "STCP"),
    s(6, "TSM", "RA", "Lookup C"),
    s(7, "RA", "TSM", "Revoked RC"),
    s(8, "TSM", "RA", "Ack."),
    s(9, "TSM", "TA", "Revoke RC"),
    s(10, "TA", "TA", "Update RC ∈ C"),
    s(11, "TA", "TSM", "Success"),
];

pub const REGISTRATION: [FigureStep; 3] = [
    l('A', "MA", "RA", "STCP"),
    l('B', "MA", "RA", "Add Revoked Creds."),
    l('C', "RA", "MA", "Success"),
];

pub const REPORTING: [FigureStep; 2] = [
    l('D', "RA", "MA", "Report Attempts"),
    l('E', "MA", "RA", "Ack."),
];

pub const BACKUP: [FigureStep; 13] = [
    s(1, "TSM", "BA", "STCP"),
    s(2, "TSM", "BA", "Backup Request"),
    s(3, "BA", "BA", "Prepare"),
    s(4, "BA", "TSM", "Ack."),
    s(5, "TSM", "TA", "STCP"),
    s(6, "TSM", "TA", "Prepare Backup to BA"),
    s(7, "TA", "TA", "Unseal C"),
    s(8, "TA", "TSM", "Ack."),
    s(9, "TA", "BA", "STCP"),
    s(10, "TA", "BA", "Transmit C"),
    s(11, "BA", "BA", "Store C"),
    s(12, "BA", "TA", "Ack."),
    s(13, "BA", "TSM", "Success"),
];

pub const UPDATE: [FigureStep; 16] = [
    s(1, "MA", "TSM", "STCP"),
    s(2, "MA", "TSM", "Update Ready"),
    s(3, "TSM", "MA", "Ack."),
    s(4, "TSM", "TA", "STCP"),
    s(5, "TSM", "TA", "Update Ready"),
    s(6, "TA", "TA", "Prepare and Lock TA"),
    s(7, "TA", "TSM", "Ack."),
    s(8, "TA", "MA", "STCP"),
    s(9, "TA", "MA", "Fetch Credential Update"),
    s(10, "MA", "TA", "Transmit New Credential c'_i"),
    s(11, "TA", "TA", "Seal c'_i and Unlock"),
    s(12, "TA", "MA", "Ack."),
    s(13, "MA", "RA", "STCP"),
    s(14, "MA", "RA", "Revoke c_i"),
    s(15, "RA", "MA", "Ack."),
    s(16, "MA", "TSM", "Success"),
];

/// Update steps 1 to 12 and 16 with the BA as credential source.
pub const RESTORE: [FigureStep; 13] = [
    s(1, "MA", "TSM", "STCP"),
    s(2, "MA", "TSM", "Update Ready"),
    s(3, "TSM", "MA", "Ack."),
    s(4, "TSM", "TA", "STCP"),
    s(5, "TSM", "TA", "Update Ready"),
    s(6, "TA", "TA", "Prepare and Lock TA"),
    s(7, "TA", "TSM", "Ack."),
    s(8, "TA", "BA", "STCP"),
    s(9, "TA", "BA", "Fetch Credential Update"),
    s(10, "BA", "TA", "Transmit New Credential c'_i"),
    s(11, "TA", "TA", "Seal c'_i and Unlock"),
    s(12, "TA", "BA", "Ack."),
    s(16, "TA", "TSM", "Success"),
];

/// The golden sequence for `kind`, or `None` for housekeeping kinds.
pub fn figure(kind: ProcedureKind) -> Option<&'static [FigureStep]> {
    Some(match kind {
        ProcedureKind::Migration => &MIGRATION,
        ProcedureKind::Revocation => &REVOCATION,
        ProcedureKind::Registration => &REGISTRATION,
        ProcedureKind::Reporting => &REPORTING,
        ProcedureKind::Backup => &BACKUP,
        ProcedureKind::Update => &UPDATE,
        ProcedureKind::Restore => &RESTORE,
        ProcedureKind::Wipe | ProcedureKind::UseCredential => return None,
    })
}

pub fn labels(kind: ProcedureKind) -> Vec<(Step, &'static str)> {
    figure(kind)
        .unwrap_or_default()
        .iter()
        .map(|f| (f.step, f.label))
        .collect()
}

/// Whether a successful run's steps follow the figure for `kind`. Reporting
/// may be preceded by a fresh STCP (step A) when no registration channel is
/// open, and is empty when there was nothing to report.
pub fn conforms(kind: ProcedureKind, steps: &[(Step, &str)]) -> bool {
    let golden = labels(kind);
    match kind {
        ProcedureKind::Reporting => {
            let rest = match steps {
                [(Step::L('A'), "STCP"), rest @ ..] => rest,
                all => all,
            };
            rest.is_empty() || rest == golden.as_slice()
        }
        _ => steps == golden.as_slice(),
    }
}

/// Figure labels that carry credential material. None of them may involve
/// the TSM.
pub const CREDENTIAL_CARRYING: [(ProcedureKind, &str); 4] = [
    (ProcedureKind::Migration, "Transfer C"),
    (ProcedureKind::Backup, "Transmit C"),
    (ProcedureKind::Update, "Transmit New Credential c'_i"),
    (ProcedureKind::Restore, "Transmit New Credential c'_i"),
];
