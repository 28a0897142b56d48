//! Lifecycle procedures: migration, revocation (with registration and attempt
//! reporting), backup, update and restore. Each one drives a [`World`] step by
//! step and records the steps it completes.

mod backup;
pub mod figures;
pub mod messages;
mod migration;
mod revocation;
mod update;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use backup::run_backup;
pub use messages::{AppMessage, TargetInfo};
pub use migration::run_migration;
pub use revocation::{run_registration, run_reporting, run_revocation, run_use_credential};
pub use update::{run_restore, run_update};

use crate::actors::CredentialId;
use crate::crypto::{self, Digest};
use crate::pki::{Identity, Role};
use crate::simnet::codec::{Canonical, DecodeError, Reader, Writer};
use crate::simnet::invariants::{self, Violation};
use crate::simnet::transcript::Line;
use crate::simnet::world::{ChannelId, World};

/// A step number from a figure, or a letter for the lettered revocation steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    N(u8),
    L(char),
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::N(n) => write!(f, "{n}"),
            Step::L(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(n) = s.parse::<u8>() {
            return Ok(Step::N(n));
        }
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => Ok(Step::L(c)),
            _ => Err(format!("not a step: {s:?}")),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Canonical for Step {
    fn encode(&self, w: &mut Writer) {
        match self {
            Step::N(n) => {
                w.put_u8(0);
                w.put_u8(*n);
            }
            Step::L(c) => {
                w.put_u8(1);
                w.put_u8(*c as u8);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Step::N(r.u8()?)),
            1 => {
                let c = r.u8()? as char;
                if c.is_ascii_uppercase() {
                    Ok(Step::L(c))
                } else {
                    Err(DecodeError::NonCanonical("step letter"))
                }
            }
            tag => Err(DecodeError::InvalidTag { what: "Step", tag }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcedureKind {
    Migration,
    Revocation,
    /// Steps A to C: MA registers revoked credentials with the RA.
    Registration,
    /// Steps D and E: RA reports use of revoked credentials to the MA.
    Reporting,
    Backup,
    Update,
    Restore,
    Wipe,
    UseCredential,
}

impl ProcedureKind {
    pub const ALL: [ProcedureKind; 9] = [
        ProcedureKind::Migration,
        ProcedureKind::Revocation,
        ProcedureKind::Registration,
        ProcedureKind::Reporting,
        ProcedureKind::Backup,
        ProcedureKind::Update,
        ProcedureKind::Restore,
        ProcedureKind::Wipe,
        ProcedureKind::UseCredential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProcedureKind::Migration => "migration",
            ProcedureKind::Revocation => "revocation",
            ProcedureKind::Registration => "registration",
            ProcedureKind::Reporting => "reporting",
            ProcedureKind::Backup => "backup",
            ProcedureKind::Update => "update",
            ProcedureKind::Restore => "restore",
            ProcedureKind::Wipe => "wipe",
            ProcedureKind::UseCredential => "use-credential",
        }
    }

    fn tag(self) -> u8 {
        ProcedureKind::ALL
            .iter()
            .position(|k| *k == self)
            .expect("listed in ALL") as u8
    }
}

impl fmt::Display for ProcedureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProcedureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProcedureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown procedure kind {s:?}"))
    }
}

impl Canonical for ProcedureKind {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(self.tag());
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        ProcedureKind::ALL
            .get(tag as usize)
            .copied()
            .ok_or(DecodeError::InvalidTag {
                what: "ProcedureKind",
                tag,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: Step,
    pub from: String,
    pub to: String,
    pub label: String,
    pub at: u64,
    pub payload_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Status {
    Success,
    Aborted { step: Step, reason: String },
    /// Nothing failed, but the work could not be delivered yet and is queued.
    Deferred { reason: String },
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Status::Success => "success",
            Status::Aborted { .. } => "aborted",
            Status::Deferred { .. } => "deferred",
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, Status::Success)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureOutcome {
    pub kind: ProcedureKind,
    pub run: u64,
    #[serde(flatten)]
    pub status: Status,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
}

impl ProcedureOutcome {
    pub fn labels(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.label.clone()).collect()
    }
}

/// Why a procedure stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Abort {
    pub step: Step,
    pub reason: String,
}

pub type StepResult<T> = Result<T, Abort>;

pub(crate) fn abort<T>(step: Step, reason: impl fmt::Display) -> StepResult<T> {
    Err(Abort {
        step,
        reason: reason.to_string(),
    })
}

/// One procedure instance in progress.
pub struct Run<'w> {
    pub world: &'w mut World,
    pub kind: ProcedureKind,
    pub run: u64,
    steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
    opened: Vec<ChannelId>,
}

impl<'w> Run<'w> {
    pub fn new(world: &'w mut World, kind: ProcedureKind) -> Self {
        world.run_counter += 1;
        let run = world.run_counter;
        Self {
            world,
            kind,
            run,
            steps: Vec::new(),
            warnings: Vec::new(),
            opened: Vec::new(),
        }
    }

    pub(crate) fn identity(&self, step: Step, id: &str) -> StepResult<Identity> {
        match self.world.identity(id) {
            Some(i) => Ok(i),
            None => abort(step, format!("unknown actor {id}")),
        }
    }

    fn record(&mut self, step: Step, from: &Identity, to: &Identity, label: &str, payload_digest: Digest) {
        let rec = StepRecord {
            step,
            from: from.to_string(),
            to: to.to_string(),
            label: label.to_string(),
            at: self.world.net.now(),
            payload_digest,
        };
        let seq = self.world.transcript.next_step_seq();
        self.world.transcript.push(&Line::Step {
            seq,
            procedure: self.kind.to_string(),
            run: self.run,
            step: step.to_string(),
            from: rec.from.clone(),
            to: rec.to.clone(),
            label: rec.label.clone(),
            at: rec.at,
            payload_digest: rec.payload_digest.to_hex(),
        });
        self.steps.push(rec.clone());
        self.world.fire_hook(&rec);
    }

    /// Establishes an STCP session from `initiator` to `responder`.
    pub fn stcp(
        &mut self,
        step: Step,
        initiator: &str,
        responder: &str,
        pin: Option<Digest>,
    ) -> StepResult<ChannelId> {
        let (i, r) = (self.identity(step, initiator)?, self.identity(step, responder)?);
        let chan = match self
            .world
            .handshake(&format!("{step}. STCP"), initiator, responder, pin)
        {
            Ok(c) => c,
            Err(e) => return abort(step, e),
        };
        self.opened.push(chan);
        let th = *self
            .world
            .channel(chan)
            .expect("just opened")
            .initiator_end
            .transcript_hash();
        self.record(step, &i, &r, "STCP", th);
        Ok(chan)
    }

    /// Adopts a channel opened earlier by another run.
    pub fn reuse(&mut self, chan: ChannelId) {
        if !self.opened.contains(&chan) {
            self.opened.push(chan);
        }
    }

    /// Sends one application message over `chan` and returns the body the
    /// receiver accepted.
    pub fn send(
        &mut self,
        step: Step,
        chan: ChannelId,
        from: &str,
        label: &str,
        body: Vec<u8>,
    ) -> StepResult<Vec<u8>> {
        let Some(ch) = self.world.channel(chan) else {
            return abort(step, "channel closed");
        };
        let to = if ch.initiator == from {
            ch.responder.clone()
        } else {
            ch.initiator.clone()
        };
        let (from_id, to_id) = (self.identity(step, from)?, self.identity(step, &to)?);
        let sender_end = self.world.channel_peer(chan, from).expect("sender is an end");
        let th = *sender_end.transcript_hash();

        let mut msg = AppMessage {
            procedure: self.kind,
            run: self.run,
            step,
            body,
            command_sig: None,
        };
        if matches!(from_id.role, Role::Tsm | Role::Ma) {
            let key = &self.world.actor(from).expect("resolved").endpoint.command_key;
            msg.command_sig = Some(key.sign(&msg.signed_bytes(&th)));
        }
        let wire_label = format!("{step}. {label}");
        let plain = match self.world.transmit(chan, from, &wire_label, &msg.to_bytes()) {
            Ok(p) => p,
            Err(e) => return abort(step, e),
        };

        if from_id.role == Role::Tsm || to_id.role == Role::Tsm {
            if let Some(secret) = self.world.secrets.scan(&plain) {
                if secret.starts_with("credential:") {
                    self.world.violation(Violation::ExposureToTsm {
                        label: label.to_string(),
                        from: from_id.to_string(),
                        to: to_id.to_string(),
                    });
                }
            }
        }

        let received = match AppMessage::from_bytes(&plain) {
            Ok(m) => m,
            Err(e) => return abort(step, format!("malformed message: {e}")),
        };
        if received.procedure != self.kind || received.run != self.run || received.step != step {
            return abort(step, "message for a different step");
        }
        let receiver_end = self.world.channel_peer(chan, &to).expect("receiver is an end");
        if matches!(from_id.role, Role::Tsm | Role::Ma) {
            let cert = receiver_end.peer_certificate();
            let ok = received.command_sig.as_ref().is_some_and(|sig| {
                crypto::verify(&cert.command_key, &received.signed_bytes(&th), sig).is_ok()
            });
            if !ok {
                return abort(step, "command signature invalid");
            }
        }
        self.record(step, &from_id, &to_id, label, crypto::hash(&received.body));
        Ok(received.body)
    }

    /// Decodes a body the receiver accepted. A decode failure here means an
    /// authenticated peer sent something wrong, which aborts.
    pub fn decode<T: Canonical>(&self, step: Step, body: &[u8]) -> StepResult<T> {
        T::from_bytes(body).map_err(|e| Abort {
            step,
            reason: format!("bad payload: {e}"),
        })
    }

    /// Records a step performed inside one actor.
    pub fn local(&mut self, step: Step, actor: &str, label: &str, digest: Digest) -> StepResult<()> {
        let id = self.identity(step, actor)?;
        self.world.event(actor, format!("{step}. {label}"));
        self.record(step, &id, &id, label, digest);
        Ok(())
    }

    pub fn warn(&mut self, w: impl Into<String>) {
        self.warnings.push(w.into());
    }

    /// Closes channels opened by this run, flushes the network, runs the
    /// state checkers and writes the outcome line.
    pub fn finish(mut self, result: StepResult<()>) -> ProcedureOutcome {
        // A failed run may leave a channel out of sequence, standing or not.
        let standing: BTreeSet<ChannelId> = self.world.standing.values().copied().collect();
        for chan in std::mem::take(&mut self.opened) {
            if result.is_err() || !standing.contains(&chan) {
                self.world.close_channel(chan);
            }
        }
        self.world.drain();
        for v in invariants::check_state(self.world) {
            if !self.world.violations.contains(&v) {
                self.world.violation(v);
            }
        }
        let status = match result {
            Ok(()) => Status::Success,
            Err(Abort { reason, .. }) if reason.starts_with(DEFERRED) => Status::Deferred {
                reason: reason[DEFERRED.len()..].to_string(),
            },
            Err(Abort { step, reason }) => Status::Aborted { step, reason },
        };
        if status.is_success() {
            let seen: Vec<(Step, &str)> = self.steps.iter().map(|s| (s.step, s.label.as_str())).collect();
            if !figures::conforms(self.kind, &seen) {
                let fmt = |v: &[(Step, &str)]| v.iter().map(|(s, l)| format!("{s}. {l}")).collect();
                let v = Violation::StepOrder {
                    procedure: self.kind.to_string(),
                    run: self.run,
                    expected: fmt(&figures::labels(self.kind)),
                    actual: fmt(&seen),
                };
                self.world.violation(v);
            }
        }
        let (step, reason) = match &status {
            Status::Success => (None, None),
            Status::Aborted { step, reason } => (Some(step.to_string()), Some(reason.clone())),
            Status::Deferred { reason } => (None, Some(reason.clone())),
        };
        self.world.transcript.push(&Line::Outcome {
            procedure: self.kind.to_string(),
            run: self.run,
            status: status.name().to_string(),
            step,
            reason,
            warnings: self.warnings.clone(),
        });
        ProcedureOutcome {
            kind: self.kind,
            run: self.run,
            status,
            steps: self.steps,
            warnings: self.warnings,
        }
    }
}

const DEFERRED: &str = "deferred: ";

pub(crate) fn deferred<T>(step: Step, reason: impl fmt::Display) -> StepResult<T> {
    abort(step, format!("{DEFERRED}{reason}"))
}

/// Ids of credentials called `name`. Credentials currently held by a TA (or
/// by `subject` only, when given) win over historical lineage entries.
pub fn resolve_credential(world: &World, name: &str, subject: Option<&str>) -> BTreeSet<CredentialId> {
    let mut held = BTreeSet::new();
    for ta in world.tas() {
        if subject.is_some_and(|s| s != ta.identity().id) {
            continue;
        }
        if let Ok(set) = ta.credentials_or_empty() {
            held.extend(set.iter().filter(|c| c.name == name).map(|c| c.credential_id));
        }
    }
    if !held.is_empty() {
        return held;
    }
    world
        .truth
        .lineages
        .iter()
        .filter(|(l, _)| l.name == name && subject.is_none_or(|s| s == l.subject))
        .flat_map(|(_, ids)| ids.iter().copied())
        .collect()
}

/// A procedure invocation with all actor ids resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProcedureSpec {
    Migration { tsm: String, from: String, to: String },
    Revocation { tsm: String, ta: String, ra: String },
    RegisterRevoked { ma: String, ra: String, credentials: Vec<String> },
    Backup { tsm: String, ta: String, ba: String },
    Update { ma: String, tsm: String, ta: String, ra: String, credential: String },
    Restore { ma: String, tsm: String, ta: String, ba: String },
    Wipe { ta: String },
    UseCredential { ta: String, ra: Option<String>, ma: Option<String>, credential: String },
}

/// Runs one procedure. Using a revoked credential can trigger a reporting
/// run, so this may return more than one outcome.
pub fn execute(world: &mut World, spec: &ProcedureSpec) -> Vec<ProcedureOutcome> {
    match spec {
        ProcedureSpec::Migration { tsm, from, to } => vec![run_migration(world, tsm, from, to)],
        ProcedureSpec::Revocation { tsm, ta, ra } => vec![run_revocation(world, tsm, ta, ra)],
        ProcedureSpec::RegisterRevoked { ma, ra, credentials } => {
            let ids = credentials
                .iter()
                .flat_map(|n| resolve_credential(world, n, None))
                .collect();
            vec![run_registration(world, ma, ra, &ids)]
        }
        ProcedureSpec::Backup { tsm, ta, ba } => vec![run_backup(world, tsm, ta, ba)],
        ProcedureSpec::Update {
            ma,
            tsm,
            ta,
            ra,
            credential,
        } => vec![run_update(world, ma, tsm, ta, ra, credential)],
        ProcedureSpec::Restore { ma, tsm, ta, ba } => vec![run_restore(world, ma, tsm, ta, ba)],
        ProcedureSpec::Wipe { ta } => vec![run_wipe(world, ta)],
        ProcedureSpec::UseCredential { ta, ra, ma, credential } => {
            run_use_credential(world, ta, ra.as_deref(), ma.as_deref(), credential)
        }
    }
}

/// Device reset: the TA loses its sealed store.
pub fn run_wipe(world: &mut World, ta: &str) -> ProcedureOutcome {
    let run = Run::new(world, ProcedureKind::Wipe);
    let result = match run.world.ta_mut(ta) {
        Some(t) => {
            t.wipe();
            run.world.event(ta, "sealed store wiped");
            Ok(())
        }
        None => abort(Step::N(1), format!("{ta} is not a TA")),
    };
    run.finish(result)
}
