//! A simulated deployment: actors, their long-term keys, the network and the
//! ground truth the invariant checkers compare against.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adversary::AdversaryProgram;
use super::codec::Canonical;
use super::invariants::{SecretRegistry, Violation};
use super::network::{Envelope, EnvelopeKind, Network, StepResult};
use super::transcript::{Line, Transcript};
use crate::actors::{
    BackupStore, Credential, CredentialId, JournalError, MaintenanceAuthority, RevocationAuthority,
    RevocationMode, TaState,
};
use crate::attest::{measure, PlatformSnapshot, TeeFlavor, TrustPolicy};
use crate::crypto::{seeded_rng, Digest, SigningKeyPair, SimRng, StorageRootKey};
use crate::pki::{CertificateAuthority, Identity, Role, Validity};
use crate::procedures::StepRecord;
use crate::stcp::{self, Endpoint, HandshakeMessage, Record, RespondOutcome, Responder, StcpSession};

pub type ChannelId = u64;

const CERT_VALIDITY: (u64, u64) = (0, 1 << 40);
const CREDENTIAL_VALIDITY: (u64, u64) = (0, 1 << 40);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub id: String,
    pub role: Role,
    pub device: Option<String>,
    pub tee: TeeFlavor,
    pub code: Option<String>,
    pub credentials: Vec<String>,
    /// The platform runs code other than its registered reference.
    pub tampered: bool,
    /// Ignores deletion commands.
    pub malicious: bool,
    pub offline: bool,
}

impl ActorSpec {
    pub fn new(id: &str, role: Role) -> Self {
        Self {
            id: id.to_string(),
            role,
            device: None,
            tee: TeeFlavor::GpTee,
            code: None,
            credentials: Vec::new(),
            tampered: false,
            malicious: false,
            offline: false,
        }
    }

    pub fn with_credentials(mut self, names: &[&str]) -> Self {
        self.credentials = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub name: String,
    pub seed: u64,
    pub revocation_mode: Option<RevocationMode>,
    pub actors: Vec<ActorSpec>,
    pub adversary: AdversaryProgram,
    /// When set, RA and BA state is journaled here and resumed on rebuild.
    pub journal_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world needs exactly one CA, found {0}")]
    CaCount(usize),
    #[error("duplicate actor id {0}")]
    DuplicateActor(String),
    #[error("unknown actor {0}")]
    UnknownActor(String),
    #[error("an RA is present but no revocation mode is set")]
    MissingRevocationMode,
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub enum RoleState {
    Ta(TaState),
    Tsm,
    Ba(BackupStore),
    Ra(RevocationAuthority),
    Ma(MaintenanceAuthority),
}

pub struct Actor {
    pub endpoint: Endpoint,
    pub responder: Responder,
    /// What the platform really runs, as opposed to what it reports.
    pub true_platform: PlatformSnapshot,
    pub compromised: bool,
    pub state: RoleState,
}

impl Actor {
    pub fn identity(&self) -> &Identity {
        &self.endpoint.identity
    }
}

/// An established channel with both ends held by the world.
pub struct Channel {
    pub initiator: String,
    pub responder: String,
    pub initiator_end: StcpSession,
    pub responder_end: StcpSession,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Lineage {
    pub issuer: String,
    pub subject: String,
    pub name: String,
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.issuer, self.subject, self.name)
    }
}

/// Facts the checkers rely on, recorded as the simulation runs.
#[derive(Debug, Default, Clone)]
pub struct GroundTruth {
    pub lineages: BTreeMap<Lineage, BTreeSet<CredentialId>>,
    pub lineage_of: BTreeMap<CredentialId, Lineage>,
    /// Credential ids moved by each successful migration.
    pub migrated: Vec<BTreeSet<CredentialId>>,
}

impl GroundTruth {
    pub fn record_issue(&mut self, c: &Credential) {
        let lineage = Lineage {
            issuer: c.issuer.id.clone(),
            subject: c.subject.id.clone(),
            name: c.name.clone(),
        };
        self.lineages
            .entry(lineage.clone())
            .or_default()
            .insert(c.credential_id);
        self.lineage_of.insert(c.credential_id, lineage);
    }
}

pub type StepHook = Box<dyn FnMut(&mut World, &StepRecord) + Send>;

pub struct World {
    pub name: String,
    pub seed: u64,
    pub(crate) rng: SimRng,
    ca: CertificateAuthority,
    pub policy: TrustPolicy,
    actors: BTreeMap<String, Actor>,
    order: Vec<String>,
    pub net: Network,
    channels: BTreeMap<ChannelId, Channel>,
    next_channel: ChannelId,
    /// Channels kept open across procedures, keyed by (initiator, responder).
    pub(crate) standing: BTreeMap<(String, String), ChannelId>,
    pub secrets: SecretRegistry,
    pub truth: GroundTruth,
    pub transcript: Transcript,
    pub violations: Vec<Violation>,
    pub needs_operator_retry: BTreeSet<String>,
    hook: Option<StepHook>,
    pub(crate) run_counter: u64,
}

fn reference_platform(spec: &ActorSpec) -> PlatformSnapshot {
    let code = spec
        .code
        .clone()
        .unwrap_or_else(|| format!("{}-service", spec.role.as_str().to_lowercase()));
    platform(spec.tee, code.as_bytes())
}

fn platform(tee: TeeFlavor, code: &[u8]) -> PlatformSnapshot {
    match tee {
        TeeFlavor::GpTee => PlatformSnapshot::gp_tee(b"boot-loader/1", b"tee-os/1", code),
        TeeFlavor::Enclave => PlatformSnapshot::enclave(code, b"vendor-signer/1"),
    }
}

impl World {
    pub fn build(config: &WorldConfig) -> Result<Self, WorldError> {
        let cas: Vec<&ActorSpec> = config.actors.iter().filter(|a| a.role == Role::Ca).collect();
        if cas.len() != 1 {
            return Err(WorldError::CaCount(cas.len()));
        }
        let mut seen = BTreeSet::new();
        for a in &config.actors {
            if !seen.insert(a.id.clone()) {
                return Err(WorldError::DuplicateActor(a.id.clone()));
            }
        }
        let has_ra = config.actors.iter().any(|a| a.role == Role::Ra);
        if has_ra && config.revocation_mode.is_none() {
            return Err(WorldError::MissingRevocationMode);
        }
        if let Some(dir) = &config.journal_dir {
            std::fs::create_dir_all(dir).map_err(JournalError::from)?;
        }
        for name in &config.adversary.compromise {
            if !seen.contains(name) {
                return Err(WorldError::UnknownActor(name.clone()));
            }
        }

        let mut rng = seeded_rng(config.seed);
        let ca = CertificateAuthority::generate(&cas[0].id, &mut rng);
        let mut policy = TrustPolicy::new();
        let mut secrets = SecretRegistry::new();
        secrets.add(format!("ca-key:{}", cas[0].id), ca.secret_bytes());
        let validity = Validity::new(CERT_VALIDITY.0, CERT_VALIDITY.1).expect("constant window");
        let compromised: BTreeSet<&String> = config.adversary.compromise.iter().collect();

        let mut actors = BTreeMap::new();
        let mut order = Vec::new();
        for spec in config.actors.iter().filter(|a| a.role != Role::Ca) {
            let identity = Identity::new(spec.id.clone(), spec.role);
            let att = SigningKeyPair::generate(&mut rng);
            let cmd = SigningKeyPair::generate(&mut rng);
            secrets.add(format!("attestation-key:{}", spec.id), att.secret_bytes());
            secrets.add(format!("command-key:{}", spec.id), cmd.secret_bytes());
            let certificate = ca
                .issue_certificate(
                    identity.clone(),
                    spec.device.clone().unwrap_or_else(|| format!("{}-device", spec.id)),
                    att.public(),
                    cmd.public(),
                    validity,
                )
                .expect("validity window checked above");

            let reference = reference_platform(spec);
            let reference_mv = measure(&reference).expect("reference platforms are non-empty");
            policy.allow(identity.clone(), reference_mv.digest());
            let true_platform = if spec.tampered {
                let code = [reference_code(&reference), b"+implant".as_slice()].concat();
                platform(spec.tee, &code)
            } else {
                reference.clone()
            };
            let is_compromised = compromised.contains(&spec.id);
            // An adversary holding the attestation key signs whatever it
            // likes, so a compromised platform reports the reference state.
            let measurements = if is_compromised {
                reference_mv
            } else {
                measure(&true_platform).expect("non-empty")
            };

            let state = match spec.role {
                Role::Ta => {
                    let srk = StorageRootKey::generate(&mut rng);
                    secrets.add(format!("srk:{}", spec.id), srk.secret_bytes());
                    let mut ta = TaState::new(identity.clone(), srk, true_platform.clone());
                    ta.malicious = spec.malicious;
                    RoleState::Ta(ta)
                }
                Role::Tsm => RoleState::Tsm,
                Role::Ba => RoleState::Ba(match &config.journal_dir {
                    Some(dir) => BackupStore::resume(&dir.join(format!("{}.journal", spec.id)))?,
                    None => BackupStore::new(),
                }),
                Role::Ra => {
                    let mode = config.revocation_mode.expect("checked above");
                    RoleState::Ra(match &config.journal_dir {
                        Some(dir) => RevocationAuthority::resume(
                            identity.clone(),
                            mode,
                            &dir.join(format!("{}.journal", spec.id)),
                        )?,
                        None => RevocationAuthority::new(identity.clone(), mode),
                    })
                }
                Role::Ma => RoleState::Ma(MaintenanceAuthority::new(
                    identity.clone(),
                    Validity::new(CREDENTIAL_VALIDITY.0, CREDENTIAL_VALIDITY.1).expect("constant"),
                )),
                Role::Ca => unreachable!("filtered above"),
            };
            let responder = Responder::new(&mut rng);
            actors.insert(
                spec.id.clone(),
                Actor {
                    endpoint: Endpoint {
                        identity,
                        certificate,
                        attestation_key: att,
                        command_key: cmd,
                        anchor: ca.anchor(),
                        measurements,
                    },
                    responder,
                    true_platform,
                    compromised: is_compromised,
                    state,
                },
            );
            order.push(spec.id.clone());
        }

        let mut net = Network::new(config.adversary.clone());
        for spec in &config.actors {
            net.set_offline(&spec.id, spec.offline);
        }

        let mut world = World {
            name: config.name.clone(),
            seed: config.seed,
            rng,
            ca,
            policy,
            actors,
            order,
            net,
            channels: BTreeMap::new(),
            next_channel: 0,
            standing: BTreeMap::new(),
            secrets,
            truth: GroundTruth::default(),
            transcript: Transcript::new(),
            violations: Vec::new(),
            needs_operator_retry: BTreeSet::new(),
            hook: None,
            run_counter: 0,
        };
        world.transcript.push(&Line::Header {
            scenario: config.name.clone(),
            seed: config.seed,
        });
        world.provision_initial(config);
        Ok(world)
    }

    fn provision_initial(&mut self, config: &WorldConfig) {
        let issuer_ma = self.first_of(Role::Ma);
        let issuer = issuer_ma.clone().or_else(|| self.first_of(Role::Tsm));
        let mut issued_ids = BTreeSet::new();
        for spec in config.actors.iter().filter(|a| a.role == Role::Ta) {
            let subject = self.actors[&spec.id].identity().clone();
            let mut creds = Vec::new();
            for name in &spec.credentials {
                let c = match &issuer_ma {
                    Some(ma) => {
                        let Some(Actor {
                            state: RoleState::Ma(m),
                            ..
                        }) = self.actors.get_mut(ma)
                        else {
                            unreachable!("first_of returned an MA")
                        };
                        m.issue(&subject, name, &mut self.rng)
                    }
                    None => {
                        let issuer_identity = issuer
                            .as_ref()
                            .map(|i| self.actors[i].identity().clone())
                            .unwrap_or_else(|| subject.clone());
                        Credential::issue(
                            issuer_identity,
                            subject.clone(),
                            name.as_str(),
                            Validity::new(CREDENTIAL_VALIDITY.0, CREDENTIAL_VALIDITY.1)
                                .expect("constant"),
                            1,
                            &mut self.rng,
                        )
                    }
                };
                self.register_credential(&c);
                issued_ids.insert(c.credential_id);
                creds.push(c);
            }
            let Some(RoleState::Ta(ta)) = self.actors.get_mut(&spec.id).map(|a| &mut a.state) else {
                unreachable!("spec role is TA")
            };
            ta.provision(creds.into_iter().collect(), &mut self.rng)
                .expect("fresh TA storage is readable");
        }
        if let Some(by) = issuer {
            let by = self.actors[&by].identity().clone();
            for id in self.order.clone() {
                if let Some(RoleState::Ra(ra)) = self.actors.get_mut(&id).map(|a| &mut a.state) {
                    // Only whitelists change; blacklists start empty.
                    ra.permit(&issued_ids, &by, 0)
                        .expect("issuer role is MA or TSM");
                }
            }
        }
    }

    pub fn register_credential(&mut self, c: &Credential) {
        self.secrets
            .add(format!("credential:{}", c.credential_id.to_hex()), &c.material);
        self.truth.record_issue(c);
    }

    fn first_of(&self, role: Role) -> Option<String> {
        self.order
            .iter()
            .find(|id| self.actors[*id].identity().role == role)
            .cloned()
    }

    pub fn ca(&self) -> &CertificateAuthority {
        &self.ca
    }

    pub fn actor_ids(&self) -> &[String] {
        &self.order
    }

    pub fn actor(&self, id: &str) -> Option<&Actor> {
        self.actors.get(id)
    }

    pub fn actor_mut(&mut self, id: &str) -> Option<&mut Actor> {
        self.actors.get_mut(id)
    }

    pub fn identity(&self, id: &str) -> Option<Identity> {
        self.actors.get(id).map(|a| a.identity().clone())
    }

    pub fn ta(&self, id: &str) -> Option<&TaState> {
        match &self.actors.get(id)?.state {
            RoleState::Ta(t) => Some(t),
            _ => None,
        }
    }

    pub fn ta_mut(&mut self, id: &str) -> Option<&mut TaState> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ta(t) => Some(t),
            _ => None,
        }
    }

    /// A TA together with the world RNG, for operations that need both.
    pub fn ta_rng(&mut self, id: &str) -> Option<(&mut TaState, &mut SimRng)> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ta(t) => Some((t, &mut self.rng)),
            _ => None,
        }
    }

    pub fn ma_rng(&mut self, id: &str) -> Option<(&mut MaintenanceAuthority, &mut SimRng)> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ma(m) => Some((m, &mut self.rng)),
            _ => None,
        }
    }

    pub fn ra(&self, id: &str) -> Option<&RevocationAuthority> {
        match &self.actors.get(id)?.state {
            RoleState::Ra(r) => Some(r),
            _ => None,
        }
    }

    pub fn ra_mut(&mut self, id: &str) -> Option<&mut RevocationAuthority> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ra(r) => Some(r),
            _ => None,
        }
    }

    pub fn ba(&self, id: &str) -> Option<&BackupStore> {
        match &self.actors.get(id)?.state {
            RoleState::Ba(b) => Some(b),
            _ => None,
        }
    }

    pub fn ba_mut(&mut self, id: &str) -> Option<&mut BackupStore> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ba(b) => Some(b),
            _ => None,
        }
    }

    pub fn ma(&self, id: &str) -> Option<&MaintenanceAuthority> {
        match &self.actors.get(id)?.state {
            RoleState::Ma(m) => Some(m),
            _ => None,
        }
    }

    pub fn ma_mut(&mut self, id: &str) -> Option<&mut MaintenanceAuthority> {
        match &mut self.actors.get_mut(id)?.state {
            RoleState::Ma(m) => Some(m),
            _ => None,
        }
    }

    pub fn tas(&self) -> impl Iterator<Item = &TaState> {
        self.order.iter().filter_map(|id| self.ta(id))
    }

    pub fn backup_stores(&self) -> impl Iterator<Item = (&str, &BackupStore)> {
        self.order
            .iter()
            .filter_map(|id| self.ba(id).map(|b| (id.as_str(), b)))
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<String> {
        self.order
            .iter()
            .filter(|id| self.actors[*id].identity().role == role)
            .cloned()
            .collect()
    }

    pub fn is_revoked_anywhere(&self, id: &CredentialId) -> bool {
        self.order
            .iter()
            .filter_map(|a| self.ra(a))
            .any(|ra| ra.list().is_revoked(id))
    }

    /// Whether the platform's real state is one the policy would accept.
    pub fn platform_trusted(&self, id: &str) -> bool {
        let Some(actor) = self.actors.get(id) else {
            return false;
        };
        measure(&actor.true_platform)
            .map(|mv| self.policy.trusts(actor.identity(), &mv.digest()))
            .unwrap_or(false)
    }

    pub fn set_step_hook(&mut self, hook: StepHook) {
        self.hook = Some(hook);
    }

    pub(crate) fn fire_hook(&mut self, record: &StepRecord) {
        if let Some(mut hook) = self.hook.take() {
            hook(self, record);
            if self.hook.is_none() {
                self.hook = Some(hook);
            }
        }
    }

    pub fn event(&mut self, actor: &str, what: impl Into<String>) {
        let actor = self
            .identity(actor)
            .map(|i| i.to_string())
            .unwrap_or_else(|| actor.to_string());
        self.transcript.push(&Line::Event {
            at: self.net.now(),
            actor,
            what: what.into(),
        });
    }

    pub fn violation(&mut self, v: Violation) {
        self.transcript.push(&Line::Violation {
            at: self.net.now(),
            detail: serde_json::to_value(&v).expect("violations serialize"),
        });
        self.violations.push(v);
    }

    fn flush_wire(&mut self) {
        for e in self.net.take_events() {
            self.transcript.push(&Line::from(&e));
        }
    }

    fn scan(&mut self, seq: u64, body: &[u8]) {
        if let Some(label) = self.secrets.scan(body) {
            let secret = label.to_string();
            self.violation(Violation::SecretOnWire { seq, secret });
        }
    }

    pub fn post(&mut self, from: &Identity, to: &Identity, kind: EnvelopeKind, label: &str, body: Vec<u8>) {
        let scan_copy = body.clone();
        let seq = self.net.send(from, to, kind, label, body);
        self.scan(seq, &scan_copy);
    }

    /// Runs the network until something reaches `to`. Deliveries to anyone
    /// else are unsolicited and discarded.
    pub fn await_delivery(&mut self, to: &str) -> Option<Envelope> {
        loop {
            let result = self.net.step();
            self.flush_wire();
            match result {
                StepResult::Idle => return None,
                StepResult::Dropped(_) => continue,
                StepResult::Delivered(env) => {
                    self.scan(env.seq, &env.body);
                    if env.to.id == to {
                        return Some(env);
                    }
                    self.event(&env.to.id.clone(), format!("discarded unsolicited #{}", env.seq));
                }
            }
        }
    }

    fn discard(&mut self, actor: &str, env: &Envelope, why: impl fmt::Display) {
        self.event(actor, format!("discarded #{}: {why}", env.seq));
    }

    /// Delivers whatever is still in flight; nobody is waiting for it.
    pub fn drain(&mut self) {
        loop {
            let result = self.net.step();
            self.flush_wire();
            match result {
                StepResult::Idle => return,
                StepResult::Dropped(_) => {}
                StepResult::Delivered(env) => {
                    self.scan(env.seq, &env.body);
                    self.event(&env.to.id.clone(), format!("discarded late #{}", env.seq));
                }
            }
        }
    }

    fn await_handshake(
        &mut self,
        at: &str,
        accept: impl Fn(&HandshakeMessage) -> bool,
    ) -> Option<(Envelope, HandshakeMessage)> {
        loop {
            let env = self.await_delivery(at)?;
            if env.kind != EnvelopeKind::Handshake {
                self.discard(at, &env, "not a handshake message");
                continue;
            }
            match HandshakeMessage::from_bytes(&env.body) {
                Ok(m) if accept(&m) => return Some((env, m)),
                Ok(m) => self.discard(at, &env, format!("unexpected {}", m.name())),
                Err(e) => self.discard(at, &env, e),
            }
        }
    }

    /// Runs a full STCP handshake over the network. Unauthenticated junk is
    /// discarded; a verification failure on a message that belongs to this
    /// handshake aborts it.
    pub fn handshake(
        &mut self,
        label: &str,
        initiator: &str,
        responder: &str,
        pin: Option<Digest>,
    ) -> Result<ChannelId, String> {
        let i_id = self
            .identity(initiator)
            .ok_or_else(|| format!("unknown actor {initiator}"))?;
        let r_id = self
            .identity(responder)
            .ok_or_else(|| format!("unknown actor {responder}"))?;

        let (mut pending, m1) = stcp::initiate(&self.actors[initiator].endpoint, &r_id, &mut self.rng);
        if let Some(fp) = pin {
            pending = pending.pin_fingerprint(fp);
        }
        let sid = *pending.session_id();
        self.post(
            &i_id,
            &r_id,
            EnvelopeKind::Handshake,
            &format!("{label} M1"),
            HandshakeMessage::M1(m1).to_bytes(),
        );

        // M1 -> cookie challenge. The responder keeps no state here.
        let challenge = loop {
            let (env, msg) = self
                .await_handshake(responder, |m| matches!(m, HandshakeMessage::M1(_)))
                .ok_or("STCP M1 lost")?;
            let HandshakeMessage::M1(m) = msg else { unreachable!() };
            let now = self.net.now();
            let actor = self.actors.get_mut(responder).expect("identity resolved");
            match stcp::respond(&actor.endpoint, &mut actor.responder, &m, &env.from.id, now, &mut self.rng) {
                Ok(RespondOutcome::Challenge(c)) => break c,
                Ok(RespondOutcome::Proceed(..)) => self.discard(responder, &env, "unexpected cookie"),
                Err(e) => self.discard(responder, &env, e),
            }
        };
        self.post(
            &r_id,
            &i_id,
            EnvelopeKind::Handshake,
            &format!("{label} CookieChallenge"),
            HandshakeMessage::Cookie(challenge).to_bytes(),
        );

        let m1c = loop {
            let (env, msg) = self
                .await_handshake(initiator, |m| {
                    matches!(m, HandshakeMessage::Cookie(c) if c.session_id == sid)
                })
                .ok_or("STCP cookie challenge lost")?;
            let HandshakeMessage::Cookie(c) = msg else { unreachable!() };
            match pending.answer_cookie(&c) {
                Ok(m) => break m,
                Err(e) => self.discard(initiator, &env, e),
            }
        };
        self.post(
            &i_id,
            &r_id,
            EnvelopeKind::Handshake,
            &format!("{label} M1+cookie"),
            HandshakeMessage::M1(m1c).to_bytes(),
        );

        let (rpending, m2) = loop {
            let (env, msg) = self
                .await_handshake(responder, |m| matches!(m, HandshakeMessage::M1(_)))
                .ok_or("STCP M1+cookie lost")?;
            let HandshakeMessage::M1(m) = msg else { unreachable!() };
            let now = self.net.now();
            let actor = self.actors.get_mut(responder).expect("identity resolved");
            match stcp::respond(&actor.endpoint, &mut actor.responder, &m, &env.from.id, now, &mut self.rng) {
                Ok(RespondOutcome::Proceed(p, m2)) => break (p, m2),
                Ok(RespondOutcome::Challenge(_)) => self.discard(responder, &env, "cookie invalid"),
                Err(e) => self.discard(responder, &env, e),
            }
        };
        self.post(
            &r_id,
            &i_id,
            EnvelopeKind::Handshake,
            &format!("{label} M2"),
            HandshakeMessage::M2(m2).to_bytes(),
        );

        let (_, msg) = self
            .await_handshake(initiator, |m| matches!(m, HandshakeMessage::M2(x) if x.session_id == sid))
            .ok_or("STCP M2 lost")?;
        let HandshakeMessage::M2(m2) = msg else { unreachable!() };
        let now = self.net.now();
        let (i_session, m3) = stcp::complete(pending, &self.actors[initiator].endpoint, &m2, &self.policy, now)
            .map_err(|e| format!("STCP M2 rejected: {e}"))?;
        self.post(
            &i_id,
            &r_id,
            EnvelopeKind::Handshake,
            &format!("{label} M3"),
            HandshakeMessage::M3(m3).to_bytes(),
        );

        let (_, msg) = self
            .await_handshake(responder, |m| matches!(m, HandshakeMessage::M3(x) if x.session_id == sid))
            .ok_or("STCP M3 lost")?;
        let HandshakeMessage::M3(m3) = msg else { unreachable!() };
        let r_session = stcp::finalize(rpending, &m3, &self.policy)
            .map_err(|e| format!("STCP M3 rejected: {e}"))?;

        if i_session.keys() != r_session.keys() {
            self.violation(Violation::KeyMismatch {
                initiator: i_id.to_string(),
                responder: r_id.to_string(),
            });
        }
        if let Some(keys) = i_session.keys() {
            for (dir, k) in [
                ("i2r", &keys.initiator_to_responder),
                ("r2i", &keys.responder_to_initiator),
            ] {
                self.secrets.add(format!("session-enc:{dir}"), k.encrypt.as_bytes());
                self.secrets.add(format!("session-mac:{dir}"), k.mac.as_bytes());
            }
        }
        for who in [initiator, responder] {
            if !self.platform_trusted(who) {
                self.violation(Violation::UntrustedPeerEstablished {
                    initiator: i_id.to_string(),
                    responder: r_id.to_string(),
                    untrusted: who.to_string(),
                });
            }
        }

        let id = self.next_channel;
        self.next_channel += 1;
        self.channels.insert(
            id,
            Channel {
                initiator: initiator.to_string(),
                responder: responder.to_string(),
                initiator_end: i_session,
                responder_end: r_session,
            },
        );
        Ok(id)
    }

    pub fn channel(&self, id: ChannelId) -> Option<&Channel> {
        self.channels.get(&id)
    }

    /// The far end of `chan` as seen from `me`.
    pub fn channel_peer(&self, chan: ChannelId, me: &str) -> Option<&StcpSession> {
        let ch = self.channels.get(&chan)?;
        if ch.initiator == me {
            Some(&ch.initiator_end)
        } else if ch.responder == me {
            Some(&ch.responder_end)
        } else {
            None
        }
    }

    pub fn close_channel(&mut self, chan: ChannelId) {
        if let Some(mut ch) = self.channels.remove(&chan) {
            ch.initiator_end.close();
            ch.responder_end.close();
        }
        self.standing.retain(|_, c| *c != chan);
    }

    /// Sends `payload` from `from` over `chan` and waits for the other end to
    /// accept a record. Records that fail the record layer are discarded.
    pub fn transmit(&mut self, chan: ChannelId, from: &str, label: &str, payload: &[u8]) -> Result<Vec<u8>, String> {
        let ch = self.channels.get_mut(&chan).ok_or("channel closed")?;
        let sender_is_initiator = ch.initiator == from;
        if !sender_is_initiator && ch.responder != from {
            return Err(format!("{from} is not an end of this channel"));
        }
        let to = if sender_is_initiator {
            ch.responder.clone()
        } else {
            ch.initiator.clone()
        };
        let end = if sender_is_initiator {
            &mut ch.initiator_end
        } else {
            &mut ch.responder_end
        };
        let record = end.send_record(payload).map_err(|e| e.to_string())?;
        let (from_id, to_id) = (
            self.identity(from).expect("channel ends exist"),
            self.identity(&to).expect("channel ends exist"),
        );
        self.post(&from_id, &to_id, EnvelopeKind::Record, label, record.to_bytes());

        loop {
            let env = self
                .await_delivery(&to)
                .ok_or_else(|| format!("'{label}' lost"))?;
            if env.kind != EnvelopeKind::Record {
                self.discard(&to, &env, "not a record");
                continue;
            }
            let rec = match Record::from_bytes(&env.body) {
                Ok(r) => r,
                Err(e) => {
                    self.discard(&to, &env, e);
                    continue;
                }
            };
            let ch = self.channels.get_mut(&chan).ok_or("channel closed")?;
            let end = if sender_is_initiator {
                &mut ch.responder_end
            } else {
                &mut ch.initiator_end
            };
            match end.recv_record(&rec) {
                Ok(p) => return Ok(p),
                Err(e) => self.discard(&to, &env, e),
            }
        }
    }
}

/// The TA image bytes of a reference snapshot (last component).
fn reference_code(p: &PlatformSnapshot) -> &[u8] {
    p.components.last().map(|c| c.image.as_slice()).unwrap_or_default()
}
