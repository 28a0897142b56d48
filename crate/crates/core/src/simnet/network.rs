//! Single-queue discrete-event network. Logical time advances by one tick per
//! step, or jumps to the delivery time of a delayed envelope.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::adversary::{Adversary, AdversaryProgram, Decision};
use crate::crypto::{self, Digest};
use crate::pki::{Identity, LogicalTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvelopeKind {
    Handshake,
    Record,
    PlaintextLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// `nth` counts honest sends from 0; adversary rules match on it.
    Honest { nth: u64 },
    Replay { of: u64 },
    Injected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: Identity,
    pub to: Identity,
    pub kind: EnvelopeKind,
    pub label: String,
    pub body: Vec<u8>,
    pub origin: Origin,
}

impl Envelope {
    pub fn body_digest(&self) -> Digest {
        crypto::hash(&self.body)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetCounters {
    pub sent: u64,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fate {
    Delivered,
    Dropped,
    Delayed,
}

/// One network event, for the transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireEvent {
    pub seq: u64,
    pub at: LogicalTime,
    pub from: Identity,
    pub to: Identity,
    pub kind: EnvelopeKind,
    pub label: String,
    pub body_digest: Digest,
    pub fate: Fate,
    pub adversary_action: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Delivered(Envelope),
    Dropped(u64),
    Idle,
}

struct Queued {
    env: Envelope,
    /// Rules were already applied (delayed envelopes are not re-matched).
    processed: bool,
}

pub struct Network {
    queue: BTreeMap<(LogicalTime, u64), Queued>,
    now: LogicalTime,
    next_seq: u64,
    next_nth: u64,
    counters: NetCounters,
    offline: BTreeSet<String>,
    adversary: Adversary,
    events: Vec<WireEvent>,
}

impl Network {
    pub fn new(program: AdversaryProgram) -> Self {
        Self {
            queue: BTreeMap::new(),
            now: 0,
            next_seq: 0,
            next_nth: 0,
            counters: NetCounters::default(),
            offline: BTreeSet::new(),
            adversary: Adversary::new(program),
            events: Vec::new(),
        }
    }

    pub fn now(&self) -> LogicalTime {
        self.now
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    pub fn in_flight(&self) -> u64 {
        self.queue.len() as u64
    }

    /// delivered + dropped + in_flight = sent + injected
    pub fn balanced(&self) -> bool {
        let c = self.counters;
        c.delivered + c.dropped + self.in_flight() == c.sent + c.injected
    }

    pub fn adversary(&self) -> &Adversary {
        &self.adversary
    }

    pub fn set_offline(&mut self, id: &str, offline: bool) {
        if offline {
            self.offline.insert(id.to_string());
        } else {
            self.offline.remove(id);
        }
    }

    pub fn is_offline(&self, id: &str) -> bool {
        self.offline.contains(id)
    }

    /// Wire events since the last call.
    pub fn take_events(&mut self) -> Vec<WireEvent> {
        std::mem::take(&mut self.events)
    }

    fn enqueue(&mut self, env: Envelope, at: LogicalTime, processed: bool) {
        self.queue.insert((at, env.seq), Queued { env, processed });
    }

    fn fresh_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn send(
        &mut self,
        from: &Identity,
        to: &Identity,
        kind: EnvelopeKind,
        label: &str,
        body: Vec<u8>,
    ) -> u64 {
        let seq = self.fresh_seq();
        let nth = self.next_nth;
        self.next_nth += 1;
        self.counters.sent += 1;
        let env = Envelope {
            seq,
            from: from.clone(),
            to: to.clone(),
            kind,
            label: label.to_string(),
            body,
            origin: Origin::Honest { nth },
        };
        self.enqueue(env, self.now, false);
        seq
    }

    fn log(&mut self, env: &Envelope, fate: Fate, action: Option<String>) {
        self.events.push(WireEvent {
            seq: env.seq,
            at: self.now,
            from: env.from.clone(),
            to: env.to.clone(),
            kind: env.kind,
            label: env.label.clone(),
            body_digest: env.body_digest(),
            fate,
            adversary_action: action,
        });
    }

    /// Pops the next deliverable envelope and runs it through the adversary.
    pub fn step(&mut self) -> StepResult {
        loop {
            let Some(((at, _), queued)) = self.queue.pop_first() else {
                return StepResult::Idle;
            };
            self.now = (self.now + 1).max(at);
            let Queued { mut env, processed } = queued;

            let mut note = None;
            if let (false, Origin::Honest { nth }) = (processed, env.origin) {
                match self.adversary.decide(&mut env, nth) {
                    Decision::Deliver { note: n } => note = n,
                    Decision::Drop => {
                        self.counters.dropped += 1;
                        self.log(&env, Fate::Dropped, Some("drop".into()));
                        return StepResult::Dropped(env.seq);
                    }
                    Decision::Delay(ticks) => {
                        self.log(&env, Fate::Delayed, Some(format!("delay({ticks})")));
                        let when = self.now + ticks;
                        self.enqueue(env, when, true);
                        continue;
                    }
                    Decision::Replay(after) => {
                        let mut copy = env.clone();
                        copy.seq = self.fresh_seq();
                        copy.origin = Origin::Replay { of: env.seq };
                        self.counters.injected += 1;
                        self.enqueue(copy, self.now + after.max(1), true);
                        note = Some(format!("replayed(+{after})"));
                    }
                    Decision::Inject(junk) => {
                        let forged = Envelope {
                            seq: self.fresh_seq(),
                            body: junk,
                            origin: Origin::Injected,
                            label: format!("{} (injected)", env.label),
                            ..env.clone()
                        };
                        self.counters.injected += 1;
                        self.enqueue(forged, self.now + 1, true);
                        note = Some("inject".into());
                    }
                }
            }
            if let Origin::Replay { of } = env.origin {
                note = Some(format!("replay-of({of})"));
            } else if env.origin == Origin::Injected {
                note = Some("injected".into());
            }

            if self.offline.contains(&env.to.id) {
                self.counters.dropped += 1;
                self.log(&env, Fate::Dropped, Some("recipient-offline".into()));
                return StepResult::Dropped(env.seq);
            }
            self.counters.delivered += 1;
            self.log(&env, Fate::Delivered, note);
            return StepResult::Delivered(env);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::Role;
    use crate::simnet::adversary::{Action, Rule, RuleMatch};

    fn ids() -> (Identity, Identity) {
        (Identity::new("a", Role::Tsm), Identity::new("b", Role::Ta))
    }

    #[test]
    fn empty_queue_is_idle() {
        let mut net = Network::new(AdversaryProgram::honest());
        assert_eq!(net.step(), StepResult::Idle);
        assert!(net.balanced());
    }

    #[test]
    fn delivers_in_send_order() {
        let (a, b) = ids();
        let mut net = Network::new(AdversaryProgram::honest());
        net.send(&a, &b, EnvelopeKind::Record, "1", vec![1]);
        net.send(&b, &a, EnvelopeKind::Record, "2", vec![2]);
        assert_eq!(net.in_flight(), 2);
        assert!(net.balanced());
        let StepResult::Delivered(e) = net.step() else { panic!() };
        assert_eq!(e.body, vec![1]);
        let StepResult::Delivered(e) = net.step() else { panic!() };
        assert_eq!(e.body, vec![2]);
        assert!(net.balanced());
    }

    #[test]
    fn drop_all_drops_everything() {
        let (a, b) = ids();
        let rule = Rule {
            when: RuleMatch::default(),
            action: Action::Drop,
        };
        let mut net = Network::new(AdversaryProgram::with_rules(vec![rule], 0));
        net.send(&a, &b, EnvelopeKind::Handshake, "x", vec![1]);
        assert_eq!(net.step(), StepResult::Dropped(0));
        assert_eq!(net.step(), StepResult::Idle);
        assert_eq!(net.counters().dropped, 1);
        assert!(net.balanced());
    }

    #[test]
    fn replay_delivers_twice_and_keeps_counters_balanced() {
        let (a, b) = ids();
        let rule = Rule {
            when: RuleMatch::default(),
            action: Action::Replay { after: 2 },
        };
        let mut net = Network::new(AdversaryProgram::with_rules(vec![rule], 0));
        net.send(&a, &b, EnvelopeKind::Record, "x", vec![7]);
        let StepResult::Delivered(first) = net.step() else { panic!() };
        let StepResult::Delivered(second) = net.step() else { panic!() };
        assert_eq!(first.body, second.body);
        assert_eq!(second.origin, Origin::Replay { of: 0 });
        assert_eq!(net.step(), StepResult::Idle);
        assert_eq!(net.counters().injected, 1);
        assert!(net.balanced());
    }

    #[test]
    fn delay_lets_later_messages_overtake() {
        let (a, b) = ids();
        let rule = Rule {
            when: RuleMatch {
                nth: Some(0),
                ..Default::default()
            },
            action: Action::Delay { ticks: 5 },
        };
        let mut net = Network::new(AdversaryProgram::with_rules(vec![rule], 0));
        net.send(&a, &b, EnvelopeKind::Record, "first", vec![1]);
        net.send(&a, &b, EnvelopeKind::Record, "second", vec![2]);
        let StepResult::Delivered(e) = net.step() else { panic!() };
        assert_eq!(e.label, "second");
        let StepResult::Delivered(e) = net.step() else { panic!() };
        assert_eq!(e.label, "first");
        assert!(net.now() >= 5);
    }

    #[test]
    fn offline_recipient_drops() {
        let (a, b) = ids();
        let mut net = Network::new(AdversaryProgram::honest());
        net.set_offline("b", true);
        net.send(&a, &b, EnvelopeKind::Record, "x", vec![]);
        assert_eq!(net.step(), StepResult::Dropped(0));
        assert!(net.balanced());
    }
}
