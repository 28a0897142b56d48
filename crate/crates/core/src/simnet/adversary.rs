//! Programmable Dolev-Yao adversary. It sees and rewrites every honest
//! envelope but holds no keys unless a scenario grants them.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Envelope, EnvelopeKind};
use crate::crypto::{seeded_rng, SimRng};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleMatch {
    /// Index of the honest envelope among all honest sends, from 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nth: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EnvelopeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    FlipBit,
    Truncate,
    Duplicate,
    /// Overwrites a span with bytes from an earlier observed envelope.
    Splice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum Action {
    Drop,
    Delay { ticks: u64 },
    /// Delivers the original and re-sends a copy `after` ticks later.
    Replay { after: u64 },
    Tamper { mutation: Mutation },
    /// Delivers the original and injects `len` random bytes to the same
    /// recipient, claiming the same sender.
    Inject { len: u32 },
    Observe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(flatten)]
    pub when: RuleMatch,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryProgram {
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub rng_seed: u64,
    /// Actors whose long-term attestation secrets the adversary holds.
    #[serde(default)]
    pub compromise: Vec<String>,
}

impl AdversaryProgram {
    pub fn honest() -> Self {
        Self::default()
    }

    pub fn with_rules(rules: Vec<Rule>, rng_seed: u64) -> Self {
        Self {
            rules,
            rng_seed,
            compromise: Vec::new(),
        }
    }
}

/// What the adversary decided for one envelope, after mutation.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Deliver { note: Option<String> },
    Drop,
    Delay(u64),
    Replay(u64),
    Inject(Vec<u8>),
}

const OBSERVED_KEEP: usize = 64;

#[derive(Debug)]
pub struct Adversary {
    program: AdversaryProgram,
    rng: SimRng,
    observed: VecDeque<Vec<u8>>,
    /// (rule index, envelope seq) for every rule that fired.
    pub fired: Vec<(usize, u64)>,
}

impl Adversary {
    pub fn new(program: AdversaryProgram) -> Self {
        let rng = seeded_rng(program.rng_seed);
        Self {
            program,
            rng,
            observed: VecDeque::new(),
            fired: Vec::new(),
        }
    }

    pub fn program(&self) -> &AdversaryProgram {
        &self.program
    }

    fn matches(&mut self, m: &RuleMatch, env: &Envelope, nth: u64) -> bool {
        let static_ok = m.nth.is_none_or(|n| n == nth)
            && m.from.as_ref().is_none_or(|f| *f == env.from.id)
            && m.to.as_ref().is_none_or(|t| *t == env.to.id)
            && m.kind.is_none_or(|k| k == env.kind)
            && m.label_contains
                .as_ref()
                .is_none_or(|l| env.label.contains(l.as_str()));
        // Only draw randomness when everything else matched, so adding a
        // rule never perturbs the decisions of rules that did not apply.
        static_ok && m.probability.is_none_or(|p| self.rng.gen_bool(p.clamp(0.0, 1.0)))
    }

    /// Applies the first matching rule. May rewrite `env.body`.
    pub fn decide(&mut self, env: &mut Envelope, nth: u64) -> Decision {
        let rule = (0..self.program.rules.len()).find(|&i| {
            let m = self.program.rules[i].when.clone();
            self.matches(&m, env, nth)
        });
        let decision = match rule {
            None => Decision::Deliver { note: None },
            Some(i) => {
                self.fired.push((i, env.seq));
                match self.program.rules[i].action.clone() {
                    Action::Drop => Decision::Drop,
                    Action::Delay { ticks } => Decision::Delay(ticks),
                    Action::Replay { after } => Decision::Replay(after),
                    Action::Observe => Decision::Deliver {
                        note: Some("observe".into()),
                    },
                    Action::Inject { len } => {
                        let mut junk = vec![0u8; len as usize];
                        self.rng.fill(junk.as_mut_slice());
                        Decision::Inject(junk)
                    }
                    Action::Tamper { mutation } => {
                        let note = self.mutate(&mut env.body, mutation);
                        Decision::Deliver { note: Some(note) }
                    }
                }
            }
        };
        self.observed.push_back(env.body.clone());
        if self.observed.len() > OBSERVED_KEEP {
            self.observed.pop_front();
        }
        decision
    }

    fn mutate(&mut self, body: &mut Vec<u8>, mutation: Mutation) -> String {
        if body.is_empty() {
            body.push(self.rng.gen());
            return "tamper(grow-empty)".into();
        }
        match mutation {
            Mutation::FlipBit => {
                let bit = self.rng.gen_range(0..body.len() * 8);
                body[bit / 8] ^= 1 << (bit % 8);
                format!("tamper(flip-bit@{bit})")
            }
            Mutation::Truncate => {
                let keep = self.rng.gen_range(0..body.len());
                body.truncate(keep);
                format!("tamper(truncate@{keep})")
            }
            Mutation::Duplicate => {
                let start = self.rng.gen_range(0..body.len());
                let end = self.rng.gen_range(start + 1..=body.len());
                let chunk = body[start..end].to_vec();
                body.splice(end..end, chunk);
                format!("tamper(duplicate {start}..{end})")
            }
            Mutation::Splice => {
                let donor = if self.observed.is_empty() {
                    let mut junk = vec![0u8; 16];
                    self.rng.fill(junk.as_mut_slice());
                    junk
                } else {
                    let i = self.rng.gen_range(0..self.observed.len());
                    self.observed[i].clone()
                };
                let at = self.rng.gen_range(0..body.len());
                let n = (body.len() - at).min(donor.len()).max(1);
                let from = self.rng.gen_range(0..=donor.len().saturating_sub(n));
                let k = n.min(donor.len());
                body[at..at + k].copy_from_slice(&donor[from..from + k]);
                format!("tamper(splice@{at}+{n})")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::{Identity, Role};

    fn env(label: &str) -> Envelope {
        Envelope {
            seq: 0,
            from: Identity::new("a", Role::Tsm),
            to: Identity::new("b", Role::Ta),
            kind: EnvelopeKind::Record,
            label: label.into(),
            body: vec![1, 2, 3, 4],
            origin: super::super::network::Origin::Honest { nth: 0 },
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let program = AdversaryProgram::with_rules(
            vec![
                Rule {
                    when: RuleMatch {
                        label_contains: Some("Ack".into()),
                        ..Default::default()
                    },
                    action: Action::Drop,
                },
                Rule {
                    when: RuleMatch::default(),
                    action: Action::Delay { ticks: 3 },
                },
            ],
            1,
        );
        let mut adv = Adversary::new(program);
        assert_eq!(adv.decide(&mut env("4. Ack."), 0), Decision::Drop);
        assert_eq!(adv.decide(&mut env("2. Go"), 1), Decision::Delay(3));
        assert_eq!(adv.fired, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn tamper_changes_the_body_deterministically() {
        let rules = vec![Rule {
            when: RuleMatch::default(),
            action: Action::Tamper {
                mutation: Mutation::FlipBit,
            },
        }];
        let mut a = Adversary::new(AdversaryProgram::with_rules(rules.clone(), 9));
        let mut b = Adversary::new(AdversaryProgram::with_rules(rules, 9));
        let (mut e1, mut e2) = (env("x"), env("x"));
        a.decide(&mut e1, 0);
        b.decide(&mut e2, 0);
        assert_ne!(e1.body, vec![1, 2, 3, 4]);
        assert_eq!(e1.body, e2.body);
    }

    #[test]
    fn every_mutation_alters_the_body() {
        for (i, m) in [Mutation::FlipBit, Mutation::Truncate, Mutation::Duplicate]
            .into_iter()
            .enumerate()
        {
            let mut adv = Adversary::new(AdversaryProgram::with_rules(
                vec![Rule {
                    when: RuleMatch::default(),
                    action: Action::Tamper { mutation: m },
                }],
                i as u64,
            ));
            let mut e = env("x");
            adv.decide(&mut e, 0);
            assert_ne!(e.body, vec![1, 2, 3, 4], "{m:?}");
        }
    }

    #[test]
    fn rules_parse_from_toml() {
        let program: AdversaryProgram = toml::from_str(
            r#"
            rng_seed = 4
            compromise = ["ta-b"]
            [[rules]]
            nth = 12
            action = "drop"
            [[rules]]
            label_contains = "Transfer"
            action = "tamper"
            mutation = "flip-bit"
            "#,
        )
        .unwrap();
        assert_eq!(program.rules.len(), 2);
        assert_eq!(program.rules[0].when.nth, Some(12));
        assert_eq!(
            program.rules[1].action,
            Action::Tamper {
                mutation: Mutation::FlipBit
            }
        );
    }
}
