//! Randomized attack campaigns over a scenario. Each run gets its own world
//! and its own adversary rules derived from (campaign seed, run index), so
//! runs are independent and can execute in parallel.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adversary::{Action, AdversaryProgram, Mutation, Rule, RuleMatch};
use super::invariants::Violation;
use crate::crypto::seeded_rng;
use crate::scenario::{Scenario, ScenarioRun};
use crate::simnet::world::WorldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Replay,
    Tamper,
    Drop,
    Mixed,
}

impl FromStr for AttackFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" => Ok(AttackFamily::Replay),
            "tamper" => Ok(AttackFamily::Tamper),
            "drop" => Ok(AttackFamily::Drop),
            "mixed" => Ok(AttackFamily::Mixed),
            _ => Err(format!("unknown attack family {s:?} (replay, tamper, drop, mixed)")),
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackFamily::Replay => "replay",
            AttackFamily::Tamper => "tamper",
            AttackFamily::Drop => "drop",
            AttackFamily::Mixed => "mixed",
        })
    }
}

const MUTATIONS: [Mutation; 4] = [
    Mutation::FlipBit,
    Mutation::Truncate,
    Mutation::Duplicate,
    Mutation::Splice,
];
const MAX_RULES: usize = 4;

/// SplitMix64 finalizer, to spread (seed, index) pairs over the seed space.
fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random rules targeting honest envelopes `0..envelopes`.
pub fn random_rules(family: AttackFamily, envelopes: u64, seed: u64) -> Vec<Rule> {
    let mut rng = seeded_rng(seed);
    let n = rng.gen_range(1..=MAX_RULES);
    (0..n)
        .map(|_| {
            let family = match family {
                AttackFamily::Mixed => *[AttackFamily::Replay, AttackFamily::Tamper, AttackFamily::Drop]
                    .choose(&mut rng)
                    .expect("non-empty"),
                f => f,
            };
            let action = match family {
                AttackFamily::Replay => Action::Replay {
                    after: rng.gen_range(0..6),
                },
                AttackFamily::Tamper => Action::Tamper {
                    mutation: *MUTATIONS.choose(&mut rng).expect("non-empty"),
                },
                AttackFamily::Drop => Action::Drop,
                AttackFamily::Mixed => unreachable!("resolved above"),
            };
            // Now and then a drop becomes a delay and a replay an injection.
            let action = match (rng.gen_range(0..8), action) {
                (0, Action::Drop) => Action::Delay {
                    ticks: rng.gen_range(1..10),
                },
                (1, Action::Replay { .. }) => Action::Inject {
                    len: rng.gen_range(0..200),
                },
                (_, action) => action,
            };
            Rule {
                when: RuleMatch {
                    nth: Some(rng.gen_range(0..envelopes.max(1))),
                    ..Default::default()
                },
                action,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub procedure: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub index: u64,
    pub adversary_seed: u64,
    pub rules: Vec<Rule>,
    pub outcomes: Vec<OutcomeSummary>,
    pub violations: Vec<Violation>,
    /// Smallest rule list that still produces a violation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimized: Option<Vec<Rule>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub scenario: String,
    pub family: AttackFamily,
    pub runs: u64,
    pub seed: u64,
    pub baseline_envelopes: u64,
    pub runs_with_violations: u64,
    pub violation_counts: BTreeMap<String, u64>,
    pub status_counts: BTreeMap<String, u64>,
    /// Transcript of the lowest-indexed violating run, replayed with its
    /// minimized rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimized_trace: Option<MinimizedTrace>,
    pub results: Vec<RunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizedTrace {
    pub index: u64,
    pub rules: Vec<Rule>,
    pub transcript: Vec<String>,
}

impl CampaignReport {
    pub fn clean(&self) -> bool {
        self.runs_with_violations == 0
    }
}

fn summarize(run: &ScenarioRun) -> Vec<OutcomeSummary> {
    run.outcomes
        .iter()
        .map(|o| OutcomeSummary {
            procedure: o.kind.to_string(),
            status: o.status.name().to_string(),
            step: match &o.status {
                crate::procedures::Status::Aborted { step, .. } => Some(step.to_string()),
                _ => None,
            },
        })
        .collect()
}

/// The scenario with `extra` rules appended after its own.
fn attacked(scenario: &Scenario, extra: &[Rule], rng_seed: u64) -> Scenario {
    let base = &scenario.config.adversary;
    let mut rules = base.rules.clone();
    rules.extend_from_slice(extra);
    scenario.clone().with_adversary(AdversaryProgram {
        rules,
        rng_seed,
        compromise: base.compromise.clone(),
    })
}

fn violations_with(scenario: &Scenario, rules: &[Rule], rng_seed: u64) -> Result<Vec<Violation>, WorldError> {
    Ok(attacked(scenario, rules, rng_seed).run()?.world.violations)
}

/// Greedy rule removal: drop each rule in turn and keep the removal whenever
/// some violation remains.
pub fn shrink(scenario: &Scenario, rules: &[Rule], rng_seed: u64) -> Result<Vec<Rule>, WorldError> {
    let mut kept = rules.to_vec();
    let mut i = 0;
    while i < kept.len() {
        let mut candidate = kept.clone();
        candidate.remove(i);
        if violations_with(scenario, &candidate, rng_seed)?.is_empty() {
            i += 1;
        } else {
            kept = candidate;
        }
    }
    Ok(kept)
}

/// Honest envelope count of the scenario's baseline run.
pub fn baseline_envelopes(scenario: &Scenario) -> Result<u64, WorldError> {
    Ok(scenario.run()?.world.net.counters().sent)
}

pub fn run_campaign(
    scenario: &Scenario,
    family: AttackFamily,
    runs: u64,
    seed: u64,
) -> Result<CampaignReport, WorldError> {
    let envelopes = baseline_envelopes(scenario)?;
    let results: Vec<RunSummary> = (0..runs)
        .into_par_iter()
        .map(|index| -> Result<RunSummary, WorldError> {
            let adversary_seed = derive_seed(seed, index);
            let rules = random_rules(family, envelopes, adversary_seed);
            let run = attacked(scenario, &rules, adversary_seed).run()?;
            let violations = run.world.violations.clone();
            let minimized = if violations.is_empty() {
                None
            } else {
                Some(shrink(scenario, &rules, adversary_seed)?)
            };
            Ok(RunSummary {
                index,
                adversary_seed,
                rules,
                outcomes: summarize(&run),
                violations,
                minimized,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut violation_counts = BTreeMap::new();
    let mut status_counts = BTreeMap::new();
    for r in &results {
        for v in &r.violations {
            *violation_counts.entry(v.name().to_string()).or_insert(0) += 1;
        }
        for o in &r.outcomes {
            *status_counts
                .entry(format!("{}:{}", o.procedure, o.status))
                .or_insert(0) += 1;
        }
    }
    let minimized_trace = match results.iter().find(|r| !r.violations.is_empty()) {
        Some(r) => {
            let rules = r.minimized.clone().unwrap_or_default();
            let run = attacked(scenario, &rules, r.adversary_seed).run()?;
            Some(MinimizedTrace {
                index: r.index,
                rules,
                transcript: run.world.transcript.lines().to_vec(),
            })
        }
        None => None,
    };
    Ok(CampaignReport {
        scenario: scenario.config.name.clone(),
        family,
        runs,
        seed,
        baseline_envelopes: envelopes,
        runs_with_violations: results.iter().filter(|r| !r.violations.is_empty()).count() as u64,
        violation_counts,
        status_counts,
        minimized_trace,
        results,
    })
}

/// One run per honest envelope position, dropping exactly that envelope.
pub fn drop_sweep(scenario: &Scenario) -> Result<Vec<(u64, ScenarioRun)>, WorldError> {
    drop_sweep_after(scenario, 0)
}

/// Like `drop_sweep`, but leaves the envelopes of the first `skip`
/// procedures alone, so set-up steps (a backup before a restore, say) always
/// complete.
pub fn drop_sweep_after(scenario: &Scenario, skip: usize) -> Result<Vec<(u64, ScenarioRun)>, WorldError> {
    let envelopes = baseline_envelopes(scenario)?;
    let mut prefix = scenario.clone();
    prefix.procedures.truncate(skip);
    let first = if skip == 0 { 0 } else { baseline_envelopes(&prefix)? };
    (first..envelopes)
        .into_par_iter()
        .map(|nth| {
            let rule = Rule {
                when: RuleMatch {
                    nth: Some(nth),
                    ..Default::default()
                },
                action: Action::Drop,
            };
            Ok((nth, attacked(scenario, &[rule], 0).run()?))
        })
        .collect()
}
