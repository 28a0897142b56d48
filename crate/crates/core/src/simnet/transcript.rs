//! JSON-lines audit transcript. Every line is an object tagged by `type`.

use serde::{Deserialize, Serialize};

use super::network::{EnvelopeKind, Fate, WireEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Line {
    Header {
        scenario: String,
        seed: u64,
    },
    Wire {
        seq: u64,
        at: u64,
        from: String,
        to: String,
        kind: EnvelopeKind,
        label: String,
        body_hex_digest: String,
        fate: Fate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        adversary_action: Option<String>,
    },
    Step {
        seq: u64,
        procedure: String,
        run: u64,
        step: String,
        from: String,
        to: String,
        label: String,
        at: u64,
        payload_digest: String,
    },
    Outcome {
        procedure: String,
        run: u64,
        status: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
    },
    Event {
        at: u64,
        actor: String,
        what: String,
    },
    Violation {
        at: u64,
        detail: serde_json::Value,
    },
}

impl From<&WireEvent> for Line {
    fn from(e: &WireEvent) -> Self {
        Line::Wire {
            seq: e.seq,
            at: e.at,
            from: e.from.to_string(),
            to: e.to.to_string(),
            kind: e.kind,
            label: e.label.clone(),
            body_hex_digest: e.body_digest.to_hex(),
            fate: e.fate,
            adversary_action: e.adversary_action.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    lines: Vec<String>,
    step_seq: u64,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, line: &Line) {
        self.lines
            .push(serde_json::to_string(line).expect("transcript lines always serialize"));
    }

    /// Next sequence number for a step line.
    pub fn next_step_seq(&mut self) -> u64 {
        let s = self.step_seq;
        self.step_seq += 1;
        s
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// The whole transcript, newline-terminated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

pub fn parse(text: &str) -> Result<Vec<Line>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ParseError {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Something `audit` found wrong with a transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Problem {
    pub line: usize,
    pub what: String,
}

/// Checks a parsed transcript: step order against the figures (a full match
/// for successes, a prefix for aborts), credential-carrying steps never
/// involving the TSM, step sequence numbers, and recorded violations.
pub fn audit(lines: &[Line]) -> Vec<Problem> {
    use std::collections::BTreeMap;

    use crate::procedures::{figures, ProcedureKind, Step};

    let mut problems = Vec::new();
    let mut open: BTreeMap<(String, u64), Vec<(Step, String)>> = BTreeMap::new();
    let mut last_seq = None;
    let tsm = |who: &str| who.starts_with("TSM:");
    let carries = |procedure: &str, label: &str| {
        figures::CREDENTIAL_CARRYING
            .iter()
            .any(|(k, l)| k.as_str() == procedure && *l == label)
    };
    let wire_carries = |label: &str| {
        figures::CREDENTIAL_CARRYING
            .iter()
            .any(|(_, l)| label.split_once(". ").is_some_and(|(_, rest)| rest == *l))
    };

    for (i, line) in lines.iter().enumerate() {
        let n = i + 1;
        let mut flag = |what: String| problems.push(Problem { line: n, what });
        match line {
            Line::Step {
                seq,
                procedure,
                run,
                step,
                from,
                to,
                label,
                ..
            } => {
                if last_seq.is_some_and(|l| *seq <= l) {
                    flag(format!("step seq {seq} out of order"));
                }
                last_seq = Some(*seq);
                if carries(procedure, label) && (tsm(from) || tsm(to)) {
                    flag(format!("{procedure} '{label}' involves the TSM ({from} -> {to})"));
                }
                match step.parse::<Step>() {
                    Ok(s) => open
                        .entry((procedure.clone(), *run))
                        .or_default()
                        .push((s, label.clone())),
                    Err(e) => flag(e),
                }
            }
            Line::Wire { from, to, label, .. } if wire_carries(label) && (tsm(from) || tsm(to)) => {
                flag(format!("wire '{label}' involves the TSM ({from} -> {to})"));
            }
            Line::Outcome {
                procedure,
                run,
                status,
                step,
                ..
            } => {
                let steps = open.remove(&(procedure.clone(), *run)).unwrap_or_default();
                let Ok(kind) = procedure.parse::<ProcedureKind>() else {
                    flag(format!("unknown procedure {procedure}"));
                    continue;
                };
                let seen: Vec<(Step, &str)> = steps.iter().map(|(s, l)| (*s, l.as_str())).collect();
                match status.as_str() {
                    "success" => {
                        if !figures::conforms(kind, &seen) {
                            flag(format!("{procedure} run {run} succeeded with steps out of figure order"));
                        }
                    }
                    "aborted" => {
                        let golden = figures::labels(kind);
                        let body: &[(Step, &str)] = match (kind, seen.as_slice()) {
                            (ProcedureKind::Reporting, [(Step::L('A'), "STCP"), rest @ ..]) => rest,
                            (_, all) => all,
                        };
                        if golden.is_empty() {
                            continue;
                        }
                        if !golden.starts_with(body) {
                            flag(format!("{procedure} run {run} aborted after steps out of figure order"));
                        }
                        if let Some(at) = step.as_deref().and_then(|s| s.parse::<Step>().ok()) {
                            if body.iter().any(|(s, _)| *s >= at) {
                                flag(format!("{procedure} run {run} recorded steps at or past abort step {at}"));
                            }
                        }
                    }
                    "deferred" => {}
                    other => flag(format!("unknown status {other}")),
                }
            }
            Line::Violation { detail, .. } => {
                flag(format!("violation recorded: {detail}"));
            }
            _ => {}
        }
    }
    for ((procedure, run), _) in open {
        problems.push(Problem {
            line: lines.len(),
            what: format!("{procedure} run {run} has steps but no outcome"),
        });
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let mut t = Transcript::new();
        t.push(&Line::Header {
            scenario: "s".into(),
            seed: 1,
        });
        t.push(&Line::Event {
            at: 3,
            actor: "TA:a".into(),
            what: "wiped".into(),
        });
        let parsed = parse(&t.render()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(t.lines()[0].starts_with(r#"{"type":"header""#));
    }

    fn run_text(procs: &str) -> String {
        let text = format!(
            "seed = 5\nrevocation_mode = \"blacklist\"\n\
             [[actors]]\nid = \"ca\"\nrole = \"CA\"\n\
             [[actors]]\nid = \"tsm\"\nrole = \"TSM\"\n\
             [[actors]]\nid = \"ba\"\nrole = \"BA\"\n\
             [[actors]]\nid = \"a\"\nrole = \"TA\"\ncredentials = [\"c\"]\n\
             [[actors]]\nid = \"b\"\nrole = \"TA\"\n{procs}"
        );
        let run = crate::scenario::Scenario::parse(&text).unwrap().run().unwrap();
        run.world.transcript.render()
    }

    #[test]
    fn audit_accepts_real_runs() {
        let text = run_text(
            "[[procedures]]\nkind = \"backup\"\nta = \"a\"\n\
             [[procedures]]\nkind = \"migration\"\nfrom = \"a\"\nto = \"b\"\n",
        );
        assert_eq!(audit(&parse(&text).unwrap()), vec![]);
    }

    #[test]
    fn audit_flags_reordered_steps_and_tsm_exposure() {
        let text = run_text("[[procedures]]\nkind = \"migration\"\nfrom = \"a\"\nto = \"b\"\n");
        let mut lines = parse(&text).unwrap();
        let steps: Vec<usize> = (0..lines.len())
            .filter(|i| matches!(lines[*i], Line::Step { .. }))
            .collect();
        lines.swap(steps[3], steps[4]);
        assert!(!audit(&lines).is_empty());

        let mut lines = parse(&text).unwrap();
        for l in &mut lines {
            if let Line::Step { label, from, .. } = l {
                if label == "Transfer C" {
                    *from = "TSM:tsm".into();
                }
            }
        }
        let problems = audit(&lines);
        assert!(problems.iter().any(|p| p.what.contains("involves the TSM")), "{problems:?}");
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = parse("{\"type\":\"header\",\"scenario\":\"s\",\"seed\":1}\nnot json\n").unwrap_err();
        assert_eq!(err.line, 2);
    }
}
