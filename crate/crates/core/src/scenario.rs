//! TOML scenario files: actors, an optional adversary program and a list of
//! procedures to run in order.
//!
//! ```toml
//! name = "migration"
//! seed = 7
//!
//! [[actors]]
//! id = "ca"
//! role = "CA"
//!
//! [[actors]]
//! id = "tsm"
//! role = "TSM"
//!
//! [[actors]]
//! id = "phone"
//! role = "TA"
//! credentials = ["transit-pass"]
//!
//! [[actors]]
//! id = "tablet"
//! role = "TA"
//! tee = "enclave"
//!
//! [[procedures]]
//! kind = "migration"
//! from = "phone"
//! to = "tablet"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;
use toml::Spanned;

use crate::actors::RevocationMode;
use crate::attest::TeeFlavor;
use crate::pki::Role;
use crate::procedures::{self, ProcedureOutcome, ProcedureSpec, Status};
use crate::simnet::adversary::AdversaryProgram;
use crate::simnet::world::{ActorSpec, World, WorldConfig, WorldError};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    seed: Option<u64>,
    revocation_mode: Option<RevocationMode>,
    #[serde(default)]
    actors: Vec<RawActor>,
    #[serde(default)]
    procedures: Vec<RawProcedure>,
    adversary: Option<AdversaryProgram>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActor {
    id: Spanned<String>,
    role: Role,
    device: Option<String>,
    tee: Option<TeeFlavor>,
    code: Option<String>,
    #[serde(default)]
    credentials: Vec<String>,
    #[serde(default)]
    tampered: bool,
    #[serde(default)]
    malicious: bool,
    #[serde(default)]
    offline: bool,
}

type Ref = Option<Spanned<String>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProcedure {
    kind: Spanned<String>,
    tsm: Ref,
    ta: Ref,
    from: Ref,
    to: Ref,
    ra: Ref,
    ba: Ref,
    ma: Ref,
    credential: Option<String>,
    credentials: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: WorldConfig,
    pub procedures: Vec<ProcedureSpec>,
}

struct Resolver<'a> {
    text: &'a str,
    roles: BTreeMap<String, Role>,
}

impl Resolver<'_> {
    fn line(&self, offset: usize) -> usize {
        self.text[..offset.min(self.text.len())].matches('\n').count() + 1
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            line: self.line(offset),
            message: message.into(),
        }
    }

    fn unique(&self, role: Role) -> Vec<&String> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(id, _)| id)
            .collect()
    }

    /// The actor named by `field`, or the only actor with `role` when absent.
    fn actor(&self, field: &Ref, name: &str, role: Role, at: usize) -> Result<String, ScenarioError> {
        match field {
            Some(s) => {
                let id = s.get_ref();
                match self.roles.get(id) {
                    None => Err(self.err(s.span().start, format!("{name}: no actor named {id:?}"))),
                    Some(r) if *r != role => Err(self.err(
                        s.span().start,
                        format!("{name}: {id:?} is a {}, expected {}", r.as_str(), role.as_str()),
                    )),
                    Some(_) => Ok(id.clone()),
                }
            }
            None => match self.unique(role).as_slice() {
                [one] => Ok((*one).clone()),
                [] => Err(self.err(at, format!("{name}: no {} in scenario", role.as_str()))),
                _ => Err(self.err(
                    at,
                    format!("{name}: several {}s, name one explicitly", role.as_str()),
                )),
            },
        }
    }

    fn optional(&self, field: &Ref, name: &str, role: Role, at: usize) -> Result<Option<String>, ScenarioError> {
        if field.is_none() && self.unique(role).len() != 1 {
            return Ok(None);
        }
        self.actor(field, name, role, at).map(Some)
    }
}

fn reject_extra(r: &Resolver<'_>, p: &RawProcedure, allowed: &[&str]) -> Result<(), ScenarioError> {
    let fields: [(&str, &Ref); 7] = [
        ("tsm", &p.tsm),
        ("ta", &p.ta),
        ("from", &p.from),
        ("to", &p.to),
        ("ra", &p.ra),
        ("ba", &p.ba),
        ("ma", &p.ma),
    ];
    for (name, value) in fields {
        if let Some(v) = value {
            if !allowed.contains(&name) {
                return Err(r.err(
                    v.span().start,
                    format!("{name} does not apply to {}", p.kind.get_ref()),
                ));
            }
        }
    }
    Ok(())
}

fn resolve(r: &Resolver<'_>, p: &RawProcedure) -> Result<ProcedureSpec, ScenarioError> {
    let at = p.kind.span().start;
    let need_credential = || {
        p.credential
            .clone()
            .ok_or_else(|| r.err(at, format!("{} needs credential", p.kind.get_ref())))
    };
    Ok(match p.kind.get_ref().as_str() {
        "migration" => {
            reject_extra(r, p, &["tsm", "from", "to"])?;
            let (Some(_), Some(_)) = (&p.from, &p.to) else {
                return Err(r.err(at, "migration needs from and to"));
            };
            ProcedureSpec::Migration {
                tsm: r.actor(&p.tsm, "tsm", Role::Tsm, at)?,
                from: r.actor(&p.from, "from", Role::Ta, at)?,
                to: r.actor(&p.to, "to", Role::Ta, at)?,
            }
        }
        "revocation" => {
            reject_extra(r, p, &["tsm", "ta", "ra"])?;
            ProcedureSpec::Revocation {
                tsm: r.actor(&p.tsm, "tsm", Role::Tsm, at)?,
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
                ra: r.actor(&p.ra, "ra", Role::Ra, at)?,
            }
        }
        "register-revoked" => {
            reject_extra(r, p, &["ma", "ra"])?;
            ProcedureSpec::RegisterRevoked {
                ma: r.actor(&p.ma, "ma", Role::Ma, at)?,
                ra: r.actor(&p.ra, "ra", Role::Ra, at)?,
                credentials: p
                    .credentials
                    .clone()
                    .ok_or_else(|| r.err(at, "register-revoked needs credentials"))?,
            }
        }
        "backup" => {
            reject_extra(r, p, &["tsm", "ta", "ba"])?;
            ProcedureSpec::Backup {
                tsm: r.actor(&p.tsm, "tsm", Role::Tsm, at)?,
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
                ba: r.actor(&p.ba, "ba", Role::Ba, at)?,
            }
        }
        "update" => {
            reject_extra(r, p, &["ma", "tsm", "ta", "ra"])?;
            ProcedureSpec::Update {
                ma: r.actor(&p.ma, "ma", Role::Ma, at)?,
                tsm: r.actor(&p.tsm, "tsm", Role::Tsm, at)?,
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
                ra: r.actor(&p.ra, "ra", Role::Ra, at)?,
                credential: need_credential()?,
            }
        }
        "restore" => {
            reject_extra(r, p, &["ma", "tsm", "ta", "ba"])?;
            ProcedureSpec::Restore {
                ma: r.actor(&p.ma, "ma", Role::Ma, at)?,
                tsm: r.actor(&p.tsm, "tsm", Role::Tsm, at)?,
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
                ba: r.actor(&p.ba, "ba", Role::Ba, at)?,
            }
        }
        "wipe" => {
            reject_extra(r, p, &["ta"])?;
            ProcedureSpec::Wipe {
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
            }
        }
        "use-credential" => {
            reject_extra(r, p, &["ta", "ra", "ma"])?;
            ProcedureSpec::UseCredential {
                ta: r.actor(&p.ta, "ta", Role::Ta, at)?,
                ra: r.optional(&p.ra, "ra", Role::Ra, at)?,
                ma: r.optional(&p.ma, "ma", Role::Ma, at)?,
                credential: need_credential()?,
            }
        }
        other => return Err(r.err(at, format!("unknown procedure kind {other:?}"))),
    })
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| ScenarioError {
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1),
            message: e.message().to_string(),
        })?;

        let mut r = Resolver {
            text,
            roles: BTreeMap::new(),
        };
        let mut cas = 0;
        for a in &raw.actors {
            if r.roles.insert(a.id.get_ref().clone(), a.role).is_some() {
                return Err(r.err(a.id.span().start, format!("duplicate actor id {:?}", a.id.get_ref())));
            }
            if a.role == Role::Ca {
                cas += 1;
                if cas > 1 {
                    return Err(r.err(a.id.span().start, "more than one CA"));
                }
            }
            if !a.credentials.is_empty() && a.role != Role::Ta {
                return Err(r.err(a.id.span().start, "only TAs hold credentials"));
            }
        }
        if cas == 0 {
            return Err(ScenarioError {
                line: 1,
                message: "scenario needs one CA".into(),
            });
        }
        if raw.revocation_mode.is_none() && r.roles.values().any(|x| *x == Role::Ra) {
            return Err(ScenarioError {
                line: 1,
                message: "an RA is present, so revocation_mode must be set".into(),
            });
        }
        let adversary = raw.adversary.unwrap_or_default();
        for c in &adversary.compromise {
            if !r.roles.contains_key(c) {
                return Err(ScenarioError {
                    line: text.find("compromise").map(|o| r.line(o)).unwrap_or(1),
                    message: format!("compromise: no actor named {c:?}"),
                });
            }
        }

        let procedures = raw
            .procedures
            .iter()
            .map(|p| resolve(&r, p))
            .collect::<Result<Vec<_>, _>>()?;

        let actors = raw
            .actors
            .into_iter()
            .map(|a| ActorSpec {
                id: a.id.into_inner(),
                role: a.role,
                device: a.device,
                tee: a.tee.unwrap_or(TeeFlavor::GpTee),
                code: a.code,
                credentials: a.credentials,
                tampered: a.tampered,
                malicious: a.malicious,
                offline: a.offline,
            })
            .collect();

        Ok(Scenario {
            config: WorldConfig {
                name: raw.name.unwrap_or_else(|| "scenario".into()),
                seed: raw.seed.unwrap_or(0),
                revocation_mode: raw.revocation_mode,
                actors,
                adversary,
                journal_dir: None,
            },
            procedures,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn with_adversary(mut self, adversary: AdversaryProgram) -> Self {
        self.config.adversary = adversary;
        self
    }

    pub fn with_journal_dir(mut self, dir: PathBuf) -> Self {
        self.config.journal_dir = Some(dir);
        self
    }

    /// Builds a fresh world and runs every procedure in order. Procedures
    /// keep running after an abort; later ones see whatever state it left.
    pub fn run(&self) -> Result<ScenarioRun, WorldError> {
        let mut world = World::build(&self.config)?;
        let mut outcomes = Vec::new();
        for spec in &self.procedures {
            outcomes.extend(procedures::execute(&mut world, spec));
        }
        Ok(ScenarioRun { world, outcomes })
    }
}

pub struct ScenarioRun {
    pub world: World,
    pub outcomes: Vec<ProcedureOutcome>,
}

impl ScenarioRun {
    pub fn all_succeeded(&self) -> bool {
        self.outcomes.iter().all(|o| o.status.is_success())
    }

    /// 0 when everything succeeded, 3 on any invariant violation, otherwise
    /// 2 when a procedure aborted. Deferred work is not a failure.
    pub fn exit_code(&self) -> i32 {
        if !self.world.violations.is_empty() {
            3
        } else if self
            .outcomes
            .iter()
            .any(|o| matches!(o.status, Status::Aborted { .. }))
        {
            2
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
seed = 3
revocation_mode = "blacklist"

[[actors]]
id = "ca"
role = "CA"

[[actors]]
id = "tsm"
role = "TSM"

[[actors]]
id = "a"
role = "TA"
credentials = ["c1"]

[[actors]]
id = "b"
role = "TA"
tee = "enclave"

[[actors]]
id = "ra"
role = "RA"
"#;

    #[test]
    fn doc_example_parses_and_runs() {
        let doc = include_str!("scenario.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let run = Scenario::parse(&doc).unwrap().run().unwrap();
        assert!(run.all_succeeded());
        assert_eq!(run.exit_code(), 0);
    }

    #[test]
    fn defaults_resolve_to_the_unique_actor() {
        let s = Scenario::parse(&format!("{BASE}\n[[procedures]]\nkind = \"revocation\"\nta = \"a\"\n")).unwrap();
        assert_eq!(
            s.procedures[0],
            ProcedureSpec::Revocation {
                tsm: "tsm".into(),
                ta: "a".into(),
                ra: "ra".into()
            }
        );
    }

    #[test]
    fn errors_point_at_the_offending_line() {
        let text = format!("{BASE}\n[[procedures]]\nkind = \"migration\"\nfrom = \"a\"\nto = \"nobody\"\n");
        let err = Scenario::parse(&text).unwrap_err();
        assert_eq!(err.line, text.lines().position(|l| l.contains("nobody")).unwrap() + 1);

        let text = format!("{BASE}\n[[procedures]]\nkind = \"teleport\"\n");
        let err = Scenario::parse(&text).unwrap_err();
        assert!(err.message.contains("teleport"));
        assert_eq!(err.line, text.lines().count());

        let err = Scenario::parse("seed = \"x\"\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn ambiguous_default_is_an_error() {
        let err = Scenario::parse(&format!("{BASE}\n[[procedures]]\nkind = \"revocation\"\n")).unwrap_err();
        assert!(err.message.contains("several TAs"), "{err}");
    }

    #[test]
    fn structural_checks() {
        let no_mode = BASE.replace("revocation_mode = \"blacklist\"", "");
        assert!(Scenario::parse(&no_mode).unwrap_err().message.contains("revocation_mode"));
        let dup = format!("{BASE}\n[[actors]]\nid = \"a\"\nrole = \"TA\"\n");
        assert!(Scenario::parse(&dup).unwrap_err().message.contains("duplicate"));
        let typo = format!("{BASE}\n[[actors]]\nid = \"x\"\nrole = \"TA\"\ncredentails = []\n");
        assert!(Scenario::parse(&typo).is_err());
        let extra = format!("{BASE}\n[[procedures]]\nkind = \"wipe\"\nta = \"a\"\nra = \"ra\"\n");
        assert!(Scenario::parse(&extra).unwrap_err().message.contains("does not apply"));
    }
}
