//! Scenario files: an ordered list of host, realm and realm-owner actions run
//! against one world, with the invariant checker evaluated after every step.
//!
//! A scenario is JSON with `"schema": 1`. Realms are named by aliases that
//! steps introduce (`launch_realm`, `realm_create`, or a TOCTOU swap) before
//! any id exists; results can be bound to `$variables` and referenced by
//! later steps, including `$var.field` paths.

mod load;
mod run;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use serde_json::{Map, Value};

use crate::host::HostPolicy;
use crate::measurement::{measure_image, Digest};
use crate::types::Ipa;

pub use load::{load_scenario, parse_scenario, ParseError};
pub use run::{run_scenario, ExpectationMismatch, ExitRecord, RunConfig, RunReport, StepResult, TraceEvent};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActorRef {
    Host,
    /// Software inside the realm with this alias.
    Realm(String),
    /// The remote owner of the realm with this alias.
    Owner(String),
}

impl ActorRef {
    pub fn kind(&self) -> ActorKind {
        match self {
            ActorRef::Host => ActorKind::Host,
            ActorRef::Realm(_) => ActorKind::Realm,
            ActorRef::Owner(_) => ActorKind::Owner,
        }
    }
}

impl fmt::Display for ActorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorRef::Host => f.write_str("host"),
            ActorRef::Realm(a) => write!(f, "realm:{a}"),
            ActorRef::Owner(a) => write!(f, "owner:{a}"),
        }
    }
}

impl Serialize for ActorRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorKind {
    Host,
    Realm,
    Owner,
}

/// Signature of one scenario operation. `a|b` in `required` means either
/// argument satisfies the requirement.
#[derive(Debug)]
pub struct OpSpec {
    pub name: &'static str,
    pub actor: ActorKind,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
}

macro_rules! op {
    ($actor:ident, $name:literal, [$($req:literal),*], [$($opt:literal),*]) => {
        OpSpec { name: $name, actor: ActorKind::$actor, required: &[$($req),*], optional: &[$($opt),*] }
    };
}

/// Every operation a scenario may name.
pub const OPS: &[OpSpec] = &[
    op!(Host, "launch_realm", ["alias"], ["image", "ipa_width", "activate"]),
    op!(Host, "delegate_any", [], []),
    op!(Host, "granule_delegate", ["granule"], []),
    op!(Host, "granule_undelegate", ["granule"], []),
    op!(Host, "realm_create", ["alias", "rd"], ["ipa_width"]),
    op!(Host, "rec_create", ["realm|rd", "granule"], []),
    op!(Host, "apt_create", ["realm|rd", "granule"], []),
    op!(Host, "apt_destroy", ["realm|rd"], []),
    op!(Host, "rtt_create", ["realm|rd", "granule", "ipa"], []),
    op!(Host, "rtt_read_entry", ["realm|rd", "ipa"], []),
    op!(Host, "data_create", ["realm|rd", "granule", "ipa"], ["text", "hex"]),
    op!(Host, "data_create_unknown", ["realm|rd", "granule", "ipa"], []),
    op!(Host, "data_destroy", ["realm|rd", "ipa"], []),
    op!(Host, "map_unprotected", ["realm|rd", "ipa", "granule"], []),
    op!(Host, "unmap_unprotected", ["realm|rd", "ipa"], []),
    op!(Host, "realm_activate", ["realm|rd"], []),
    op!(Host, "realm_destroy", ["realm|rd"], []),
    op!(Host, "rec_enter", ["realm|rd"], []),
    op!(Host, "populate", ["realm", "base", "size"], []),
    op!(Host, "service", ["realm"], []),
    op!(Host, "physical_read", ["granule", "len"], ["offset"]),
    op!(Host, "physical_write", ["granule"], ["offset", "text", "hex"]),
    op!(Host, "adversarial_step", [], ["victim", "alias"]),
    op!(Host, "set_policy", ["policy"], []),
    op!(Host, "data_granules", [], []),
    op!(Realm, "csm_create", ["base", "size"], []),
    op!(Realm, "csm_share", ["csm", "consumer"], ["perm"]),
    op!(Realm, "csm_reserve", ["sharing", "base", "size"], []),
    op!(Realm, "csm_attach", ["sharing"], []),
    op!(Realm, "csm_revoke", ["sharing"], []),
    op!(Realm, "csm_destroy", ["csm"], []),
    op!(Realm, "csm_detach_and_free", ["sharing"], []),
    op!(Realm, "compose_sharing_id", ["provider"], ["consumer", "counter"]),
    op!(Realm, "attestation_token", [], []),
    op!(Realm, "peers", [], []),
    op!(Realm, "read", ["ipa", "len"], []),
    op!(Realm, "write", ["ipa"], ["text", "hex"]),
    op!(Owner, "verify_token", ["token", "image"], []),
    op!(Owner, "release_peer_id", ["token", "image"], []),
];

pub fn op_spec(name: &str) -> Option<&'static OpSpec> {
    OPS.iter().find(|o| o.name == name)
}

/// Argument keys whose bare-string values name a realm alias.
pub(crate) const REALM_ARGS: &[&str] = &["realm", "victim", "provider", "consumer"];

/// What a step must produce.
#[derive(Clone, Debug, PartialEq)]
pub enum Expect {
    /// Success, optionally matching a value pattern. Object patterns match
    /// any superset; everything else must be equal.
    Ok(Option<Value>),
    /// Failure with this error code.
    Err(String),
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Ok(None) => f.write_str("ok"),
            Expect::Ok(Some(p)) => write!(f, "ok {p}"),
            Expect::Err(code) => write!(f, "error {code}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioStep {
    pub actor: ActorRef,
    pub op: &'static OpSpec,
    pub args: Map<String, Value>,
    pub expect: Expect,
    pub bind: Option<String>,
    /// Source line of the step, when loaded from text.
    pub line: Option<usize>,
}

/// A measured realm image an owner can hold expectations against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSpec {
    pub ipa_width: u8,
    pub pages: Vec<(Ipa, Vec<u8>)>,
}

impl ImageSpec {
    pub fn rim(&self) -> Digest {
        measure_image(self.ipa_width, self.pages.iter().map(|(ipa, b)| (*ipa, b.as_slice())))
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub seed: u64,
    pub granules: usize,
    pub policy: HostPolicy,
    /// Whether the harness plays a host that services exits between steps.
    pub auto_service: bool,
    pub images: BTreeMap<String, ImageSpec>,
    pub steps: Vec<ScenarioStep>,
}

const BUILTIN_SOURCES: &[(&str, &str)] = &[
    ("happy_path", include_str!("../../scenarios/happy_path.json")),
    ("two_consumers", include_str!("../../scenarios/two_consumers.json")),
    ("dedup_accounting", include_str!("../../scenarios/dedup_accounting.json")),
    ("attack_impersonation", include_str!("../../scenarios/attack_impersonation.json")),
    ("attack_fake_csm", include_str!("../../scenarios/attack_fake_csm.json")),
    ("attack_oob_access", include_str!("../../scenarios/attack_oob_access.json")),
    ("attack_overlap_reserve", include_str!("../../scenarios/attack_overlap_reserve.json")),
    ("attack_toctou_rd_swap", include_str!("../../scenarios/attack_toctou_rd_swap.json")),
    ("attack_host_probe", include_str!("../../scenarios/attack_host_probe.json")),
    ("attack_double_map", include_str!("../../scenarios/attack_double_map.json")),
    ("starving_host", include_str!("../../scenarios/starving_host.json")),
];

/// Names of the attack scenarios making up the security suite.
pub const ATTACK_SCENARIOS: &[&str] = &[
    "attack_impersonation",
    "attack_fake_csm",
    "attack_oob_access",
    "attack_overlap_reserve",
    "attack_toctou_rd_swap",
    "attack_host_probe",
    "attack_double_map",
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN_SOURCES.iter().map(|(n, _)| *n)
}

/// Raw JSON of a builtin scenario.
pub fn builtin_source(name: &str) -> Option<&'static str> {
    BUILTIN_SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn builtin(name: &str) -> Option<Scenario> {
    builtin_source(name).map(|src| parse_scenario(src).unwrap_or_else(|e| panic!("builtin {name}: {e}")))
}

/// The registry of shipped scenarios, in a fixed order.
pub fn builtin_scenarios() -> Vec<(&'static str, Scenario)> {
    builtin_names().map(|n| (n, builtin(n).unwrap())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_every_builtin() {
        let all = builtin_scenarios();
        assert!(all.len() >= 11);
        for name in ATTACK_SCENARIOS {
            assert!(all.iter().any(|(n, _)| n == name), "{name}");
        }
        for (name, s) in &all {
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn op_names_are_unique() {
        for (i, a) in OPS.iter().enumerate() {
            assert!(OPS[i + 1..].iter().all(|b| b.name != a.name), "{}", a.name);
        }
    }

    #[test]
    fn every_builtin_passes() {
        for (name, s) in builtin_scenarios() {
            let r = run_scenario(&s, &RunConfig::default());
            assert!(r.passed(), "{name}: {:?} violations={}", r.mismatches, r.violation_count);
        }
    }
}
