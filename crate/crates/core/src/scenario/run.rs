//! Deterministic step executor and JSON-lines trace.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use super::load::{page_bytes, parse_u64, parse_u64_str};
use super::{ActorRef, Expect, ImageSpec, Scenario, ScenarioStep};
use crate::attestation::{owner_release_peer_id, verify_token_bytes, AttestationToken, OwnerExpectation, PeerStore};
use crate::error::{AccessError, RmmError};
use crate::granule::{GranuleState, SecurityState};
use crate::host::{Host, HostPolicy, RmiCall};
use crate::invariants::check_invariants;
use crate::rmm::{Event, RecExit, Reentry, RsiCompletion, RsiOutcome, RttReadout, World, WorldConfig};
use crate::types::{GranuleIdx, Ipa, Permission, RealmId, SharingId};

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StepResult {
    Ok(Value),
    Err(String),
}

impl fmt::Display for StepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepResult::Ok(v) => write!(f, "ok {v}"),
            StepResult::Err(code) => write!(f, "error {code}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExitRecord {
    pub realm: RealmId,
    pub exit: &'static str,
    pub ipa_base: Ipa,
    pub size: u64,
}

/// One line of the trace.
#[derive(Clone, Debug, Serialize)]
pub struct TraceEvent {
    pub step: usize,
    pub actor: ActorRef,
    pub op: &'static str,
    /// Arguments after alias and variable resolution.
    pub args: Map<String, Value>,
    pub result: StepResult,
    /// Human-readable cause of a failed step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub matched: bool,
    pub exits: Vec<ExitRecord>,
    pub host_calls: Vec<RmiCall>,
    /// TLB flushes and faults.
    pub events: Vec<Event>,
    /// Invariant violations present after the step.
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("step {step} expected {expected}, got {got}")]
pub struct ExpectationMismatch {
    pub step: usize,
    pub expected: String,
    pub got: String,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub name: String,
    pub trace: Vec<TraceEvent>,
    pub mismatches: Vec<ExpectationMismatch>,
    pub violation_count: usize,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.violation_count == 0
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }
}

/// Executes every step in order; a failing step does not stop the run.
pub fn run_scenario(scenario: &Scenario, config: &RunConfig) -> RunReport {
    let world = World::new(&WorldConfig {
        granules: scenario.granules,
        seed: config.seed.unwrap_or(scenario.seed),
    });
    let mut h = Harness {
        images: &scenario.images,
        auto_service: scenario.auto_service,
        world,
        host: Host::new(scenario.policy),
        aliases: BTreeMap::new(),
        vars: Map::new(),
        peers: PeerStore::default(),
        calls: Vec::new(),
    };
    let mut report = RunReport {
        name: scenario.name.clone(),
        trace: Vec::with_capacity(scenario.steps.len()),
        mismatches: Vec::new(),
        violation_count: 0,
    };
    for (i, step) in scenario.steps.iter().enumerate() {
        let args = h.resolve_map(&step.args);
        let (result, detail) = match h.exec(step, &args) {
            Ok(v) => (StepResult::Ok(v), None),
            Err(e) => (StepResult::Err(e.code().to_string()), Some(e.to_string())),
        };
        let raw_events = h.world.take_events();
        let mut exits = Vec::new();
        let mut events = Vec::new();
        for e in raw_events {
            match e {
                Event::Exit { realm, exit } => {
                    if let (true, RecExit::RemoveCsm { ipa_base, size }) = (h.auto_service, exit) {
                        h.host.handle_remove_csm(realm, ipa_base, size);
                    }
                    let (ipa_base, size) = exit.range();
                    exits.push(ExitRecord {
                        realm,
                        exit: exit.name(),
                        ipa_base,
                        size,
                    });
                }
                other => events.push(other),
            }
        }
        let matched = h.matches(&step.expect, &result);
        if !matched {
            report.mismatches.push(ExpectationMismatch {
                step: i,
                expected: step.expect.to_string(),
                got: result.to_string(),
            });
        }
        if let (Some(b), StepResult::Ok(v)) = (&step.bind, &result) {
            h.vars.insert(b.clone(), v.clone());
        }
        let violations: Vec<String> = check_invariants(&h.world).iter().map(|v| v.to_string()).collect();
        report.violation_count += violations.len();
        report.trace.push(TraceEvent {
            step: i,
            actor: step.actor.clone(),
            op: step.op.name,
            args,
            result,
            detail,
            matched,
            exits,
            host_calls: std::mem::take(&mut h.calls),
            events,
            violations,
        });
    }
    report
}

#[derive(Debug, Error)]
enum StepError {
    #[error(transparent)]
    Rmm(RmmError),
    #[error(transparent)]
    Access(AccessError),
    #[error("peer token failed verification")]
    VerificationFailed,
    /// The step's arguments could not be interpreted.
    #[error("{0}")]
    Harness(String),
}

impl StepError {
    fn code(&self) -> &str {
        match self {
            StepError::Rmm(e) => e.code(),
            StepError::Access(e) => e.code(),
            StepError::VerificationFailed => "VerificationFailed",
            StepError::Harness(_) => "HarnessError",
        }
    }
}

impl From<RmmError> for StepError {
    fn from(e: RmmError) -> Self {
        StepError::Rmm(e)
    }
}

impl From<AccessError> for StepError {
    fn from(e: AccessError) -> Self {
        StepError::Access(e)
    }
}

type StepResultT = Result<Value, StepError>;

fn bad(msg: impl Into<String>) -> StepError {
    StepError::Harness(msg.into())
}

fn bytes_json(b: &[u8]) -> Value {
    let end = b.iter().position(|&x| x == 0).unwrap_or(b.len());
    json!({ "hex": hex::encode(b), "text": String::from_utf8_lossy(&b[..end]) })
}

fn reentry_json(r: Reentry) -> Value {
    match r {
        Reentry::Idle => json!({ "state": "idle" }),
        Reentry::Completed(RsiCompletion::CsmCreated(c)) => json!({ "csm": c }),
        Reentry::Completed(RsiCompletion::Reserved(s)) => json!({ "reserved": s }),
        Reentry::Pending(exit) => json!({ "pending": exit.name() }),
    }
}

/// Subset match: object patterns ignore extra keys in the actual value, and
/// numeric strings in a pattern match equal numbers.
fn pattern_matches(pattern: &Value, actual: &Value) -> bool {
    match (pattern, actual) {
        (Value::Object(p), Value::Object(a)) => p.iter().all(|(k, pv)| a.get(k).is_some_and(|av| pattern_matches(pv, av))),
        (Value::Array(p), Value::Array(a)) => p.len() == a.len() && p.iter().zip(a).all(|(pv, av)| pattern_matches(pv, av)),
        (Value::String(p), Value::Number(a)) => parse_u64_str(p).is_some_and(|p| Some(p) == a.as_u64()),
        _ => pattern == actual,
    }
}

struct Harness<'s> {
    images: &'s BTreeMap<String, ImageSpec>,
    auto_service: bool,
    world: World,
    host: Host,
    aliases: BTreeMap<String, RealmId>,
    vars: Map<String, Value>,
    peers: PeerStore,
    calls: Vec<RmiCall>,
}

impl Harness<'_> {
    fn resolve(&self, v: &Value) -> Value {
        match v {
            Value::String(s) if s.starts_with('$') => {
                let mut parts = s[1..].split('.');
                let mut cur = self.vars.get(parts.next().unwrap_or_default()).cloned().unwrap_or(Value::Null);
                for p in parts {
                    cur = cur.get(p).cloned().unwrap_or(Value::Null);
                }
                cur
            }
            Value::Array(a) => Value::Array(a.iter().map(|x| self.resolve(x)).collect()),
            Value::Object(m) => Value::Object(self.resolve_map(m)),
            other => other.clone(),
        }
    }

    fn resolve_map(&self, m: &Map<String, Value>) -> Map<String, Value> {
        m.iter().map(|(k, v)| (k.clone(), self.resolve(v))).collect()
    }

    fn matches(&self, expect: &Expect, got: &StepResult) -> bool {
        match (expect, got) {
            (Expect::Ok(None), StepResult::Ok(_)) => true,
            (Expect::Ok(Some(p)), StepResult::Ok(v)) => pattern_matches(&self.resolve(p), v),
            (Expect::Err(want), StepResult::Err(code)) => want == code,
            _ => false,
        }
    }

    fn alias(&self, a: &str) -> Result<RealmId, StepError> {
        self.aliases.get(a).copied().ok_or_else(|| bad(format!("alias `{a}` is not bound")))
    }

    // ---- argument decoding ----------------------------------------------

    /// A number, a numeric string, or an object carrying it under `field`.
    fn num_in(v: &Value, field: &str) -> Option<u64> {
        match v {
            Value::Object(m) => m.get(field).and_then(|x| Self::num_in(x, field)),
            _ => parse_u64(v),
        }
    }

    fn num(args: &Map<String, Value>, key: &str) -> Result<u64, StepError> {
        args.get(key)
            .and_then(|v| Self::num_in(v, key))
            .ok_or_else(|| bad(format!("`{key}` is not a number")))
    }

    fn opt_num(args: &Map<String, Value>, key: &str, default: u64) -> Result<u64, StepError> {
        if args.contains_key(key) {
            Self::num(args, key)
        } else {
            Ok(default)
        }
    }

    fn ipa(args: &Map<String, Value>, key: &str) -> Result<Ipa, StepError> {
        Self::num(args, key).map(Ipa)
    }

    fn granule(args: &Map<String, Value>) -> Result<GranuleIdx, StepError> {
        let v = args.get("granule").ok_or_else(|| bad("missing granule"))?;
        match v {
            Value::Object(m) => m.get("granule").or_else(|| m.get("pa")).and_then(parse_u64),
            _ => parse_u64(v),
        }
        .map(|g| g as GranuleIdx)
        .ok_or_else(|| bad("`granule` is not a number"))
    }

    /// An alias, a raw id, an object with a `realm`, `realm_id` or `peer`
    /// field, or null for an identifier the realm never obtained.
    fn realm_value(&self, v: &Value) -> Result<RealmId, StepError> {
        match v {
            Value::Null => Ok(RealmId::NONE),
            Value::String(s) if parse_u64_str(s).is_none() => self.alias(s),
            Value::Object(m) => ["realm", "realm_id", "peer"]
                .iter()
                .find_map(|k| m.get(*k))
                .map(|x| self.realm_value(x))
                .unwrap_or_else(|| Err(bad("object names no realm"))),
            _ => parse_u64(v).map(RealmId).ok_or_else(|| bad("not a realm reference")),
        }
    }

    fn realm(&self, args: &Map<String, Value>, key: &str) -> Result<RealmId, StepError> {
        self.realm_value(args.get(key).unwrap_or(&Value::Null))
    }

    /// RD granule from `rd`, or from the realm named by `realm`.
    fn rd(&self, args: &Map<String, Value>) -> Result<GranuleIdx, StepError> {
        if args.contains_key("rd") {
            return Ok(Self::num(args, "rd")? as GranuleIdx);
        }
        let id = self.realm(args, "realm")?;
        Ok(self.world.realm(id).ok_or(RmmError::NoSuchRealm)?.rd_granule())
    }

    fn sharing(v: &Value) -> Result<SharingId, StepError> {
        match v {
            Value::Object(m) if m.contains_key("p_id") => {
                serde_json::from_value(v.clone()).map_err(|e| bad(format!("bad sharing id: {e}")))
            }
            Value::Object(m) => ["sharing", "reserved"]
                .iter()
                .find_map(|k| m.get(*k))
                .map(Self::sharing)
                .unwrap_or_else(|| Err(bad("object holds no sharing id"))),
            _ => Err(bad("not a sharing id")),
        }
    }

    fn perm(args: &Map<String, Value>) -> Result<Permission, StepError> {
        match args.get("perm").and_then(Value::as_str) {
            None | Some("rw" | "read_write" | "ReadWrite") => Ok(Permission::ReadWrite),
            Some("ro" | "read_only" | "ReadOnly") => Ok(Permission::ReadOnly),
            Some(p) => Err(bad(format!("unknown permission `{p}`"))),
        }
    }

    fn data(args: &Map<String, Value>) -> Result<Vec<u8>, StepError> {
        Ok(page_bytes(args).map_err(bad)?.unwrap_or_default())
    }

    fn image(&self, args: &Map<String, Value>) -> Result<Option<&ImageSpec>, StepError> {
        match args.get("image") {
            None => Ok(None),
            Some(Value::String(n)) => self.images.get(n).map(Some).ok_or_else(|| bad(format!("unknown image `{n}`"))),
            Some(_) => Err(bad("`image` must name an image")),
        }
    }

    fn token(args: &Map<String, Value>) -> Result<Vec<u8>, StepError> {
        let v = args.get("token").unwrap_or(&Value::Null);
        let s = match v {
            Value::Object(m) => m.get("token").and_then(Value::as_str),
            Value::String(s) => Some(s.as_str()),
            _ => None,
        };
        match s {
            Some(s) => hex::decode(s).map_err(|e| bad(format!("bad token hex: {e}"))),
            // A token that was never obtained is an empty, invalid one.
            None => Ok(Vec::new()),
        }
    }

    fn expectation(&self, args: &Map<String, Value>) -> Result<OwnerExpectation, StepError> {
        let img = self.image(args)?.ok_or_else(|| bad("missing image"))?;
        Ok(OwnerExpectation::for_platform(self.world.platform(), img.rim()))
    }

    // ---- execution ------------------------------------------------------

    fn exec(&mut self, step: &ScenarioStep, args: &Map<String, Value>) -> StepResultT {
        match &step.actor {
            ActorRef::Host => self.exec_host(step.op.name, args),
            ActorRef::Realm(a) => {
                let me = self.alias(a)?;
                self.exec_realm(me, step.op.name, args)
            }
            ActorRef::Owner(a) => {
                let owned = self.alias(a)?;
                self.exec_owner(owned, step.op.name, args)
            }
        }
    }

    fn exec_host(&mut self, op: &str, args: &Map<String, Value>) -> StepResultT {
        let ok = json!({});
        match op {
            "launch_realm" => {
                let alias = args["alias"].as_str().unwrap_or_default().to_string();
                let img = self.image(args)?.cloned();
                let width = match &img {
                    Some(i) => Self::opt_num(args, "ipa_width", i.ipa_width as u64)?,
                    None => Self::opt_num(args, "ipa_width", 32)?,
                } as u8;
                let activate = args.get("activate").and_then(Value::as_bool).unwrap_or(true);
                let pages = img.map(|i| i.pages).unwrap_or_default();
                let (id, rd) = self.host.launch_realm(&mut self.world, width, &pages, activate)?;
                self.aliases.insert(alias, id);
                Ok(json!({ "realm": id, "rd": rd }))
            }
            "delegate_any" => Ok(json!({ "granule": Host::delegate_fresh(&mut self.world, &mut self.calls)? })),
            "granule_delegate" => {
                let g = Self::granule(args)?;
                self.world.granule_delegate(g)?;
                self.calls.push(RmiCall::GranuleDelegate { granule: g });
                Ok(ok)
            }
            "granule_undelegate" => {
                let g = Self::granule(args)?;
                self.world.granule_undelegate(g)?;
                self.calls.push(RmiCall::GranuleUndelegate { granule: g });
                Ok(ok)
            }
            "realm_create" => {
                let rd = Self::num(args, "rd")? as GranuleIdx;
                let width = Self::opt_num(args, "ipa_width", 32)? as u8;
                let id = self.world.rmi_realm_create(rd, width)?;
                self.aliases.insert(args["alias"].as_str().unwrap_or_default().to_string(), id);
                Ok(json!({ "realm": id }))
            }
            "rec_create" => {
                let rd = self.rd(args)?;
                self.world.rmi_rec_create(rd, Self::granule(args)?)?;
                Ok(ok)
            }
            "apt_create" => {
                let rd = self.rd(args)?;
                self.world.rmi_apt_create(rd, Self::granule(args)?)?;
                Ok(ok)
            }
            "apt_destroy" => {
                let rd = self.rd(args)?;
                self.world.rmi_apt_destroy(rd)?;
                Ok(ok)
            }
            "rtt_create" => {
                let rd = self.rd(args)?;
                self.world.rmi_rtt_create(rd, Self::granule(args)?, Self::ipa(args, "ipa")?)?;
                Ok(ok)
            }
            "rtt_read_entry" => {
                let rd = self.rd(args)?;
                Ok(match self.world.rmi_rtt_read_entry(rd, Self::ipa(args, "ipa")?) {
                    RttReadout::Unassigned => json!({ "state": "unassigned" }),
                    RttReadout::Assigned { pa, perm } => json!({ "state": "assigned", "pa": pa, "perm": perm }),
                })
            }
            "data_create" => {
                let rd = self.rd(args)?;
                let content = Self::data(args)?;
                self.world
                    .rmi_data_create(rd, Self::granule(args)?, Self::ipa(args, "ipa")?, &content)?;
                Ok(ok)
            }
            "data_create_unknown" => {
                let rd = self.rd(args)?;
                self.world
                    .rmi_data_create_unknown(rd, Self::granule(args)?, Self::ipa(args, "ipa")?)?;
                Ok(ok)
            }
            "data_destroy" => {
                let rd = self.rd(args)?;
                Ok(json!({ "granule": self.world.rmi_data_destroy(rd, Self::ipa(args, "ipa")?)? }))
            }
            "map_unprotected" => {
                let rd = self.rd(args)?;
                self.world
                    .rmi_rtt_map_unprotected(rd, Self::ipa(args, "ipa")?, Self::granule(args)?)?;
                Ok(ok)
            }
            "unmap_unprotected" => {
                let rd = self.rd(args)?;
                Ok(json!({ "granule": self.world.rmi_rtt_unmap_unprotected(rd, Self::ipa(args, "ipa")?)? }))
            }
            "realm_activate" => {
                let rd = self.rd(args)?;
                self.world.rmi_realm_activate(rd)?;
                Ok(ok)
            }
            "realm_destroy" => {
                let rd = self.rd(args)?;
                self.world.rmi_realm_destroy(rd)?;
                Ok(ok)
            }
            "rec_enter" => {
                let rd = self.rd(args)?;
                Ok(reentry_json(self.world.rec_enter(rd)?))
            }
            "populate" => {
                let id = self.realm(args, "realm")?;
                let rd = self.rd(args)?;
                let base = Self::ipa(args, "base")?;
                let size = Self::num(args, "size")?;
                let mut granules = Vec::new();
                for k in 0..size {
                    let ipa = base.add_granules(k);
                    let backed = self.world.realm(id).is_some_and(|r| r.rtt().is_backed(ipa));
                    if !backed {
                        let t = Host::delegate_fresh(&mut self.world, &mut self.calls)?;
                        self.world.rmi_rtt_create(rd, t, ipa)?;
                        self.calls.push(RmiCall::RttCreate { granule: t, ipa });
                    }
                    let g = Host::delegate_fresh(&mut self.world, &mut self.calls)?;
                    self.world.rmi_data_create_unknown(rd, g, ipa)?;
                    self.calls.push(RmiCall::DataCreateUnknown { granule: g, ipa });
                    granules.push(g);
                }
                Ok(json!({ "granules": granules }))
            }
            "service" => {
                let id = self.realm(args, "realm")?;
                let pending = self
                    .world
                    .realm(id)
                    .ok_or(RmmError::NoSuchRealm)?
                    .rec()
                    .and_then(|r| r.pending);
                match pending {
                    Some(p) => {
                        let (calls, re) = self.host.complete_pending(&mut self.world, id, p.exit())?;
                        self.calls.extend(calls);
                        Ok(reentry_json(re))
                    }
                    None => {
                        let rd = self.rd(args)?;
                        Ok(reentry_json(self.world.rec_enter(rd)?))
                    }
                }
            }
            "physical_read" => {
                let g = Self::granule(args)?;
                let off = Self::opt_num(args, "offset", 0)? as usize;
                let len = Self::num(args, "len")? as usize;
                Ok(bytes_json(&self.world.physical_read(SecurityState::Normal, g, off, len)?))
            }
            "physical_write" => {
                let g = Self::granule(args)?;
                let off = Self::opt_num(args, "offset", 0)? as usize;
                self.world.physical_write(SecurityState::Normal, g, off, &Self::data(args)?)?;
                Ok(ok)
            }
            "adversarial_step" => {
                let victim = match args.get("victim") {
                    None => None,
                    Some(v) => Some(self.realm_value(v)?),
                };
                let outcome = self.host.adversarial_step(&mut self.world, victim)?;
                if let (crate::host::AdversarialOutcome::Swap { new_id, .. }, Some(Value::String(a))) = (&outcome, args.get("alias")) {
                    self.aliases.insert(a.clone(), *new_id);
                }
                Ok(serde_json::to_value(outcome).expect("outcomes serialize"))
            }
            "set_policy" => {
                let p: HostPolicy = serde_json::from_value(args["policy"].clone()).map_err(|e| bad(e.to_string()))?;
                self.host.policy = p;
                Ok(ok)
            }
            "data_granules" => Ok(json!({
                "data_granules": self.world.data_granules(),
                "free_granules": self.world.space().count_in_state(GranuleState::Undelegated),
            })),
            _ => Err(bad(format!("`{op}` is not a host op"))),
        }
    }

    /// Finishes a suspended RSI when the harness plays the host.
    fn finish(&mut self, me: RealmId, outcome_exit: RecExit) -> StepResultT {
        if !self.auto_service {
            return Ok(json!({ "pending": outcome_exit.name() }));
        }
        let (calls, re) = self.host.complete_pending(&mut self.world, me, outcome_exit)?;
        self.calls.extend(calls);
        Ok(reentry_json(re))
    }

    fn exec_realm(&mut self, me: RealmId, op: &str, args: &Map<String, Value>) -> StepResultT {
        let ok = json!({});
        match op {
            "csm_create" => {
                let base = Self::ipa(args, "base")?;
                let size = Self::num(args, "size")?;
                match self.world.rsi_csm_create(me, base, size)? {
                    RsiOutcome::Done(c) => Ok(json!({ "csm": c })),
                    RsiOutcome::Pending(exit) => self.finish(me, exit),
                }
            }
            "csm_share" => {
                let csm = crate::types::CsmId(Self::num(args, "csm")?);
                let consumer = self.realm(args, "consumer")?;
                let sid = self.world.rsi_csm_share(me, csm, consumer, Self::perm(args)?)?;
                Ok(json!({ "sharing": sid }))
            }
            "csm_reserve" => {
                let sid = Self::sharing(&args["sharing"])?;
                let base = Self::ipa(args, "base")?;
                let size = Self::num(args, "size")?;
                match self.world.rsi_csm_reserve(me, sid, base, size)? {
                    RsiOutcome::Done(()) => Ok(json!({ "reserved": sid })),
                    RsiOutcome::Pending(exit) => self.finish(me, exit),
                }
            }
            "csm_attach" => {
                self.world.rsi_csm_attach(me, Self::sharing(&args["sharing"])?)?;
                Ok(ok)
            }
            "csm_revoke" => {
                self.world.rsi_csm_revoke(me, Self::sharing(&args["sharing"])?)?;
                Ok(ok)
            }
            "csm_destroy" => {
                self.world.rsi_csm_destroy(me, crate::types::CsmId(Self::num(args, "csm")?))?;
                Ok(ok)
            }
            "csm_detach_and_free" => {
                self.world.rsi_csm_detach_and_free(me, Self::sharing(&args["sharing"])?)?;
                Ok(ok)
            }
            "compose_sharing_id" => {
                let p = self.realm(args, "provider")?;
                let c = match args.get("consumer") {
                    None => me,
                    Some(v) => self.realm_value(v)?,
                };
                let n = Self::opt_num(args, "counter", 0)?;
                let n = u32::try_from(n).map_err(|_| bad("counter out of range"))?;
                Ok(json!({ "sharing": crate::csm::compose_sharing_id(p, c, n) }))
            }
            "attestation_token" => {
                let t = self.world.rsi_attestation_token(me)?;
                Ok(json!({
                    "token": hex::encode(t.to_bytes()),
                    "realm_id": t.claims.realm_id,
                    "rim": t.claims.rim,
                }))
            }
            "peers" => Ok(json!({ "peers": self.peers.peers_of(me).collect::<Vec<_>>() })),
            "read" => {
                let len = Self::num(args, "len")? as usize;
                Ok(bytes_json(&self.world.realm_read(me, Self::ipa(args, "ipa")?, len)?))
            }
            "write" => {
                self.world.realm_write(me, Self::ipa(args, "ipa")?, &Self::data(args)?)?;
                Ok(ok)
            }
            _ => Err(bad(format!("`{op}` is not a realm op"))),
        }
    }

    fn exec_owner(&mut self, owned: RealmId, op: &str, args: &Map<String, Value>) -> StepResultT {
        let exp = self.expectation(args)?;
        let bytes = Self::token(args)?;
        match op {
            "verify_token" => Ok(serde_json::to_value(verify_token_bytes(&bytes, &exp)).expect("verification serializes")),
            "release_peer_id" => {
                let token = AttestationToken::from_bytes(&bytes).map_err(|_| StepError::VerificationFailed)?;
                let id = owner_release_peer_id(&mut self.peers, owned, &token, &exp).map_err(|_| StepError::VerificationFailed)?;
                Ok(json!({ "peer": id }))
            }
            _ => Err(bad(format!("`{op}` is not an owner op"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    fn run(src: &str) -> RunReport {
        run_scenario(&parse_scenario(src).unwrap(), &RunConfig::default())
    }

    #[test]
    fn patterns_match_subsets() {
        assert!(pattern_matches(&json!({"a": 1}), &json!({"a": 1, "b": 2})));
        assert!(!pattern_matches(&json!({"a": 1, "c": 3}), &json!({"a": 1})));
        assert!(pattern_matches(&json!("0x10"), &json!(16)));
        assert!(!pattern_matches(&json!([1]), &json!([1, 2])));
        assert!(pattern_matches(&json!({"x": [{"y": true}]}), &json!({"x": [{"y": true, "z": 0}]})));
    }

    #[test]
    fn failing_expectation_is_reported_and_run_continues() {
        let r = run(r#"{"schema": 1, "name": "t", "steps": [
            {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}},
            {"actor": "realm:P", "op": "read", "args": {"ipa": "0x5000", "len": 4}},
            {"actor": "realm:P", "op": "read", "args": {"ipa": "0x5000", "len": 4}, "expect": {"err": "Fault"}}
        ]}"#);
        assert_eq!(r.exit_code(), 1);
        assert_eq!(r.mismatches.len(), 1);
        assert_eq!(r.mismatches[0].step, 1);
        assert_eq!(r.mismatches[0].expected, "ok");
        assert_eq!(r.mismatches[0].got, "error Fault");
        assert_eq!(r.trace.len(), 3);
        assert!(r.trace[2].matched);
        assert!(matches!(r.trace[1].events[0], Event::Fault { .. }));
    }

    #[test]
    fn variables_flow_between_steps() {
        let r = run(r#"{"schema": 1, "name": "t", "steps": [
            {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}, "bind": "p"},
            {"actor": "host", "op": "rtt_read_entry", "args": {"rd": "$p.rd", "ipa": 0}, "expect": {"ok": {"state": "unassigned"}}},
            {"actor": "realm:P", "op": "csm_create", "args": {"base": "0x4000", "size": 1}, "bind": "c"},
            {"actor": "host", "op": "rtt_read_entry", "args": {"realm": "P", "ipa": "0x4000"}, "bind": "e",
             "expect": {"ok": {"state": "assigned", "perm": "ReadWrite"}}},
            {"actor": "host", "op": "physical_read", "args": {"granule": "$e.pa", "len": 8}, "expect": {"err": "Fault"}},
            {"actor": "realm:P", "op": "csm_destroy", "args": {"csm": "$c"}}
        ]}"#);
        assert!(r.passed(), "{:?}", r.mismatches);
        assert_eq!(r.trace[2].exits[0].exit, "PRealmCsm");
        assert!(!r.trace[2].host_calls.is_empty());
        assert_eq!(r.trace[5].exits[0].exit, "RemoveCsm");
    }

    #[test]
    fn manual_service_without_auto_host() {
        let r = run(r#"{"schema": 1, "name": "t", "auto_service": false, "steps": [
            {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}},
            {"actor": "realm:P", "op": "csm_create", "args": {"base": "0x4000", "size": 2}, "expect": {"ok": {"pending": "PRealmCsm"}}},
            {"actor": "realm:P", "op": "csm_create", "args": {"base": "0x8000", "size": 1}, "expect": {"err": "RsiPending"}},
            {"actor": "host", "op": "service", "args": {"realm": "P"}, "expect": {"ok": {"csm": 1}}}
        ]}"#);
        assert!(r.passed(), "{:?}", r.mismatches);
    }

    #[test]
    fn trace_is_stable_jsonl() {
        let src = r#"{"schema": 1, "name": "t", "steps": [
            {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}},
            {"actor": "realm:P", "op": "attestation_token"}
        ]}"#;
        let a = run(src).to_jsonl();
        let b = run(src).to_jsonl();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 2);
        let first: Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
        assert_eq!(first["actor"], "host");
        assert!(a.lines().next().unwrap().starts_with(r#"{"step":0,"actor":"host","op":"launch_realm","args":"#));
    }

    #[test]
    fn seed_changes_tokens_only_through_the_platform_key() {
        let src = r#"{"schema": 1, "name": "t", "steps": [
            {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}},
            {"actor": "realm:P", "op": "attestation_token"}
        ]}"#;
        let s = parse_scenario(src).unwrap();
        let a = run_scenario(&s, &RunConfig { seed: Some(1) }).to_jsonl();
        let b = run_scenario(&s, &RunConfig { seed: Some(2) }).to_jsonl();
        assert_ne!(a, b);
        assert_eq!(a.lines().next(), b.lines().next());
    }
}
