//! Bounded breadth-first exploration of command interleavings.
//!
//! The initial state has `realm_count` active realms, each holding its
//! metadata granules (RD, REC, APT, one RTT) and one measured image page at
//! slot 1, plus a host pool of `granule_count` undelegated granules. Realms
//! address a small window of `slots` protected IPAs starting at 0.
//!
//! Granules are interchangeable until touched, so the host always takes the
//! lowest-numbered free granule. States are deduplicated by a digest of
//! their canonical structure; granule content enters the digest only for
//! Data granules.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest as _, Sha256};

use crate::csm::{AptEntry, ConsumerState};
use crate::granule::{GranuleState, PasTag, SecurityState};
use crate::host::Host;
use crate::invariants::{check_invariants, Invariant};
use crate::rmm::{Lifecycle, PendingRsi, World, WorldConfig};
use crate::types::{AccessKind, CsmId, GranuleIdx, Ipa, Permission, RealmId, SharingId};

/// Granules each initial realm holds: RD, REC, APT, RTT and the image page.
pub const GRANULES_PER_REALM: usize = 5;
const IMAGE_SLOT: u64 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct ExplorationConfig {
    pub realm_count: usize,
    /// Host pool on top of the per-realm granules.
    pub granule_count: usize,
    pub csm_max_size: u64,
    pub depth: usize,
    pub slots: u64,
    pub include_host_attacks: bool,
    pub include_writes: bool,
    pub include_realm_destroy: bool,
    pub state_cap: usize,
    /// Stop at the first layer that contains a violation.
    pub stop_on_violation: bool,
    #[cfg(feature = "mutants")]
    #[serde(skip)]
    pub mutation: Option<crate::rmm::Mutation>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            realm_count: 2,
            granule_count: 8,
            csm_max_size: 2,
            depth: 6,
            slots: 3,
            include_host_attacks: true,
            include_writes: true,
            include_realm_destroy: true,
            state_cap: 20_000_000,
            stop_on_violation: false,
            #[cfg(feature = "mutants")]
            mutation: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    CsmCreate { realm: RealmId, base: Ipa, size: u64 },
    CsmShare { realm: RealmId, csm: CsmId, consumer: RealmId, perm: Permission },
    CsmReserve { realm: RealmId, sharing: SharingId, base: Ipa, size: u64 },
    CsmAttach { realm: RealmId, sharing: SharingId },
    CsmRevoke { realm: RealmId, sharing: SharingId },
    CsmDestroy { realm: RealmId, csm: CsmId },
    CsmDetach { realm: RealmId, sharing: SharingId },
    RealmWrite { realm: RealmId, ipa: Ipa },
    /// Host services the pending exit and re-enters the REC.
    HostService { realm: RealmId },
    /// Delegate the lowest free granule and map it.
    HostMap { realm: RealmId, ipa: Ipa },
    /// `rmi_data_destroy` followed by undelegation.
    HostReclaim { realm: RealmId, ipa: Ipa },
    /// Map a granule already owned elsewhere.
    HostDoubleMap { realm: RealmId, ipa: Ipa, granule: GranuleIdx },
    HostUndelegate { granule: GranuleIdx },
    RealmDestroy { realm: RealmId },
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Command::*;
        match *self {
            CsmCreate { realm, base, size } => write!(f, "{realm}: csm_create({base}, {size})"),
            CsmShare { realm, csm, consumer, perm } => write!(f, "{realm}: csm_share({csm}, {consumer}, {perm:?})"),
            CsmReserve { realm, sharing, base, size } => write!(f, "{realm}: csm_reserve({sharing}, {base}, {size})"),
            CsmAttach { realm, sharing } => write!(f, "{realm}: csm_attach({sharing})"),
            CsmRevoke { realm, sharing } => write!(f, "{realm}: csm_revoke({sharing})"),
            CsmDestroy { realm, csm } => write!(f, "{realm}: csm_destroy({csm})"),
            CsmDetach { realm, sharing } => write!(f, "{realm}: csm_detach_and_free({sharing})"),
            RealmWrite { realm, ipa } => write!(f, "{realm}: write({ipa})"),
            HostService { realm } => write!(f, "host: service exit of {realm}"),
            HostMap { realm, ipa } => write!(f, "host: map fresh granule into {realm} at {ipa}"),
            HostReclaim { realm, ipa } => write!(f, "host: reclaim {ipa} of {realm}"),
            HostDoubleMap { realm, ipa, granule } => write!(f, "host: map granule {granule} into {realm} at {ipa}"),
            HostUndelegate { granule } => write!(f, "host: undelegate {granule}"),
            RealmDestroy { realm } => write!(f, "host: destroy {realm}"),
        }
    }
}

/// Applies a command. Errors are part of normal exploration and leave the
/// state as the RMM left it.
pub fn apply(w: &mut World, cmd: Command) {
    let mut host = Host::default();
    let _ = match cmd {
        Command::CsmCreate { realm, base, size } => w.rsi_csm_create(realm, base, size).map(drop),
        Command::CsmShare { realm, csm, consumer, perm } => w.rsi_csm_share(realm, csm, consumer, perm).map(drop),
        Command::CsmReserve { realm, sharing, base, size } => w.rsi_csm_reserve(realm, sharing, base, size).map(drop),
        Command::CsmAttach { realm, sharing } => w.rsi_csm_attach(realm, sharing),
        Command::CsmRevoke { realm, sharing } => w.rsi_csm_revoke(realm, sharing),
        Command::CsmDestroy { realm, csm } => w.rsi_csm_destroy(realm, csm),
        Command::CsmDetach { realm, sharing } => w.rsi_csm_detach_and_free(realm, sharing),
        Command::RealmWrite { realm, ipa } => {
            let _ = w.realm_write(realm, ipa, &[realm.0 as u8]);
            Ok(())
        }
        Command::HostService { realm } => match w.realm(realm).and_then(|r| r.rec()).and_then(|r| r.pending) {
            Some(p) => host.complete_pending(w, realm, p.exit()).map(drop),
            None => Ok(()),
        },
        Command::HostMap { realm, ipa } => (|| {
            let rd = w.realm(realm).ok_or(crate::error::RmmError::NoSuchRealm)?.rd_granule();
            let g = Host::delegate_fresh(w, &mut Vec::new())?;
            w.rmi_data_create_unknown(rd, g, ipa)
        })(),
        Command::HostReclaim { realm, ipa } => (|| {
            let rd = w.realm(realm).ok_or(crate::error::RmmError::NoSuchRealm)?.rd_granule();
            let g = w.rmi_data_destroy(rd, ipa)?;
            w.granule_undelegate(g)
        })(),
        Command::HostDoubleMap { realm, ipa, granule } => match w.realm(realm).map(|r| r.rd_granule()) {
            Some(rd) => w.rmi_data_create_unknown(rd, granule, ipa),
            None => Ok(()),
        },
        Command::HostUndelegate { granule } => w.granule_undelegate(granule),
        Command::RealmDestroy { realm } => match w.realm(realm).map(|r| r.rd_granule()) {
            Some(rd) => w.rmi_realm_destroy(rd),
            None => Ok(()),
        },
    };
    w.take_events();
}

/// Builds the initial state for a configuration.
pub fn initial_world(cfg: &ExplorationConfig) -> World {
    let mut w = World::new(&WorldConfig {
        granules: cfg.realm_count * GRANULES_PER_REALM + cfg.granule_count,
        seed: 0,
    });
    #[cfg(feature = "mutants")]
    w.set_mutation(cfg.mutation);
    let mut host = Host::default();
    for r in 0..cfg.realm_count {
        host.launch_realm(&mut w, 32, &[(Ipa::from_granule(IMAGE_SLOT), vec![0xE0 + r as u8])], true)
            .expect("initial realms fit the granule budget");
    }
    w.take_events();
    w
}

fn slot(k: u64) -> Ipa {
    Ipa::from_granule(k)
}

/// Every command enabled in `w`, with all in-range arguments.
pub fn enabled_commands(w: &World, cfg: &ExplorationConfig) -> Vec<Command> {
    let mut out = Vec::new();
    let issued: Vec<RealmId> = w.registry().issued().map(|(id, _)| id).collect();
    let ranges: Vec<(Ipa, u64)> = (0..cfg.slots)
        .flat_map(|b| (1..=cfg.csm_max_size.min(cfg.slots - b)).map(move |s| (slot(b), s)))
        .collect();
    for r in w.realms().filter(|r| r.lifecycle() == Lifecycle::Active) {
        let id = r.id();
        let apt = r.apt().expect("active realms have an APT");
        let pending = r.rec().and_then(|x| x.pending).is_some();
        if pending {
            out.push(Command::HostService { realm: id });
        } else {
            for &(base, size) in &ranges {
                out.push(Command::CsmCreate { realm: id, base, size });
            }
            for p in apt.provider_entries() {
                let Some(csm) = p.csm_id else { continue };
                out.push(Command::CsmDestroy { realm: id, csm });
                for &c in issued.iter().filter(|&&c| c != id) {
                    for perm in [Permission::ReadWrite, Permission::ReadOnly] {
                        out.push(Command::CsmShare { realm: id, csm, consumer: c, perm });
                    }
                }
                for s in &p.shares {
                    out.push(Command::CsmRevoke { realm: id, sharing: s.sharing_id });
                }
            }
            // Sharing ids a consumer might reserve: every live record naming
            // it, plus the next id each live provider would issue.
            let mut sids: Vec<SharingId> = Vec::new();
            for p in w.realms().filter(|p| p.id() != id) {
                let Some(papt) = p.apt() else { continue };
                for pe in papt.provider_entries() {
                    sids.extend(pe.shares.iter().filter(|s| s.c_id() == id).map(|s| s.sharing_id));
                }
                let next = papt.share_counters.get(&id).copied().unwrap_or(0);
                sids.push(SharingId::compose(p.id(), id, next));
            }
            sids.sort();
            sids.dedup();
            for &sharing in &sids {
                if apt.consumer(sharing).is_some() {
                    continue;
                }
                for &(base, size) in &ranges {
                    out.push(Command::CsmReserve { realm: id, sharing, base, size });
                }
            }
            for c in apt.consumer_entries() {
                if c.state == ConsumerState::Reserved {
                    out.push(Command::CsmAttach { realm: id, sharing: c.sharing_id });
                }
                out.push(Command::CsmDetach { realm: id, sharing: c.sharing_id });
            }
            if cfg.include_writes {
                for k in 0..cfg.slots {
                    if r.rtt().get(slot(k)).is_some_and(|e| e.perm == Permission::ReadWrite) {
                        out.push(Command::RealmWrite { realm: id, ipa: slot(k) });
                    }
                }
            }
        }
        for k in 0..cfg.slots {
            let ipa = slot(k);
            match r.rtt().get(ipa) {
                None => out.push(Command::HostMap { realm: id, ipa }),
                Some(_) => out.push(Command::HostReclaim { realm: id, ipa }),
            }
        }
        if cfg.include_host_attacks {
            if let Some(ipa) = (0..cfg.slots).map(slot).find(|&i| r.rtt().get(i).is_none()) {
                for g in w.space().granules().iter().filter(|g| g.state() == GranuleState::Data) {
                    if !r.rtt().entries().any(|(_, e)| e.pa == g.index()) {
                        out.push(Command::HostDoubleMap { realm: id, ipa, granule: g.index() });
                    }
                }
            }
        }
        if cfg.include_realm_destroy {
            out.push(Command::RealmDestroy { realm: id });
        }
    }
    if let Some(g) = w.space().first_in_state(GranuleState::Delegated) {
        out.push(Command::HostUndelegate { granule: g });
    }
    out
}

/// 128-bit digest of the canonical structure of a world.
pub fn canonical_key(w: &World) -> [u8; 16] {
    let mut h = Sha256::new();
    let mut put = |v: u64| h.update(v.to_le_bytes());
    for g in w.space().granules() {
        put(g.state() as u64);
        put(w.space().gpt().tag(g.index()).map_or(9, |t| t as u64));
        if g.state() == GranuleState::Data {
            match g.content_digest() {
                None => put(0),
                Some(d) => {
                    put(1);
                    for chunk in d.chunks(8) {
                        put(u64::from_le_bytes(chunk.try_into().unwrap()));
                    }
                }
            }
        }
    }
    for r in w.realms() {
        put(0xA0);
        put(r.id().0);
        put(r.rd_granule() as u64);
        put(r.lifecycle() as u64);
        for (ipa, e) in r.rtt().entries() {
            put(ipa.0);
            put(e.pa as u64);
            put(e.perm as u64);
        }
        put(0xA1);
        for (b, g) in r.rtt().tables() {
            put(b);
            put(g as u64);
        }
        put(0xA2);
        match r.rec() {
            None => put(0),
            Some(rec) => {
                put(rec.granule as u64 + 1);
                match rec.pending {
                    None => put(0),
                    Some(PendingRsi::CsmCreate { base, size }) => {
                        put(1);
                        put(base.0);
                        put(size);
                    }
                    Some(PendingRsi::CsmReserve { sharing, base, size }) => {
                        put(2);
                        put(sharing.p_id.0);
                        put(sharing.c_id.0);
                        put(sharing.counter as u64);
                        put(base.0);
                        put(size);
                    }
                }
            }
        }
        put(0xA3);
        if let Some(apt) = r.apt() {
            put(apt.granule as u64);
            for e in &apt.entries {
                match e {
                    AptEntry::Provider(p) => {
                        put(1);
                        put(p.csm_id.map_or(0, |c| c.0));
                        put(p.base.0);
                        put(p.size);
                        for s in &p.shares {
                            put(s.sharing_id.c_id.0);
                            put(s.sharing_id.counter as u64);
                            put(s.perm as u64);
                            put(s.attached as u64);
                        }
                        put(0xFF);
                    }
                    AptEntry::Consumer(c) => {
                        put(2);
                        put(c.sharing_id.p_id.0);
                        put(c.sharing_id.c_id.0);
                        put(c.sharing_id.counter as u64);
                        put(c.base.0);
                        put(c.size);
                        put(c.state as u64);
                    }
                }
            }
            for (c, n) in &apt.share_counters {
                put(c.0);
                put(*n as u64);
            }
        }
    }
    put(0xB0);
    for (id, live) in w.registry().issued() {
        put(id.0);
        put(live as u64);
    }
    put(w.registry().next_id());
    put(w.next_csm_id());
    let c = w.counters();
    put(c.delegations.wrapping_sub(c.undelegations));
    put(c.unmaps.wrapping_sub(c.flushes));
    put(c.realm_pas_breaches);
    let d = h.finalize();
    d[..16].try_into().unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Actor {
    World(SecurityState),
    Realm(RealmId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Reach {
    None,
    Read,
    ReadWrite,
}

impl Reach {
    fn from_perm(p: Permission) -> Reach {
        match p {
            Permission::ReadOnly => Reach::Read,
            Permission::ReadWrite => Reach::ReadWrite,
        }
    }
}

pub type AccessMatrix = BTreeMap<(Actor, GranuleIdx), Reach>;

/// Which PAS each security state may touch, written out independently of
/// the GPC implementation.
fn world_reach(state: SecurityState, tag: PasTag) -> bool {
    use PasTag as P;
    use SecurityState as S;
    matches!(
        (state, tag),
        (S::Root, _) | (S::Normal, P::Normal) | (S::Secure, P::Normal | P::Secure) | (S::Realm, P::Normal | P::Realm)
    )
}

/// Recomputes reachability by brute force from the GPT, the RTTs and the
/// APTs. Entries with no access are omitted.
pub fn access_oracle(w: &World) -> AccessMatrix {
    let mut m = AccessMatrix::new();
    let tags = w.space().gpt().tags();
    for state in SecurityState::ALL {
        for (g, &tag) in tags.iter().enumerate() {
            if world_reach(state, tag) {
                m.insert((Actor::World(state), g), Reach::ReadWrite);
            }
        }
    }
    for r in w.realms().filter(|r| r.lifecycle() == Lifecycle::Active) {
        for (ipa, e) in r.rtt().entries() {
            let tag = tags[e.pa];
            let reach = if r.in_protected(ipa) {
                if tag != PasTag::Realm {
                    continue;
                }
                let window = r.apt().and_then(|a| {
                    a.consumer_entries()
                        .find(|c| c.state == ConsumerState::Attached && c.covers(ipa))
                });
                match window {
                    None => Reach::ReadWrite,
                    Some(c) => {
                        let sid = c.sharing_id;
                        let perm = w
                            .realm(sid.p_id)
                            .and_then(|p| p.apt())
                            .and_then(|a| a.provider_for_sharing(sid))
                            .and_then(|p| p.shares.iter().find(|s| s.sharing_id == sid))
                            .map(|s| s.perm);
                        match perm {
                            Some(p) => Reach::from_perm(p),
                            None => continue,
                        }
                    }
                }
            } else {
                if tag != PasTag::Normal {
                    continue;
                }
                Reach::ReadWrite
            };
            let slot = m.entry((Actor::Realm(r.id()), e.pa)).or_insert(Reach::None);
            *slot = (*slot).max(reach);
        }
    }
    m
}

/// The same matrix computed through the operational access paths, probing
/// realm addresses `0..slots`.
pub fn operational_access(w: &World, slots: u64) -> AccessMatrix {
    let mut m = AccessMatrix::new();
    let mut space = w.space().clone();
    for state in SecurityState::ALL {
        for g in 0..space.len() {
            let mut buf = [0u8; 1];
            let r = space.physical_access(state, g, AccessKind::Read, 0, &mut buf).is_ok();
            let wr = space.physical_access(state, g, AccessKind::Write, 0, &mut buf).is_ok();
            let reach = match (r, wr) {
                (_, true) => Reach::ReadWrite,
                (true, false) => Reach::Read,
                _ => continue,
            };
            m.insert((Actor::World(state), g), reach);
        }
    }
    for r in w.realms() {
        for k in 0..slots {
            let ipa = Ipa::from_granule(k);
            let read = w.probe_realm_access(r.id(), ipa, AccessKind::Read);
            let write = w.probe_realm_access(r.id(), ipa, AccessKind::Write);
            let (g, reach) = match (read, write) {
                (_, Ok(g)) => (g, Reach::ReadWrite),
                (Ok(g), Err(_)) => (g, Reach::Read),
                _ => continue,
            };
            let slot = m.entry((Actor::Realm(r.id()), g)).or_insert(Reach::None);
            *slot = (*slot).max(reach);
        }
    }
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub invariant: String,
    pub detail: String,
    pub depth: usize,
    pub steps: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplorationReport {
    pub config: ExplorationConfig,
    pub states_visited: usize,
    pub transitions: usize,
    pub depth_reached: usize,
    /// Full reachable space up to the depth bound was covered.
    pub complete: bool,
    pub budget_exceeded: bool,
    pub oracle_checks: usize,
    pub oracle_mismatches: usize,
    pub violations: Vec<Counterexample>,
    pub wall_ms: u128,
}

impl ExplorationReport {
    pub fn violation_of(&self, inv: Invariant) -> Option<&Counterexample> {
        let name = format!("{inv:?}");
        self.violations.iter().find(|c| c.invariant == name)
    }
}

type Key = [u8; 16];

/// How a state was first reached.
type Parent = Option<(Key, Command)>;

fn commands_to(visited: &HashMap<Key, Parent>, mut key: Key) -> Vec<Command> {
    let mut cmds = Vec::new();
    while let Some((parent, cmd)) = visited[&key] {
        cmds.push(cmd);
        key = parent;
    }
    cmds.reverse();
    cmds
}

/// Kind of problem found at one state.
enum Finding {
    Invariant(Invariant, String),
    Oracle(String),
}

fn check_state(w: &World, slots: u64) -> Vec<Finding> {
    let mut out: Vec<Finding> = Vec::new();
    let mut seen = Vec::new();
    for v in check_invariants(w) {
        if !seen.contains(&v.invariant) {
            seen.push(v.invariant);
            out.push(Finding::Invariant(v.invariant, v.detail));
        }
    }
    let oracle = access_oracle(w);
    let op = operational_access(w, slots);
    if oracle != op {
        let diff = oracle
            .iter()
            .find(|(k, v)| op.get(k) != Some(v))
            .map(|(k, v)| format!("{k:?}: oracle {v:?}, operational {:?}", op.get(k)))
            .or_else(|| {
                op.iter()
                    .find(|(k, _)| !oracle.contains_key(k))
                    .map(|(k, v)| format!("{k:?}: oracle none, operational {v:?}"))
            })
            .unwrap_or_default();
        out.push(Finding::Oracle(diff));
    }
    out
}

/// States expanded per parallel batch.
const BATCH: usize = 2048;

pub fn explore(cfg: &ExplorationConfig) -> ExplorationReport {
    explore_from(cfg, initial_world(cfg))
}

/// Explores from `init`. Only state keys and parent links are stored;
/// frontier states are rebuilt by replaying their command path.
pub fn explore_from(cfg: &ExplorationConfig, init: World) -> ExplorationReport {
    let start = Instant::now();
    let mut visited: HashMap<Key, Parent> = HashMap::new();
    let root = canonical_key(&init);
    visited.insert(root, None);
    let mut report = ExplorationReport {
        config: cfg.clone(),
        states_visited: 1,
        transitions: 0,
        depth_reached: 0,
        complete: false,
        budget_exceeded: false,
        oracle_checks: 0,
        oracle_mismatches: 0,
        violations: Vec::new(),
        wall_ms: 0,
    };
    let record = |report: &mut ExplorationReport, visited: &HashMap<Key, Parent>, key, findings: Vec<Finding>| {
        report.oracle_checks += 1;
        for f in findings {
            let (name, detail) = match f {
                Finding::Invariant(i, d) => (format!("{i:?}"), d),
                Finding::Oracle(d) => {
                    report.oracle_mismatches += 1;
                    ("AccessOracle".to_string(), d)
                }
            };
            if report.violations.iter().all(|c| c.invariant != name) {
                let steps: Vec<String> = commands_to(visited, key).iter().map(|c| c.to_string()).collect();
                report.violations.push(Counterexample {
                    invariant: name,
                    detail,
                    depth: steps.len(),
                    steps,
                });
            }
        }
    };
    record(&mut report, &visited, root, check_state(&init, cfg.slots));

    let mut frontier: Vec<Key> = vec![root];
    let mut depth = 0;
    'layers: while depth < cfg.depth && !frontier.is_empty() {
        if cfg.stop_on_violation && !report.violations.is_empty() {
            break;
        }
        depth += 1;
        let mut next = Vec::new();
        for batch in frontier.chunks(BATCH) {
            let paths: Vec<Vec<Command>> = batch.iter().map(|k| commands_to(&visited, *k)).collect();
            let seen = &visited;
            let expanded: Vec<(Key, Key, Command, Option<Vec<Finding>>)> = batch
                .par_iter()
                .zip(paths.par_iter())
                .flat_map_iter(|(pk, path)| {
                    let mut w = init.clone();
                    for c in path {
                        apply(&mut w, *c);
                    }
                    enabled_commands(&w, cfg)
                        .into_iter()
                        .map(|cmd| {
                            let mut n = w.clone();
                            apply(&mut n, cmd);
                            let key = canonical_key(&n);
                            let findings = (!seen.contains_key(&key)).then(|| check_state(&n, cfg.slots));
                            (key, *pk, cmd, findings)
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            report.transitions += expanded.len();
            for (key, parent, cmd, findings) in expanded {
                let Some(findings) = findings else { continue };
                if visited.contains_key(&key) {
                    continue;
                }
                if visited.len() >= cfg.state_cap {
                    report.budget_exceeded = true;
                    break 'layers;
                }
                visited.insert(key, Some((parent, cmd)));
                record(&mut report, &visited, key, findings);
                next.push(key);
            }
        }
        if !next.is_empty() {
            report.depth_reached = depth;
        }
        frontier = next;
    }
    report.states_visited = visited.len();
    report.complete = !report.budget_exceeded && (depth >= cfg.depth || frontier.is_empty());
    report.violations.sort_by_key(|c| (c.depth, c.invariant.clone()));
    report.wall_ms = start.elapsed().as_millis();
    report
}
