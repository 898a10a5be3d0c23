//! Realm Management Monitor model.
//!
//! [`World`] is the complete simulated machine: physical memory, every
//! realm's metadata, the realm-identifier registry and the platform
//! attestation key. Every RMI/RSI handler is a method that runs as one
//! atomic transaction over it. RMI commands name their realm by the RD
//! granule, as the hypervisor does; RSI commands are issued by a realm and
//! name the caller by its [`RealmId`].

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attestation::Platform;
use crate::csm::{Apt, AptEntry, ConsumerState};
use crate::error::{AccessError, FaultReason, RmmError, RmmResult};
use crate::granule::{GranuleSpace, GranuleState, SecurityState};
use crate::measurement::{extend_rim, initial_rim, pad_granule, Digest};
use crate::types::{AccessKind, CsmId, GranuleIdx, Ipa, Permission, RealmId, SharingId, GRANULE_SIZE};

/// IPAs covered by one RTT granule.
pub const RTT_SPAN: u64 = 512;

pub const MIN_IPA_WIDTH: u8 = 16;
pub const MAX_IPA_WIDTH: u8 = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Lifecycle {
    New,
    Active,
    /// Teardown in progress inside `rmi_realm_destroy`.
    Dying,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct RttEntry {
    pub pa: GranuleIdx,
    pub perm: Permission,
}

/// Stage-2 table: a flat map of valid entries plus the table granules that
/// back each 512-IPA block.
#[derive(Clone, Debug, Default)]
pub struct Rtt {
    entries: BTreeMap<u64, RttEntry>,
    tables: BTreeMap<u64, GranuleIdx>,
}

impl Rtt {
    pub fn get(&self, ipa: Ipa) -> Option<RttEntry> {
        self.entries.get(&ipa.granule()).copied()
    }

    pub fn is_backed(&self, ipa: Ipa) -> bool {
        self.tables.contains_key(&(ipa.granule() / RTT_SPAN))
    }

    /// Valid entries as (IPA, entry).
    pub fn entries(&self) -> impl Iterator<Item = (Ipa, RttEntry)> + '_ {
        self.entries.iter().map(|(g, e)| (Ipa::from_granule(*g), *e))
    }

    pub fn table_granules(&self) -> impl Iterator<Item = GranuleIdx> + '_ {
        self.tables.values().copied()
    }

    /// (block number, table granule) pairs.
    pub fn tables(&self) -> impl Iterator<Item = (u64, GranuleIdx)> + '_ {
        self.tables.iter().map(|(b, g)| (*b, *g))
    }

    pub fn table_budget(&self) -> usize {
        self.tables.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn insert(&mut self, ipa: Ipa, e: RttEntry) {
        self.entries.insert(ipa.granule(), e);
    }

    fn remove(&mut self, ipa: Ipa) -> Option<RttEntry> {
        self.entries.remove(&ipa.granule())
    }
}

/// Result of `RMI_RTT_READ_ENTRY`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RttReadout {
    Unassigned,
    Assigned { pa: GranuleIdx, perm: Permission },
}

/// Reason a REC returned to the host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RecExit {
    PRealmCsm { ipa_base: Ipa, size: u64 },
    CRealmCsm { ipa_base: Ipa, size: u64 },
    RemoveCsm { ipa_base: Ipa, size: u64 },
}

impl RecExit {
    pub fn name(&self) -> &'static str {
        match self {
            RecExit::PRealmCsm { .. } => "PRealmCsm",
            RecExit::CRealmCsm { .. } => "CRealmCsm",
            RecExit::RemoveCsm { .. } => "RemoveCsm",
        }
    }

    pub fn range(&self) -> (Ipa, u64) {
        match *self {
            RecExit::PRealmCsm { ipa_base, size }
            | RecExit::CRealmCsm { ipa_base, size }
            | RecExit::RemoveCsm { ipa_base, size } => (ipa_base, size),
        }
    }
}

/// An RSI call suspended until the host has serviced its exit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PendingRsi {
    CsmCreate { base: Ipa, size: u64 },
    CsmReserve { sharing: SharingId, base: Ipa, size: u64 },
}

impl PendingRsi {
    pub fn exit(&self) -> RecExit {
        match *self {
            PendingRsi::CsmCreate { base, size } => RecExit::PRealmCsm { ipa_base: base, size },
            PendingRsi::CsmReserve { base, size, .. } => RecExit::CRealmCsm { ipa_base: base, size },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rec {
    pub granule: GranuleIdx,
    pub pending: Option<PendingRsi>,
}

/// Outcome of an RSI call that may need host work before it can finish.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RsiOutcome<T> {
    Done(T),
    Pending(RecExit),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RsiCompletion {
    CsmCreated(CsmId),
    Reserved(SharingId),
}

/// Result of re-entering a REC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Reentry {
    /// Nothing was pending.
    Idle,
    Completed(RsiCompletion),
    /// Host work is still missing; the same exit is raised again.
    Pending(RecExit),
}

/// Realm Descriptor plus the per-realm metadata hanging off it.
#[derive(Clone, Debug)]
pub struct Realm {
    pub(crate) id: RealmId,
    pub(crate) rd_granule: GranuleIdx,
    pub(crate) lifecycle: Lifecycle,
    pub(crate) ipa_width: u8,
    pub(crate) rim: Digest,
    pub(crate) rtt: Rtt,
    pub(crate) rec: Option<Rec>,
    pub(crate) apt: Option<Apt>,
}

impl Realm {
    pub fn id(&self) -> RealmId {
        self.id
    }
    pub fn rd_granule(&self) -> GranuleIdx {
        self.rd_granule
    }
    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }
    pub fn ipa_width(&self) -> u8 {
        self.ipa_width
    }
    pub fn rim(&self) -> Digest {
        self.rim
    }
    pub fn rtt(&self) -> &Rtt {
        &self.rtt
    }
    pub fn rec(&self) -> Option<&Rec> {
        self.rec.as_ref()
    }
    pub fn apt(&self) -> Option<&Apt> {
        self.apt.as_ref()
    }

    /// First address of the unprotected half.
    pub fn unprotected_base(&self) -> u64 {
        1u64 << (self.ipa_width - 1)
    }

    pub fn in_protected(&self, ipa: Ipa) -> bool {
        ipa.0 < self.unprotected_base()
    }

    pub fn in_unprotected(&self, ipa: Ipa) -> bool {
        ipa.0 >= self.unprotected_base() && ipa.0 < (1u64 << self.ipa_width)
    }

    /// `size` granules from `base` lie aligned inside the protected half.
    pub fn protected_range_ok(&self, base: Ipa, size: u64) -> bool {
        size >= 1
            && base.is_aligned()
            && base
                .0
                .checked_add(size.saturating_mul(GRANULE_SIZE as u64))
                .is_some_and(|end| end <= self.unprotected_base())
    }

    /// Consumer entry whose window covers `ipa`.
    pub(crate) fn consumer_window(&self, ipa: Ipa) -> Option<&crate::csm::ConsumerEntry> {
        self.apt.as_ref()?.entries.iter().find_map(|e| match e {
            AptEntry::Consumer(c) if c.covers(ipa) => Some(c),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
enum RegistryEntry {
    Live(GranuleIdx),
    Tombstone,
}

/// Realm identifier registry.
#[derive(Clone, Debug)]
pub struct IdRegistry {
    next_id: u64,
    entries: BTreeMap<RealmId, RegistryEntry>,
}

impl IdRegistry {
    fn new() -> IdRegistry {
        IdRegistry {
            next_id: 1,
            entries: BTreeMap::new(),
        }
    }

    fn allocate(&mut self, rd: GranuleIdx) -> RealmId {
        let id = RealmId(self.next_id);
        self.next_id += 1;
        self.entries.insert(id, RegistryEntry::Live(rd));
        id
    }

    /// RD granule of a live realm.
    pub fn lookup(&self, id: RealmId) -> RmmResult<GranuleIdx> {
        match self.entries.get(&id) {
            Some(RegistryEntry::Live(rd)) => Ok(*rd),
            _ => Err(RmmError::NoSuchRealm),
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Every identifier ever issued, with whether it is still live.
    pub fn issued(&self) -> impl Iterator<Item = (RealmId, bool)> + '_ {
        self.entries
            .iter()
            .map(|(id, e)| (*id, matches!(e, RegistryEntry::Live(_))))
    }
}

/// Who performed an access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Actor {
    World(SecurityState),
    Realm(RealmId),
}

/// Side effects recorded for the trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Event {
    TlbFlush { realm: RealmId, ipa: Ipa },
    Fault { actor: Actor, detail: String },
    Exit { realm: RealmId, exit: RecExit },
}

/// Monotone counters the invariant checker relies on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub delegations: u64,
    pub undelegations: u64,
    pub unmaps: u64,
    pub flushes: u64,
    /// Successful non-root, non-realm accesses to Realm PAS.
    pub realm_pas_breaches: u64,
}

/// Deliberately broken behaviours used to check that the invariant checker
/// and the explorer have teeth.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mutation {
    /// `rsi_csm_attach` skips the P/C size equality check.
    SkipAttachSizeCheck,
    /// `rsi_csm_revoke` forgets to unmap the consumer window.
    SkipRevokeUnmap,
}

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub granules: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            granules: GranuleSpace::DEFAULT_GRANULES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub(crate) space: GranuleSpace,
    pub(crate) registry: IdRegistry,
    pub(crate) realms: BTreeMap<RealmId, Realm>,
    pub(crate) by_rd: BTreeMap<GranuleIdx, RealmId>,
    pub(crate) next_csm: u64,
    pub(crate) platform: Platform,
    pub(crate) events: Vec<Event>,
    pub(crate) counters: Counters,
    pub(crate) mutation: Option<Mutation>,
}

impl World {
    pub fn new(config: &WorldConfig) -> World {
        World {
            space: GranuleSpace::new(config.granules),
            registry: IdRegistry::new(),
            realms: BTreeMap::new(),
            by_rd: BTreeMap::new(),
            next_csm: 1,
            platform: Platform::boot(config.seed),
            events: Vec::new(),
            counters: Counters::default(),
            mutation: None,
        }
    }

    #[cfg(feature = "mutants")]
    pub fn set_mutation(&mut self, m: Option<Mutation>) {
        self.mutation = m;
    }

    pub(crate) fn mutated(&self, m: Mutation) -> bool {
        self.mutation == Some(m)
    }

    pub fn space(&self) -> &GranuleSpace {
        &self.space
    }

    pub fn registry(&self) -> &IdRegistry {
        &self.registry
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn realms(&self) -> impl Iterator<Item = &Realm> {
        self.realms.values()
    }

    pub fn realm(&self, id: RealmId) -> Option<&Realm> {
        self.realms.get(&id)
    }

    pub fn realm_by_rd(&self, rd: GranuleIdx) -> Option<&Realm> {
        self.by_rd.get(&rd).and_then(|id| self.realms.get(id))
    }

    pub fn next_csm_id(&self) -> u64 {
        self.next_csm
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn registry_lookup(&self, id: RealmId) -> RmmResult<&Realm> {
        let rd = self.registry.lookup(id)?;
        self.realm_by_rd(rd).ok_or(RmmError::NoSuchRealm)
    }

    fn rd_to_id(&self, rd: GranuleIdx) -> RmmResult<RealmId> {
        self.by_rd.get(&rd).copied().ok_or(RmmError::NoSuchRealm)
    }

    pub(crate) fn realm_mut(&mut self, id: RealmId) -> RmmResult<&mut Realm> {
        self.realms.get_mut(&id).ok_or(RmmError::NoSuchRealm)
    }

    pub(crate) fn realm_ref(&self, id: RealmId) -> RmmResult<&Realm> {
        self.realms.get(&id).ok_or(RmmError::NoSuchRealm)
    }

    pub(crate) fn emit_exit(&mut self, realm: RealmId, exit: RecExit) {
        self.events.push(Event::Exit { realm, exit });
    }

    /// Invalidates one stage-2 entry and performs the matching TLB
    /// maintenance.
    pub(crate) fn unmap(&mut self, realm: RealmId, ipa: Ipa) -> Option<RttEntry> {
        let e = self.realms.get_mut(&realm)?.rtt.remove(ipa)?;
        self.counters.unmaps += 1;
        self.counters.flushes += 1;
        self.events.push(Event::TlbFlush { realm, ipa });
        Some(e)
    }

    // ---- granule delegation -------------------------------------------

    pub fn granule_delegate(&mut self, index: GranuleIdx) -> RmmResult<()> {
        self.space.delegate(index)?;
        self.counters.delegations += 1;
        Ok(())
    }

    pub fn granule_undelegate(&mut self, index: GranuleIdx) -> RmmResult<()> {
        self.space.undelegate(index)?;
        self.counters.undelegations += 1;
        Ok(())
    }

    // ---- realm lifecycle ----------------------------------------------

    pub fn rmi_realm_create(&mut self, rd: GranuleIdx, ipa_width: u8) -> RmmResult<RealmId> {
        if !(MIN_IPA_WIDTH..=MAX_IPA_WIDTH).contains(&ipa_width) {
            return Err(RmmError::BadState);
        }
        self.space.claim(rd, GranuleState::Rd)?;
        let id = self.registry.allocate(rd);
        self.realms.insert(
            id,
            Realm {
                id,
                rd_granule: rd,
                lifecycle: Lifecycle::New,
                ipa_width,
                rim: initial_rim(ipa_width),
                rtt: Rtt::default(),
                rec: None,
                apt: None,
            },
        );
        self.by_rd.insert(rd, id);
        Ok(id)
    }

    pub fn rmi_rec_create(&mut self, rd: GranuleIdx, rec_granule: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if realm.lifecycle != Lifecycle::New {
            return Err(RmmError::BadState);
        }
        if realm.rec.is_some() {
            return Err(RmmError::AlreadyExists);
        }
        self.space.claim(rec_granule, GranuleState::Rec)?;
        self.realm_mut(id)?.rec = Some(Rec {
            granule: rec_granule,
            pending: None,
        });
        Ok(())
    }

    pub fn rmi_apt_create(&mut self, rd: GranuleIdx, apt_granule: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if realm.lifecycle != Lifecycle::New {
            return Err(RmmError::BadState);
        }
        if realm.apt.is_some() {
            return Err(RmmError::AlreadyExists);
        }
        self.space.claim(apt_granule, GranuleState::Apt)?;
        self.realm_mut(id)?.apt = Some(Apt::new(apt_granule));
        Ok(())
    }

    /// Only valid while the realm is being torn down.
    pub fn rmi_apt_destroy(&mut self, rd: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if realm.lifecycle != Lifecycle::Dying {
            return Err(RmmError::BadState);
        }
        let apt = realm.apt.as_ref().ok_or(RmmError::BadState)?;
        if !apt.entries.is_empty() {
            return Err(RmmError::NotEmpty);
        }
        let g = apt.granule;
        self.realm_mut(id)?.apt = None;
        self.space.release(g);
        Ok(())
    }

    pub fn rmi_rtt_create(&mut self, rd: GranuleIdx, rtt_granule: GranuleIdx, ipa: Ipa) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if realm.lifecycle == Lifecycle::Dying {
            return Err(RmmError::BadState);
        }
        if ipa.0 >= 1u64 << realm.ipa_width {
            return Err(RmmError::Unaligned);
        }
        if realm.rtt.is_backed(ipa) {
            return Err(RmmError::AlreadyExists);
        }
        self.space.claim(rtt_granule, GranuleState::Rtt)?;
        self.realm_mut(id)?
            .rtt
            .tables
            .insert(ipa.granule() / RTT_SPAN, rtt_granule);
        Ok(())
    }

    pub fn rmi_rtt_read_entry(&self, rd: GranuleIdx, ipa: Ipa) -> RttReadout {
        match self.realm_by_rd(rd).and_then(|r| r.rtt.get(ipa)) {
            Some(e) => RttReadout::Assigned { pa: e.pa, perm: e.perm },
            None => RttReadout::Unassigned,
        }
    }

    /// Checks shared by both data-create flavours; returns the realm id.
    fn check_data_map(&self, rd: GranuleIdx, granule: GranuleIdx, ipa: Ipa) -> RmmResult<RealmId> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if !ipa.is_aligned() || !realm.in_protected(ipa) {
            return Err(RmmError::Unaligned);
        }
        if !realm.rtt.is_backed(ipa) {
            return Err(RmmError::TableMiss);
        }
        if realm.consumer_window(ipa).is_some() {
            return Err(RmmError::CsmWindow);
        }
        if realm.rtt.get(ipa).is_some() {
            return Err(RmmError::AlreadyMapped);
        }
        match self.space.state(granule) {
            None => Err(RmmError::OutOfRange),
            Some(GranuleState::Delegated) => Ok(id),
            Some(GranuleState::Data) => Err(RmmError::AlreadyMapped),
            Some(_) => Err(RmmError::NotDelegated),
        }
    }

    /// Measured load of initial image content while the realm is New.
    pub fn rmi_data_create(
        &mut self,
        rd: GranuleIdx,
        granule: GranuleIdx,
        ipa: Ipa,
        content: &[u8],
    ) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        if self.realm_ref(id)?.lifecycle != Lifecycle::New {
            return Err(RmmError::BadState);
        }
        self.check_data_map(rd, granule, ipa)?;
        let page = pad_granule(content);
        self.space.claim(granule, GranuleState::Data)?;
        self.space.granule_mut(granule).unwrap().write(0, &page);
        let realm = self.realm_mut(id)?;
        realm.rim = extend_rim(&realm.rim, ipa, &page);
        realm.rtt.insert(
            ipa,
            RttEntry {
                pa: granule,
                perm: Permission::ReadWrite,
            },
        );
        Ok(())
    }

    /// Unmeasured mapping of a zero granule into a running realm. Inside a
    /// provider CSM range the new granule is also mapped into every
    /// attached consumer at the same offset.
    pub fn rmi_data_create_unknown(&mut self, rd: GranuleIdx, granule: GranuleIdx, ipa: Ipa) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        if self.realm_ref(id)?.lifecycle != Lifecycle::Active {
            return Err(RmmError::BadState);
        }
        self.check_data_map(rd, granule, ipa)?;
        let peers = self.attached_peer_slots(id, ipa);
        for (c, c_ipa, _) in &peers {
            let cr = self.realm_ref(*c)?;
            if !cr.rtt.is_backed(*c_ipa) {
                return Err(RmmError::TableMiss);
            }
        }
        self.space.claim(granule, GranuleState::Data)?;
        self.realm_mut(id)?.rtt.insert(
            ipa,
            RttEntry {
                pa: granule,
                perm: Permission::ReadWrite,
            },
        );
        for (c, c_ipa, perm) in peers {
            self.realm_mut(c)?.rtt.insert(c_ipa, RttEntry { pa: granule, perm });
        }
        Ok(())
    }

    /// For an IPA inside one of `realm`'s provider ranges, the matching slot
    /// of every attached consumer.
    pub(crate) fn attached_peer_slots(&self, realm: RealmId, ipa: Ipa) -> Vec<(RealmId, Ipa, Permission)> {
        let Some(apt) = self.realms.get(&realm).and_then(|r| r.apt.as_ref()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for p in apt.provider_entries().filter(|p| p.covers(ipa)) {
            let offset = ipa.granule() - p.base.granule();
            for s in p.shares.iter().filter(|s| s.attached) {
                if let Some(c) = self.consumer_entry(s.sharing_id) {
                    if c.state == ConsumerState::Attached && offset < c.size {
                        out.push((s.sharing_id.c_id, c.base.add_granules(offset), s.perm));
                    }
                }
            }
        }
        out
    }

    pub(crate) fn consumer_entry(&self, sid: SharingId) -> Option<&crate::csm::ConsumerEntry> {
        self.realms
            .get(&sid.c_id)?
            .apt
            .as_ref()?
            .consumer(sid)
    }

    /// Wipes and unmaps a data granule, returning it to Delegated.
    pub fn rmi_data_destroy(&mut self, rd: GranuleIdx, ipa: Ipa) -> RmmResult<GranuleIdx> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        let entry = realm.rtt.get(ipa).ok_or(RmmError::NotMapped)?;
        if !realm.in_protected(ipa) {
            return Err(RmmError::NotMapped);
        }
        if realm
            .consumer_window(ipa)
            .is_some_and(|c| c.state == ConsumerState::Attached)
        {
            // The granule belongs to the provider.
            return Err(RmmError::CsmWindow);
        }
        let peers = self.attached_peer_slots(id, ipa);
        self.unmap(id, ipa);
        for (c, c_ipa, _) in peers {
            self.unmap(c, c_ipa);
        }
        self.space.release(entry.pa);
        Ok(entry.pa)
    }

    /// Maps a normal-world granule into the unprotected half.
    pub fn rmi_rtt_map_unprotected(&mut self, rd: GranuleIdx, ipa: Ipa, granule: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if !ipa.is_aligned() || !realm.in_unprotected(ipa) {
            return Err(RmmError::Unaligned);
        }
        if !realm.rtt.is_backed(ipa) {
            return Err(RmmError::TableMiss);
        }
        if realm.rtt.get(ipa).is_some() {
            return Err(RmmError::AlreadyMapped);
        }
        match self.space.state(granule) {
            None => return Err(RmmError::OutOfRange),
            Some(GranuleState::Undelegated) => {}
            Some(_) => return Err(RmmError::BadState),
        }
        self.realm_mut(id)?.rtt.insert(
            ipa,
            RttEntry {
                pa: granule,
                perm: Permission::ReadWrite,
            },
        );
        Ok(())
    }

    pub fn rmi_rtt_unmap_unprotected(&mut self, rd: GranuleIdx, ipa: Ipa) -> RmmResult<GranuleIdx> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if !realm.in_unprotected(ipa) {
            return Err(RmmError::Unaligned);
        }
        self.unmap(id, ipa).map(|e| e.pa).ok_or(RmmError::NotMapped)
    }

    pub fn rmi_realm_activate(&mut self, rd: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_mut(id)?;
        if realm.lifecycle != Lifecycle::New {
            return Err(RmmError::BadState);
        }
        if realm.apt.is_none() {
            return Err(RmmError::MissingApt);
        }
        realm.lifecycle = Lifecycle::Active;
        Ok(())
    }

    /// Full teardown: destroy owned CSMs, detach from consumed ones, destroy
    /// the APT, then wipe every remaining realm granule back to Delegated.
    pub fn rmi_realm_destroy(&mut self, rd: GranuleIdx) -> RmmResult<()> {
        let id = self.rd_to_id(rd)?;
        self.begin_teardown(id)?;

        let entries: Vec<AptEntry> = self
            .realm_ref(id)?
            .apt
            .as_ref()
            .map(|a| a.entries.clone())
            .unwrap_or_default();
        for e in &entries {
            match e {
                AptEntry::Provider(p) => match p.csm_id {
                    Some(csm) => self.destroy_csm(id, csm)?,
                    None => {
                        // Creation never completed.
                        let base = p.base;
                        self.realm_mut(id)?
                            .apt
                            .as_mut()
                            .unwrap()
                            .entries
                            .retain(|e| e.base() != base);
                    }
                },
                AptEntry::Consumer(c) => self.detach(id, c.sharing_id)?,
            }
        }
        if self.realm_ref(id)?.apt.is_some() {
            self.rmi_apt_destroy(rd)?;
        }

        let mappings: Vec<(Ipa, RttEntry)> = self.realm_ref(id)?.rtt.entries().collect();
        for (ipa, e) in mappings {
            let protected = self.realm_ref(id)?.in_protected(ipa);
            self.unmap(id, ipa);
            if protected {
                self.space.release(e.pa);
            }
        }
        let realm = self.realms.remove(&id).expect("realm checked above");
        for t in realm.rtt.table_granules() {
            self.space.release(t);
        }
        if let Some(rec) = realm.rec {
            self.space.release(rec.granule);
        }
        self.space.release(realm.rd_granule);
        self.by_rd.remove(&realm.rd_granule);
        self.registry
            .entries
            .insert(id, RegistryEntry::Tombstone);
        Ok(())
    }

    pub(crate) fn begin_teardown(&mut self, id: RealmId) -> RmmResult<()> {
        let realm = self.realm_mut(id)?;
        if realm.lifecycle == Lifecycle::Dying {
            return Err(RmmError::BadState);
        }
        realm.lifecycle = Lifecycle::Dying;
        if let Some(rec) = realm.rec.as_mut() {
            rec.pending = None;
        }
        Ok(())
    }

    // ---- execution ------------------------------------------------------

    /// `RMI_REC_ENTER`: resumes the realm and revalidates any pending RSI.
    pub fn rec_enter(&mut self, rd: GranuleIdx) -> RmmResult<Reentry> {
        let id = self.rd_to_id(rd)?;
        let realm = self.realm_ref(id)?;
        if realm.lifecycle != Lifecycle::Active {
            return Err(RmmError::BadState);
        }
        let Some(pending) = realm.rec.as_ref().and_then(|r| r.pending) else {
            return Ok(Reentry::Idle);
        };
        match pending {
            PendingRsi::CsmCreate { base, size } => {
                let populated = (0..size).all(|k| realm.rtt.get(base.add_granules(k)).is_some());
                if !populated {
                    self.emit_exit(id, pending.exit());
                    return Ok(Reentry::Pending(pending.exit()));
                }
                let csm = CsmId(self.next_csm);
                self.next_csm += 1;
                let realm = self.realm_mut(id)?;
                realm.rec.as_mut().unwrap().pending = None;
                realm
                    .apt
                    .as_mut()
                    .unwrap()
                    .provider_mut_by_base(base)
                    .expect("pending create keeps its entry")
                    .csm_id = Some(csm);
                Ok(Reentry::Completed(RsiCompletion::CsmCreated(csm)))
            }
            PendingRsi::CsmReserve { sharing, base, size } => {
                let empty = (0..size).all(|k| realm.rtt.get(base.add_granules(k)).is_none());
                if !empty {
                    self.emit_exit(id, pending.exit());
                    return Ok(Reentry::Pending(pending.exit()));
                }
                let realm = self.realm_mut(id)?;
                realm.rec.as_mut().unwrap().pending = None;
                realm
                    .apt
                    .as_mut()
                    .unwrap()
                    .consumer_mut(sharing)
                    .expect("pending reserve keeps its entry")
                    .state = ConsumerState::Reserved;
                Ok(Reentry::Completed(RsiCompletion::Reserved(sharing)))
            }
        }
    }

    /// Realm-side check that the caller may issue an RSI right now.
    pub(crate) fn rsi_caller(&self, caller: RealmId) -> RmmResult<&Realm> {
        let realm = self.realm_ref(caller)?;
        if realm.lifecycle != Lifecycle::Active {
            return Err(RmmError::BadState);
        }
        match &realm.rec {
            None => Err(RmmError::BadState),
            Some(r) if r.pending.is_some() => Err(RmmError::RsiPending),
            Some(_) => Ok(realm),
        }
    }

    // ---- memory access --------------------------------------------------

    /// Stage-2 translation plus GPC for one granule-sized access.
    pub(crate) fn translate(&self, realm: RealmId, ipa: Ipa, kind: AccessKind) -> Result<GranuleIdx, AccessError> {
        let r = self.realms.get(&realm).ok_or(AccessError::NoSuchRealm)?;
        let fault = |reason| AccessError::RealmFault {
            realm,
            ipa,
            kind,
            reason,
        };
        if r.lifecycle != Lifecycle::Active {
            return Err(fault(FaultReason::NotRunnable));
        }
        let e = r.rtt.get(ipa).ok_or(fault(FaultReason::Unmapped))?;
        if !e.perm.allows(kind) {
            return Err(fault(FaultReason::Permission));
        }
        let tag = self.space.gpt().tag(e.pa).ok_or(fault(FaultReason::Unmapped))?;
        if !crate::granule::gpc_check(SecurityState::Realm, tag) {
            return Err(fault(FaultReason::Gpc));
        }
        Ok(e.pa)
    }

    /// Whether `realm` could perform `kind` at `ipa`, without side effects.
    pub fn probe_realm_access(&self, realm: RealmId, ipa: Ipa, kind: AccessKind) -> Result<GranuleIdx, AccessError> {
        self.translate(realm, ipa, kind)
    }

    fn record_fault(&mut self, actor: Actor, err: &AccessError) {
        self.events.push(Event::Fault {
            actor,
            detail: err.to_string(),
        });
    }

    /// Splits `[ipa, ipa+len)` into per-granule chunks.
    fn chunks(ipa: Ipa, len: usize) -> Vec<(Ipa, usize, usize)> {
        let mut out = Vec::new();
        let mut addr = ipa.0;
        let mut done = 0;
        while done < len {
            let off = (addr % GRANULE_SIZE as u64) as usize;
            let n = (GRANULE_SIZE - off).min(len - done);
            out.push((Ipa(addr - off as u64), off, n));
            addr += n as u64;
            done += n;
        }
        out
    }

    pub fn realm_read(&mut self, realm: RealmId, ipa: Ipa, len: usize) -> Result<Vec<u8>, AccessError> {
        let mut out = vec![0u8; len];
        let mut pos = 0;
        for (page, off, n) in Self::chunks(ipa, len) {
            match self.translate(realm, page, AccessKind::Read) {
                Ok(g) => self.space.granules()[g].read(off, &mut out[pos..pos + n]),
                Err(e) => {
                    self.record_fault(Actor::Realm(realm), &e);
                    return Err(e);
                }
            }
            pos += n;
        }
        Ok(out)
    }

    /// Writes are all-or-nothing across granules.
    pub fn realm_write(&mut self, realm: RealmId, ipa: Ipa, data: &[u8]) -> Result<(), AccessError> {
        let chunks = Self::chunks(ipa, data.len());
        let mut targets = Vec::with_capacity(chunks.len());
        for (page, off, n) in chunks {
            match self.translate(realm, page, AccessKind::Write) {
                Ok(g) => targets.push((g, off, n)),
                Err(e) => {
                    self.record_fault(Actor::Realm(realm), &e);
                    return Err(e);
                }
            }
        }
        let mut pos = 0;
        for (g, off, n) in targets {
            self.space.granule_mut(g).unwrap().write(off, &data[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Access by a world-level actor. Faults are traced.
    pub fn physical_access(
        &mut self,
        actor: SecurityState,
        index: GranuleIdx,
        kind: AccessKind,
        offset: usize,
        buf: &mut [u8],
    ) -> Result<(), AccessError> {
        let tag = self.space.gpt().tag(index);
        match self.space.physical_access(actor, index, kind, offset, buf) {
            Ok(()) => {
                if tag == Some(crate::granule::PasTag::Realm)
                    && matches!(actor, SecurityState::Normal | SecurityState::Secure)
                {
                    self.counters.realm_pas_breaches += 1;
                }
                Ok(())
            }
            Err(e) => {
                if matches!(e, AccessError::PhysicalFault { .. }) {
                    self.record_fault(Actor::World(actor), &e);
                }
                Err(e)
            }
        }
    }

    pub fn physical_read(&mut self, actor: SecurityState, index: GranuleIdx, offset: usize, len: usize) -> Result<Vec<u8>, AccessError> {
        let len = len.min(GRANULE_SIZE.saturating_sub(offset));
        let mut buf = vec![0u8; len];
        self.physical_access(actor, index, AccessKind::Read, offset, &mut buf)?;
        Ok(buf)
    }

    pub fn physical_write(&mut self, actor: SecurityState, index: GranuleIdx, offset: usize, data: &[u8]) -> Result<(), AccessError> {
        let mut buf = data[..data.len().min(GRANULE_SIZE.saturating_sub(offset))].to_vec();
        self.physical_access(actor, index, AccessKind::Write, offset, &mut buf)
    }

    /// Number of granules currently in the Data state.
    pub fn data_granules(&self) -> usize {
        self.space.count_in_state(GranuleState::Data)
    }

    // ---- test backdoors ---------------------------------------------------

    /// Installs a stage-2 entry without any checks.
    #[cfg(feature = "mutants")]
    pub fn backdoor_map(&mut self, realm: RealmId, ipa: Ipa, pa: GranuleIdx, perm: Permission) {
        self.realms
            .get_mut(&realm)
            .expect("backdoor on live realm")
            .rtt
            .insert(ipa, RttEntry { pa, perm });
    }

    #[cfg(feature = "mutants")]
    pub fn backdoor_set_granule(&mut self, index: GranuleIdx, state: GranuleState) {
        self.space.force_state(index, state);
    }

    #[cfg(feature = "mutants")]
    pub fn backdoor_clear_flushes(&mut self) {
        self.counters.flushes = 0;
    }
}
