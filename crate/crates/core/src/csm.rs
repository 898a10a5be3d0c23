//! Confidential Shared Memory: the per-realm Access Policy Table and the
//! RSI commands that create, share, reserve, attach, revoke, destroy and
//! detach CSM regions.
//!
//! A consumer mapping is only ever installed by `rsi_csm_attach`, and only
//! when the provider's APT holds a share record naming the consumer and the
//! consumer's APT holds a reserved window for the same sharing id.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{RmmError, RmmResult};
use crate::rmm::{PendingRsi, RecExit, RsiOutcome, RttEntry, World};
use crate::types::{CsmId, GranuleIdx, Ipa, Permission, RealmId, SharingId};

/// Entries one APT granule can hold.
pub const APT_CAPACITY: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ShareRecord {
    pub sharing_id: SharingId,
    pub perm: Permission,
    pub attached: bool,
}

impl ShareRecord {
    pub fn c_id(&self) -> RealmId {
        self.sharing_id.c_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ProviderEntry {
    /// Assigned once the host has populated the range.
    pub csm_id: Option<CsmId>,
    pub base: Ipa,
    pub size: u64,
    pub shares: Vec<ShareRecord>,
}

impl ProviderEntry {
    pub fn covers(&self, ipa: Ipa) -> bool {
        covers(self.base, self.size, ipa)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ConsumerState {
    /// Reserve issued, host has not yet emptied the window.
    Reserving,
    Reserved,
    Attached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct ConsumerEntry {
    pub sharing_id: SharingId,
    pub base: Ipa,
    pub size: u64,
    pub state: ConsumerState,
}

impl ConsumerEntry {
    pub fn covers(&self, ipa: Ipa) -> bool {
        covers(self.base, self.size, ipa)
    }
}

fn covers(base: Ipa, size: u64, ipa: Ipa) -> bool {
    let g = ipa.granule();
    g >= base.granule() && g < base.granule() + size
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum AptEntry {
    Provider(ProviderEntry),
    Consumer(ConsumerEntry),
}

impl AptEntry {
    pub fn base(&self) -> Ipa {
        match self {
            AptEntry::Provider(p) => p.base,
            AptEntry::Consumer(c) => c.base,
        }
    }

    pub fn size(&self) -> u64 {
        match self {
            AptEntry::Provider(p) => p.size,
            AptEntry::Consumer(c) => c.size,
        }
    }

    fn overlaps(&self, base: Ipa, size: u64) -> bool {
        let (a0, a1) = (self.base().granule(), self.base().granule() + self.size());
        let (b0, b1) = (base.granule(), base.granule() + size);
        a0 < b1 && b0 < a1
    }
}

/// Access Policy Table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Apt {
    pub granule: GranuleIdx,
    pub entries: Vec<AptEntry>,
    /// Next share counter per consumer.
    pub share_counters: BTreeMap<RealmId, u32>,
}

impl Apt {
    pub fn new(granule: GranuleIdx) -> Apt {
        Apt {
            granule,
            entries: Vec::new(),
            share_counters: BTreeMap::new(),
        }
    }

    pub fn provider_entries(&self) -> impl Iterator<Item = &ProviderEntry> {
        self.entries.iter().filter_map(|e| match e {
            AptEntry::Provider(p) => Some(p),
            _ => None,
        })
    }

    pub fn consumer_entries(&self) -> impl Iterator<Item = &ConsumerEntry> {
        self.entries.iter().filter_map(|e| match e {
            AptEntry::Consumer(c) => Some(c),
            _ => None,
        })
    }

    pub fn provider(&self, csm: CsmId) -> Option<&ProviderEntry> {
        self.provider_entries().find(|p| p.csm_id == Some(csm))
    }

    fn provider_mut(&mut self, csm: CsmId) -> Option<&mut ProviderEntry> {
        self.entries.iter_mut().find_map(|e| match e {
            AptEntry::Provider(p) if p.csm_id == Some(csm) => Some(p),
            _ => None,
        })
    }

    pub(crate) fn provider_mut_by_base(&mut self, base: Ipa) -> Option<&mut ProviderEntry> {
        self.entries.iter_mut().find_map(|e| match e {
            AptEntry::Provider(p) if p.base == base => Some(p),
            _ => None,
        })
    }

    /// Provider entry holding a share record for `sid`.
    pub fn provider_for_sharing(&self, sid: SharingId) -> Option<&ProviderEntry> {
        self.provider_entries()
            .find(|p| p.shares.iter().any(|s| s.sharing_id == sid))
    }

    pub fn consumer(&self, sid: SharingId) -> Option<&ConsumerEntry> {
        self.consumer_entries().find(|c| c.sharing_id == sid)
    }

    pub(crate) fn consumer_mut(&mut self, sid: SharingId) -> Option<&mut ConsumerEntry> {
        self.entries.iter_mut().find_map(|e| match e {
            AptEntry::Consumer(c) if c.sharing_id == sid => Some(c),
            _ => None,
        })
    }

    fn share_mut(&mut self, sid: SharingId) -> Option<&mut ShareRecord> {
        self.entries.iter_mut().find_map(|e| match e {
            AptEntry::Provider(p) => p.shares.iter_mut().find(|s| s.sharing_id == sid),
            _ => None,
        })
    }

    fn overlaps(&self, base: Ipa, size: u64) -> bool {
        self.entries.iter().any(|e| e.overlaps(base, size))
    }
}

/// `compose_sharing_id`: the deterministic identifier both sides derive.
pub fn compose_sharing_id(p_id: RealmId, c_id: RealmId, counter: u32) -> SharingId {
    SharingId::compose(p_id, c_id, counter)
}

impl World {
    fn caller_apt(&self, caller: RealmId) -> RmmResult<&Apt> {
        self.rsi_caller(caller)?.apt.as_ref().ok_or(RmmError::NoApt)
    }

    fn apt_mut(&mut self, realm: RealmId) -> RmmResult<&mut Apt> {
        self.realm_mut(realm)?.apt.as_mut().ok_or(RmmError::NoApt)
    }

    /// Registers a provider range and asks the host to populate it. The
    /// call completes on re-entry once every IPA of the range is mapped.
    pub fn rsi_csm_create(&mut self, caller: RealmId, base: Ipa, size: u64) -> RmmResult<RsiOutcome<CsmId>> {
        let apt = self.caller_apt(caller)?;
        if !self.realm_ref(caller)?.protected_range_ok(base, size) {
            return Err(RmmError::Unaligned);
        }
        if apt.overlaps(base, size) {
            return Err(RmmError::Overlap);
        }
        if apt.entries.len() >= APT_CAPACITY {
            return Err(RmmError::CapacityExceeded);
        }
        self.apt_mut(caller)?.entries.push(AptEntry::Provider(ProviderEntry {
            csm_id: None,
            base,
            size,
            shares: Vec::new(),
        }));
        Ok(self.suspend(caller, PendingRsi::CsmCreate { base, size }))
    }

    fn suspend<T>(&mut self, caller: RealmId, call: PendingRsi) -> RsiOutcome<T> {
        let realm = self.realm_mut(caller).expect("caller validated");
        realm.rec.as_mut().expect("caller validated").pending = Some(call);
        let exit = call.exit();
        self.emit_exit(caller, exit);
        RsiOutcome::Pending(exit)
    }

    /// Records the provider's consent to share `csm` with `c_id`.
    pub fn rsi_csm_share(&mut self, caller: RealmId, csm: CsmId, c_id: RealmId, perm: Permission) -> RmmResult<SharingId> {
        let apt = self.caller_apt(caller)?;
        let entry = apt.provider(csm).ok_or(RmmError::NotOwner)?;
        if c_id == caller {
            return Err(RmmError::SelfShare);
        }
        self.registry_lookup(c_id)?;
        if entry.shares.iter().any(|s| s.c_id() == c_id) {
            return Err(RmmError::AlreadyShared);
        }
        let apt = self.apt_mut(caller)?;
        let counter = apt.share_counters.entry(c_id).or_insert(0);
        let sid = compose_sharing_id(caller, c_id, *counter);
        *counter += 1;
        apt.provider_mut(csm).unwrap().shares.push(ShareRecord {
            sharing_id: sid,
            perm,
            attached: false,
        });
        Ok(sid)
    }

    /// Records the consumer's consent and asks the host to empty the window.
    pub fn rsi_csm_reserve(&mut self, caller: RealmId, sid: SharingId, base: Ipa, size: u64) -> RmmResult<RsiOutcome<()>> {
        let apt = self.caller_apt(caller)?;
        if sid.c_id != caller {
            return Err(RmmError::WrongConsumer);
        }
        if !self.realm_ref(caller)?.protected_range_ok(base, size) {
            return Err(RmmError::Unaligned);
        }
        if apt.overlaps(base, size) {
            return Err(RmmError::Overlap);
        }
        if apt.consumer(sid).is_some() {
            return Err(RmmError::AlreadyExists);
        }
        if apt.entries.len() >= APT_CAPACITY {
            return Err(RmmError::CapacityExceeded);
        }
        self.apt_mut(caller)?.entries.push(AptEntry::Consumer(ConsumerEntry {
            sharing_id: sid,
            base,
            size,
            state: ConsumerState::Reserving,
        }));
        Ok(self.suspend(caller, PendingRsi::CsmReserve { sharing: sid, base, size }))
    }

    /// Maps the provider's granules into the consumer's reserved window.
    pub fn rsi_csm_attach(&mut self, caller: RealmId, sid: SharingId) -> RmmResult<()> {
        let c_apt = self.caller_apt(caller)?;
        if sid.c_id != caller {
            return Err(RmmError::WrongConsumer);
        }
        let c_entry = *c_apt.consumer(sid).ok_or(RmmError::NotReserved)?;
        match c_entry.state {
            ConsumerState::Reserving => return Err(RmmError::NotReserved),
            ConsumerState::Attached => return Err(RmmError::AlreadyAttached),
            ConsumerState::Reserved => {}
        }
        let provider = self
            .registry_lookup(sid.p_id)
            .ok()
            .filter(|p| p.lifecycle() == crate::rmm::Lifecycle::Active)
            .ok_or(RmmError::NotShared)?;
        let p_apt = provider.apt.as_ref().ok_or(RmmError::NotShared)?;
        let p_entry = p_apt.provider_for_sharing(sid).ok_or(RmmError::NotShared)?;
        let share = *p_entry.shares.iter().find(|s| s.sharing_id == sid).unwrap();
        if !self.mutated(crate::rmm::Mutation::SkipAttachSizeCheck) && c_entry.size != p_entry.size {
            return Err(RmmError::SizeMismatch);
        }
        let p_rtt = &provider.rtt;
        if (0..p_entry.size).any(|k| p_rtt.get(p_entry.base.add_granules(k)).is_none()) {
            return Err(RmmError::Unpopulated);
        }
        let consumer = self.realm_ref(caller)?;
        for k in 0..c_entry.size {
            let ipa = c_entry.base.add_granules(k);
            if consumer.rtt.get(ipa).is_some() {
                return Err(RmmError::AlreadyMapped);
            }
            if !consumer.rtt.is_backed(ipa) {
                return Err(RmmError::TableMiss);
            }
        }
        let slots: Vec<(Ipa, GranuleIdx)> = (0..c_entry.size)
            .filter_map(|k| {
                p_rtt
                    .get(p_entry.base.add_granules(k))
                    .map(|e| (c_entry.base.add_granules(k), e.pa))
            })
            .collect();

        let consumer = self.realm_mut(caller)?;
        for (ipa, pa) in slots {
            consumer.rtt.insert(ipa, RttEntry { pa, perm: share.perm });
        }
        consumer
            .apt
            .as_mut()
            .unwrap()
            .consumer_mut(sid)
            .unwrap()
            .state = ConsumerState::Attached;
        self.apt_mut(sid.p_id)?.share_mut(sid).unwrap().attached = true;
        Ok(())
    }

    /// Removes the consumer's window mappings (with TLB maintenance) and its
    /// APT entry, and notifies the host. Shared by revoke and detach.
    fn tear_down_window(&mut self, sid: SharingId, unmap: bool) -> RmmResult<()> {
        let Some(entry) = self.consumer_entry(sid).copied() else {
            return Ok(());
        };
        if entry.state == ConsumerState::Attached && unmap {
            for k in 0..entry.size {
                self.unmap(sid.c_id, entry.base.add_granules(k));
            }
        }
        let c = self.realm_mut(sid.c_id)?;
        if let Some(rec) = c.rec.as_mut() {
            if matches!(rec.pending, Some(PendingRsi::CsmReserve { sharing, .. }) if sharing == sid) {
                rec.pending = None;
            }
        }
        c.apt
            .as_mut()
            .unwrap()
            .entries
            .retain(|e| !matches!(e, AptEntry::Consumer(ce) if ce.sharing_id == sid));
        self.emit_exit(
            sid.c_id,
            RecExit::RemoveCsm {
                ipa_base: entry.base,
                size: entry.size,
            },
        );
        Ok(())
    }

    /// Withdraws one consumer's access.
    pub fn rsi_csm_revoke(&mut self, caller: RealmId, sid: SharingId) -> RmmResult<()> {
        let apt = self.caller_apt(caller)?;
        if sid.p_id != caller {
            return Err(RmmError::NotOwner);
        }
        apt.provider_for_sharing(sid).ok_or(RmmError::NoSuchSharing)?;
        self.revoke(sid)
    }

    fn revoke(&mut self, sid: SharingId) -> RmmResult<()> {
        let skip_unmap = self.mutated(crate::rmm::Mutation::SkipRevokeUnmap);
        self.tear_down_window(sid, !skip_unmap)?;
        let apt = self.apt_mut(sid.p_id)?;
        for e in apt.entries.iter_mut() {
            if let AptEntry::Provider(p) = e {
                p.shares.retain(|s| s.sharing_id != sid);
            }
        }
        Ok(())
    }

    /// Revokes every sharing of `csm` and drops the provider entry. The
    /// provider's own mappings stay in place as private memory.
    pub fn rsi_csm_destroy(&mut self, caller: RealmId, csm: CsmId) -> RmmResult<()> {
        let apt = self.caller_apt(caller)?;
        if apt.provider(csm).is_none() {
            let exists = self
                .realms()
                .any(|r| r.apt().is_some_and(|a| a.provider(csm).is_some()));
            return Err(if exists { RmmError::NotOwner } else { RmmError::NoSuchCsm });
        }
        self.destroy_csm(caller, csm)
    }

    pub(crate) fn destroy_csm(&mut self, p: RealmId, csm: CsmId) -> RmmResult<()> {
        let entry = self
            .realm_ref(p)?
            .apt
            .as_ref()
            .and_then(|a| a.provider(csm))
            .cloned()
            .ok_or(RmmError::NoSuchCsm)?;
        for s in &entry.shares {
            self.revoke(s.sharing_id)?;
        }
        self.apt_mut(p)?
            .entries
            .retain(|e| !matches!(e, AptEntry::Provider(pe) if pe.csm_id == Some(csm)));
        self.emit_exit(
            p,
            RecExit::RemoveCsm {
                ipa_base: entry.base,
                size: entry.size,
            },
        );
        Ok(())
    }

    /// Consumer leaves a sharing. The provider's share record survives so
    /// the consumer may reserve and attach again.
    pub fn rsi_csm_detach_and_free(&mut self, caller: RealmId, sid: SharingId) -> RmmResult<()> {
        let apt = self.caller_apt(caller)?;
        if sid.c_id != caller {
            return Err(RmmError::WrongConsumer);
        }
        apt.consumer(sid).ok_or(RmmError::NoSuchSharing)?;
        self.detach(caller, sid)
    }

    pub(crate) fn detach(&mut self, _caller: RealmId, sid: SharingId) -> RmmResult<()> {
        self.tear_down_window(sid, true)?;
        if let Some(rec) = self
            .realms
            .get_mut(&sid.p_id)
            .and_then(|p| p.apt.as_mut())
            .and_then(|a| a.share_mut(sid))
        {
            rec.attached = false;
        }
        Ok(())
    }
}
