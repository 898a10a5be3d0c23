//! Global safety invariants, evaluated over the whole world.
//!
//! | id | property |
//! |----|----------|
//! | I1 | a Data granule has at most one owning mapping; any other mapping is a consumer view |
//! | I2 | an attached consumer window maps exactly the provider's granules, in order, at equal size |
//! | I3 | the normal world never reached Realm PAS, and freed granules hold no data |
//! | I4 | no consumer view outlives its sharing; every unmap was followed by a TLB flush |
//! | I5 | granules shared between realms are covered by consent on both sides |
//! | I6 | every delegated granule is accounted for by the host's delegation count and by one realm object |
//! | I7 | realm, CSM and sharing identifiers are unique and never reissued |
//!
//! A mapping is a *consumer view* when its IPA lies inside an Attached
//! consumer window of the mapping realm; every other protected mapping is
//! *owning*.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::csm::{AptEntry, ConsumerState};
use crate::granule::GranuleState;
use crate::rmm::World;
use crate::types::{GranuleIdx, Ipa, RealmId, SharingId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Invariant {
    I1,
    I2,
    I3,
    I4,
    I5,
    I6,
    I7,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.invariant, self.detail)
    }
}

#[derive(Clone, Copy, Debug)]
struct Mapping {
    realm: RealmId,
    ipa: Ipa,
    /// Sharing id of the attached window this view belongs to.
    view_of: Option<SharingId>,
}

struct Checker<'w> {
    w: &'w World,
    out: Vec<Violation>,
    /// Protected mappings per physical granule.
    by_pa: BTreeMap<GranuleIdx, Vec<Mapping>>,
}

impl Checker<'_> {
    fn fail(&mut self, invariant: Invariant, detail: String) {
        self.out.push(Violation { invariant, detail });
    }

    /// P-side record for `sid`: (provider base, size, attached).
    fn share(&self, sid: SharingId) -> Option<(Ipa, u64, bool)> {
        let apt = self.w.realm(sid.p_id)?.apt()?;
        let p = apt.provider_for_sharing(sid)?;
        let s = p.shares.iter().find(|s| s.sharing_id == sid)?;
        (s.c_id() == sid.c_id && p.csm_id.is_some()).then_some((p.base, p.size, s.attached))
    }

    fn collect(&mut self) {
        for r in self.w.realms() {
            for (ipa, e) in r.rtt().entries() {
                if !r.in_protected(ipa) {
                    if self.w.space().state(e.pa) != Some(GranuleState::Undelegated) {
                        self.fail(Invariant::I1, format!("{} maps {} unprotected while it is not host memory", r.id(), e.pa));
                    }
                    continue;
                }
                if self.w.space().state(e.pa) != Some(GranuleState::Data) {
                    self.fail(Invariant::I1, format!("{} maps non-Data granule {} at {}", r.id(), e.pa, ipa));
                }
                let view_of = r
                    .consumer_window(ipa)
                    .filter(|c| c.state == ConsumerState::Attached)
                    .map(|c| c.sharing_id);
                self.by_pa.entry(e.pa).or_default().push(Mapping {
                    realm: r.id(),
                    ipa,
                    view_of,
                });
            }
        }
    }

    fn i1_disjointness(&mut self) {
        let mut found = Vec::new();
        for (pa, maps) in &self.by_pa {
            let owners: Vec<_> = maps.iter().filter(|m| m.view_of.is_none()).collect();
            if owners.len() > 1 {
                let who: Vec<String> = owners.iter().map(|m| format!("{}@{}", m.realm, m.ipa)).collect();
                found.push(format!("granule {pa} owned by {}", who.join(", ")));
            }
            if owners.is_empty() {
                found.push(format!("granule {pa} mapped only through consumer views"));
            }
        }
        for d in found {
            self.fail(Invariant::I1, d);
        }
    }

    fn i2_view_consistency(&mut self) {
        let mut found = Vec::new();
        for c in self.w.realms() {
            let Some(apt) = c.apt() else { continue };
            for ce in apt.consumer_entries().filter(|e| e.state == ConsumerState::Attached) {
                let sid = ce.sharing_id;
                let Some((p_base, p_size, _)) = self.share(sid) else {
                    continue; // reported under I5
                };
                if p_size != ce.size {
                    found.push(format!("{sid}: window of {} granules over a CSM of {}", ce.size, p_size));
                }
                let p = self.w.realm(sid.p_id).unwrap();
                for k in 0..ce.size {
                    let cv = c.rtt().get(ce.base.add_granules(k)).map(|e| e.pa);
                    let pv = if k < p_size {
                        p.rtt().get(p_base.add_granules(k)).map(|e| e.pa)
                    } else {
                        None
                    };
                    if cv != pv {
                        found.push(format!("{sid}: offset {k} consumer sees {cv:?}, provider has {pv:?}"));
                    }
                }
            }
        }
        for d in found {
            self.fail(Invariant::I2, d);
        }
    }

    fn i3_host_exclusion(&mut self) {
        let breaches = self.w.counters().realm_pas_breaches;
        if breaches != 0 {
            self.fail(Invariant::I3, format!("{breaches} normal-world accesses reached Realm PAS"));
        }
        let dirty: Vec<GranuleIdx> = self
            .w
            .space()
            .granules()
            .iter()
            .filter(|g| g.state() == GranuleState::Delegated && !g.is_zero())
            .map(|g| g.index())
            .collect();
        for g in dirty {
            self.fail(Invariant::I3, format!("free granule {g} was not wiped"));
        }
    }

    fn i4_revocation(&mut self) {
        let c = self.w.counters();
        if c.unmaps != c.flushes {
            self.fail(Invariant::I4, format!("{} unmaps but {} TLB flushes", c.unmaps, c.flushes));
        }
        let mut found = Vec::new();
        for maps in self.by_pa.values() {
            for m in maps.iter().filter(|m| m.view_of.is_some()) {
                let sid = m.view_of.unwrap();
                if !matches!(self.share(sid), Some((_, _, true))) {
                    found.push(format!("{} keeps a view at {} after {sid} ended", m.realm, m.ipa));
                }
            }
        }
        for d in found {
            self.fail(Invariant::I4, d);
        }
    }

    fn i5_consent(&mut self) {
        let mut found = Vec::new();
        for (pa, maps) in &self.by_pa {
            let realms: BTreeSet<RealmId> = maps.iter().map(|m| m.realm).collect();
            if realms.len() < 2 {
                continue;
            }
            for m in maps {
                let ok = match m.view_of {
                    None => true,
                    Some(sid) => {
                        sid.c_id == m.realm
                            && realms.contains(&sid.p_id)
                            && maps.iter().any(|o| o.realm == sid.p_id && o.view_of.is_none())
                            && self.share(sid).is_some()
                    }
                };
                let owner_count = maps.iter().filter(|o| o.view_of.is_none()).count();
                if !ok || (m.view_of.is_none() && owner_count > 1) {
                    found.push(format!("{} maps granule {pa} at {} without a consented sharing", m.realm, m.ipa));
                }
            }
        }
        for c in self.w.realms() {
            let Some(apt) = c.apt() else { continue };
            for ce in apt.consumer_entries().filter(|e| e.state == ConsumerState::Attached) {
                let sid = ce.sharing_id;
                match self.share(sid) {
                    None => found.push(format!("{} attached {sid} without provider consent", c.id())),
                    Some((_, _, false)) => found.push(format!("provider record of {sid} is not marked attached")),
                    Some(_) => {}
                }
                if sid.c_id != c.id() {
                    found.push(format!("{} holds a window for {sid} naming another consumer", c.id()));
                }
            }
            for p in apt.provider_entries() {
                for s in p.shares.iter().filter(|s| s.attached) {
                    let attached = self
                        .w
                        .realm(s.c_id())
                        .and_then(|r| r.apt())
                        .and_then(|a| a.consumer(s.sharing_id))
                        .is_some_and(|e| e.state == ConsumerState::Attached);
                    if !attached {
                        found.push(format!("{} marks {} attached but the consumer holds no window", c.id(), s.sharing_id));
                    }
                }
            }
        }
        for d in found {
            self.fail(Invariant::I5, d);
        }
    }

    fn i6_conservation(&mut self) {
        let space = self.w.space();
        let counters = self.w.counters();
        let held = space.len() - space.count_in_state(GranuleState::Undelegated);
        let net = counters.delegations as i64 - counters.undelegations as i64;
        if held as i64 != net {
            self.fail(Invariant::I6, format!("{held} granules held by the RMM but host delegated {net} net"));
        }
        let mut refs: BTreeMap<GranuleIdx, usize> = BTreeMap::new();
        for r in self.w.realms() {
            let mut objs = vec![r.rd_granule()];
            objs.extend(r.rec().map(|x| x.granule));
            objs.extend(r.apt().map(|a| a.granule));
            objs.extend(r.rtt().table_granules());
            for g in objs {
                *refs.entry(g).or_default() += 1;
            }
        }
        let mut found = Vec::new();
        for g in space.granules() {
            let i = g.index();
            match g.state() {
                GranuleState::Rd | GranuleState::Rec | GranuleState::Apt | GranuleState::Rtt => {
                    if refs.get(&i) != Some(&1) {
                        found.push(format!("{:?} granule {i} referenced {} times", g.state(), refs.get(&i).unwrap_or(&0)));
                    }
                }
                GranuleState::Data => {
                    if !self.by_pa.contains_key(&i) {
                        found.push(format!("Data granule {i} is mapped by no realm"));
                    }
                }
                GranuleState::Undelegated | GranuleState::Delegated => {
                    if refs.contains_key(&i) {
                        found.push(format!("free granule {i} still referenced by realm metadata"));
                    }
                }
            }
        }
        for d in found {
            self.fail(Invariant::I6, d);
        }
    }

    fn i7_identifiers(&mut self) {
        let mut found = Vec::new();
        let next = self.w.registry().next_id();
        let mut live = BTreeSet::new();
        for (id, is_live) in self.w.registry().issued() {
            if id.0 == 0 || id.0 >= next {
                found.push(format!("{id} outside the issued range"));
            }
            if is_live {
                live.insert(id);
                match self.w.registry_lookup(id) {
                    Ok(r) if r.id() == id => {}
                    _ => found.push(format!("registry entry {id} does not resolve to its realm")),
                }
            }
        }
        let present: BTreeSet<RealmId> = self.w.realms().map(|r| r.id()).collect();
        if present != live {
            found.push(format!("live registry ids {live:?} differ from realms {present:?}"));
        }
        let mut rds = BTreeSet::new();
        for r in self.w.realms() {
            if !rds.insert(r.rd_granule()) {
                found.push(format!("RD granule {} backs two realms", r.rd_granule()));
            }
        }
        let mut csms = BTreeSet::new();
        let mut sids = BTreeSet::new();
        for r in self.w.realms() {
            let Some(apt) = r.apt() else { continue };
            for e in &apt.entries {
                match e {
                    AptEntry::Provider(p) => {
                        if let Some(id) = p.csm_id {
                            if id.0 == 0 || id.0 >= self.w.next_csm_id() || !csms.insert(id) {
                                found.push(format!("CSM id {} reused or never issued", id.0));
                            }
                        }
                        for s in &p.shares {
                            if s.sharing_id.p_id != r.id() || !sids.insert(s.sharing_id) {
                                found.push(format!("{} recorded twice or by the wrong provider", s.sharing_id));
                            }
                            let next = apt.share_counters.get(&s.c_id()).copied().unwrap_or(0);
                            if s.sharing_id.counter >= next {
                                found.push(format!("{} ahead of its share counter", s.sharing_id));
                            }
                        }
                    }
                    AptEntry::Consumer(c) => {
                        if c.sharing_id.c_id != r.id() {
                            found.push(format!("{} holds a window for {}", r.id(), c.sharing_id));
                        }
                    }
                }
            }
        }
        for d in found {
            self.fail(Invariant::I7, d);
        }
    }
}

/// Evaluates I1 to I7. Pure; an empty list means the state is safe.
pub fn check_invariants(w: &World) -> Vec<Violation> {
    let mut c = Checker {
        w,
        out: Vec::new(),
        by_pa: BTreeMap::new(),
    };
    c.collect();
    c.i1_disjointness();
    c.i2_view_consistency();
    c.i3_host_exclusion();
    c.i4_revocation();
    c.i5_consent();
    c.i6_conservation();
    c.i7_identifiers();
    c.out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::Host;
    use crate::rmm::{Mutation, Reentry, RsiOutcome, WorldConfig};
    use crate::types::Permission;

    fn kinds(v: &[Violation]) -> BTreeSet<Invariant> {
        v.iter().map(|x| x.invariant).collect()
    }

    struct Env {
        w: World,
        h: Host,
        p: RealmId,
        c: RealmId,
    }

    fn env() -> Env {
        let mut w = World::new(&WorldConfig { granules: 48, seed: 0 });
        let mut h = Host::default();
        let (p, _) = h.launch_realm(&mut w, 32, &[(Ipa(0), b"p".to_vec())], true).unwrap();
        let (c, _) = h.launch_realm(&mut w, 32, &[(Ipa(0), b"c".to_vec())], true).unwrap();
        Env { w, h, p, c }
    }

    fn finish<T>(e: &mut Env, realm: RealmId, out: RsiOutcome<T>) -> Reentry {
        let RsiOutcome::Pending(exit) = out else { panic!() };
        e.h.complete_pending(&mut e.w, realm, exit).unwrap().1
    }

    fn attached(size_c: u64) -> (Env, SharingId) {
        let mut e = env();
        let out = e.w.rsi_csm_create(e.p, Ipa(0x4000), 2).unwrap();
        let p = e.p;
        let Reentry::Completed(crate::rmm::RsiCompletion::CsmCreated(csm)) = finish(&mut e, p, out) else {
            panic!()
        };
        let sid = e.w.rsi_csm_share(e.p, csm, e.c, Permission::ReadWrite).unwrap();
        let out = e.w.rsi_csm_reserve(e.c, sid, Ipa(0x8000), size_c).unwrap();
        let c = e.c;
        finish(&mut e, c, out);
        e.w.rsi_csm_attach(e.c, sid).unwrap();
        (e, sid)
    }

    #[test]
    fn fresh_world_is_clean() {
        let w = World::new(&WorldConfig::default());
        assert!(check_invariants(&w).is_empty());
    }

    #[test]
    fn post_attach_is_clean() {
        let (e, _) = attached(2);
        assert_eq!(check_invariants(&e.w), vec![]);
    }

    #[test]
    fn post_revoke_is_clean_and_flushed() {
        let (mut e, sid) = attached(2);
        let before = e.w.counters().flushes;
        e.w.rsi_csm_revoke(e.p, sid).unwrap();
        assert_eq!(check_invariants(&e.w), vec![]);
        assert_eq!(e.w.counters().flushes - before, 2);
    }

    #[test]
    fn post_teardown_is_clean() {
        let (mut e, _) = attached(2);
        let rd = e.w.realm(e.p).unwrap().rd_granule();
        e.w.rmi_realm_destroy(rd).unwrap();
        assert_eq!(check_invariants(&e.w), vec![]);
        let rd = e.w.realm(e.c).unwrap().rd_granule();
        e.w.rmi_realm_destroy(rd).unwrap();
        assert_eq!(check_invariants(&e.w), vec![]);
    }

    #[test]
    fn backdoor_map_of_private_granule() {
        let mut e = env();
        let p_granule = e.w.realm(e.p).unwrap().rtt().get(Ipa(0)).unwrap().pa;
        e.w.backdoor_map(e.c, Ipa(0x9000), p_granule, Permission::ReadWrite);
        let k = kinds(&check_invariants(&e.w));
        assert!(k.contains(&Invariant::I1) && k.contains(&Invariant::I5), "{k:?}");
    }

    #[test]
    fn size_check_mutant_breaks_view_consistency() {
        let mut e = env();
        e.w.set_mutation(Some(Mutation::SkipAttachSizeCheck));
        let out = e.w.rsi_csm_create(e.p, Ipa(0x4000), 1).unwrap();
        let p = e.p;
        let Reentry::Completed(crate::rmm::RsiCompletion::CsmCreated(csm)) = finish(&mut e, p, out) else {
            panic!()
        };
        let sid = e.w.rsi_csm_share(e.p, csm, e.c, Permission::ReadWrite).unwrap();
        let out = e.w.rsi_csm_reserve(e.c, sid, Ipa(0x8000), 2).unwrap();
        let c = e.c;
        finish(&mut e, c, out);
        // A private page of P right after the CSM.
        let rd = e.w.realm(e.p).unwrap().rd_granule();
        let g = Host::delegate_fresh(&mut e.w, &mut Vec::new()).unwrap();
        e.w.rmi_data_create_unknown(rd, g, Ipa(0x5000)).unwrap();
        e.w.rsi_csm_attach(e.c, sid).unwrap();
        let k = kinds(&check_invariants(&e.w));
        assert!(k.contains(&Invariant::I2), "{k:?}");
    }

    #[test]
    fn revoke_unmap_mutant_leaves_stale_view() {
        let (mut e, sid) = attached(2);
        e.w.set_mutation(Some(Mutation::SkipRevokeUnmap));
        e.w.rsi_csm_revoke(e.p, sid).unwrap();
        let k = kinds(&check_invariants(&e.w));
        assert!(k.contains(&Invariant::I1) && k.contains(&Invariant::I5), "{k:?}");
    }

    #[test]
    fn missing_flush_detected() {
        let (mut e, sid) = attached(2);
        e.w.rsi_csm_revoke(e.p, sid).unwrap();
        e.w.backdoor_clear_flushes();
        assert_eq!(kinds(&check_invariants(&e.w)), BTreeSet::from([Invariant::I4]));
    }

    #[test]
    fn leaked_granule_detected() {
        let mut e = env();
        let g = e.w.space().first_in_state(GranuleState::Undelegated).unwrap();
        e.w.backdoor_set_granule(g, GranuleState::Data);
        let k = kinds(&check_invariants(&e.w));
        assert!(k.contains(&Invariant::I6), "{k:?}");
    }
}
