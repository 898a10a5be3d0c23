//! Hypervisor model: services REC exits and, under adversarial policies,
//! attacks the RMM through the same RMI surface a real host has.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{AccessError, RmmError, RmmResult};
use crate::granule::{GranuleState, PasTag, SecurityState};
use crate::rmm::{Event, Lifecycle, RecExit, Reentry, RttReadout, World};
use crate::types::{AccessKind, GranuleIdx, Ipa, RealmId, GRANULE_SIZE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HostPolicy {
    #[default]
    Cooperative,
    /// Ignores every exit.
    Starve,
    /// Populates the range shifted by one granule.
    WrongGranule,
    Prober,
    ToctouSwapper,
    DoubleMapper,
}

/// One RMI issued by the host, for traces and call accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "rmi", rename_all = "snake_case")]
pub enum RmiCall {
    RttReadEntry { ipa: Ipa },
    GranuleDelegate { granule: GranuleIdx },
    GranuleUndelegate { granule: GranuleIdx },
    RttCreate { granule: GranuleIdx, ipa: Ipa },
    DataCreateUnknown { granule: GranuleIdx, ipa: Ipa },
    DataDestroy { ipa: Ipa },
}

/// Result of one adversarial probe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AdversarialOutcome {
    /// Policy has no active probe.
    None,
    Probe {
        realm_granules: usize,
        attempts: usize,
        successes: usize,
    },
    DoubleMap {
        granule: GranuleIdx,
        target: RealmId,
        result: String,
    },
    Swap {
        rd: GranuleIdx,
        old_id: RealmId,
        new_id: RealmId,
    },
}

/// Pages of a realm image: (IPA, bytes), measured in order.
pub type Image = [(Ipa, Vec<u8>)];

#[derive(Clone, Debug, Default)]
pub struct Host {
    pub policy: HostPolicy,
    /// CSM ranges the host must not treat as ordinary guest memory.
    csm_ranges: BTreeSet<(RealmId, Ipa, u64)>,
}

impl Host {
    pub fn new(policy: HostPolicy) -> Host {
        Host {
            policy,
            csm_ranges: BTreeSet::new(),
        }
    }

    pub fn csm_ranges(&self) -> impl Iterator<Item = &(RealmId, Ipa, u64)> {
        self.csm_ranges.iter()
    }

    /// Takes a granule from the host pool and delegates it.
    pub fn delegate_fresh(w: &mut World, calls: &mut Vec<RmiCall>) -> RmmResult<GranuleIdx> {
        let g = w
            .space()
            .first_in_state(GranuleState::Undelegated)
            .ok_or(RmmError::OutOfGranules)?;
        w.granule_delegate(g)?;
        calls.push(RmiCall::GranuleDelegate { granule: g });
        Ok(g)
    }

    fn ensure_table(w: &mut World, rd: GranuleIdx, ipa: Ipa, calls: &mut Vec<RmiCall>) -> RmmResult<()> {
        let backed = w.realm_by_rd(rd).is_some_and(|r| r.rtt().is_backed(ipa));
        if !backed {
            let g = Self::delegate_fresh(w, calls)?;
            w.rmi_rtt_create(rd, g, ipa)?;
            calls.push(RmiCall::RttCreate { granule: g, ipa });
        }
        Ok(())
    }

    /// Realm initialisation: RD, REC, APT, tables, measured image, and
    /// optionally activation.
    pub fn launch_realm(&mut self, w: &mut World, ipa_width: u8, image: &Image, activate: bool) -> RmmResult<(RealmId, GranuleIdx)> {
        let mut calls = Vec::new();
        let rd = Self::delegate_fresh(w, &mut calls)?;
        let id = w.rmi_realm_create(rd, ipa_width)?;
        let rec = Self::delegate_fresh(w, &mut calls)?;
        w.rmi_rec_create(rd, rec)?;
        let apt = Self::delegate_fresh(w, &mut calls)?;
        w.rmi_apt_create(rd, apt)?;
        Self::ensure_table(w, rd, Ipa(0), &mut calls)?;
        for (ipa, bytes) in image {
            Self::ensure_table(w, rd, *ipa, &mut calls)?;
            let g = Self::delegate_fresh(w, &mut calls)?;
            w.rmi_data_create(rd, g, *ipa, bytes)?;
        }
        if activate {
            w.rmi_realm_activate(rd)?;
        }
        Ok((id, rd))
    }

    /// Dispatches one exit according to the policy.
    pub fn handle_exit(&mut self, w: &mut World, realm: RealmId, exit: RecExit) -> RmmResult<Vec<RmiCall>> {
        match exit {
            RecExit::PRealmCsm { ipa_base, size } => self.handle_exit_p_csm(w, realm, ipa_base, size),
            RecExit::CRealmCsm { ipa_base, size } => self.handle_exit_c_csm(w, realm, ipa_base, size),
            RecExit::RemoveCsm { ipa_base, size } => {
                self.handle_remove_csm(realm, ipa_base, size);
                Ok(Vec::new())
            }
        }
    }

    fn rd_of(w: &World, realm: RealmId) -> RmmResult<GranuleIdx> {
        w.realm(realm).map(|r| r.rd_granule()).ok_or(RmmError::NoSuchRealm)
    }

    /// Populates every unassigned IPA of a provider range.
    pub fn handle_exit_p_csm(&mut self, w: &mut World, realm: RealmId, base: Ipa, size: u64) -> RmmResult<Vec<RmiCall>> {
        let mut calls = Vec::new();
        let base = match self.policy {
            HostPolicy::Starve => return Ok(calls),
            HostPolicy::WrongGranule => base.add_granules(1),
            _ => base,
        };
        let rd = Self::rd_of(w, realm)?;
        self.csm_ranges.insert((realm, base, size));
        for k in 0..size {
            let ipa = base.add_granules(k);
            calls.push(RmiCall::RttReadEntry { ipa });
            if w.rmi_rtt_read_entry(rd, ipa) == RttReadout::Unassigned {
                Self::ensure_table(w, rd, ipa, &mut calls)?;
                let g = Self::delegate_fresh(w, &mut calls)?;
                w.rmi_data_create_unknown(rd, g, ipa)?;
                calls.push(RmiCall::DataCreateUnknown { granule: g, ipa });
            }
        }
        Ok(calls)
    }

    /// Reclaims every populated IPA of a consumer window and makes sure the
    /// window has table backing for the later attach.
    pub fn handle_exit_c_csm(&mut self, w: &mut World, realm: RealmId, base: Ipa, size: u64) -> RmmResult<Vec<RmiCall>> {
        let mut calls = Vec::new();
        let base = match self.policy {
            HostPolicy::Starve => return Ok(calls),
            HostPolicy::WrongGranule => base.add_granules(1),
            _ => base,
        };
        let rd = Self::rd_of(w, realm)?;
        self.csm_ranges.insert((realm, base, size));
        for k in 0..size {
            let ipa = base.add_granules(k);
            calls.push(RmiCall::RttReadEntry { ipa });
            if let RttReadout::Assigned { .. } = w.rmi_rtt_read_entry(rd, ipa) {
                let g = w.rmi_data_destroy(rd, ipa)?;
                calls.push(RmiCall::DataDestroy { ipa });
                w.granule_undelegate(g)?;
                calls.push(RmiCall::GranuleUndelegate { granule: g });
            }
            Self::ensure_table(w, rd, ipa, &mut calls)?;
        }
        Ok(calls)
    }

    /// Bookkeeping only; duplicates are harmless.
    pub fn handle_remove_csm(&mut self, realm: RealmId, base: Ipa, size: u64) {
        self.csm_ranges.remove(&(realm, base, size));
    }

    /// Services every exit currently queued in the world's event log, in
    /// order. Returns the calls issued per exit.
    pub fn service_exits(&mut self, w: &mut World, events: &[Event]) -> RmmResult<Vec<(RealmId, RecExit, Vec<RmiCall>)>> {
        let mut out = Vec::new();
        for e in events {
            if let Event::Exit { realm, exit } = *e {
                if w.realm(realm).is_none() {
                    continue;
                }
                let calls = self.handle_exit(w, realm, exit)?;
                out.push((realm, exit, calls));
            }
        }
        Ok(out)
    }

    /// Services the exit of a suspended RSI and re-enters the REC once.
    pub fn complete_pending(&mut self, w: &mut World, realm: RealmId, exit: RecExit) -> RmmResult<(Vec<RmiCall>, Reentry)> {
        let calls = self.handle_exit(w, realm, exit)?;
        let rd = Self::rd_of(w, realm)?;
        Ok((calls, w.rec_enter(rd)?))
    }

    /// Runs the policy's attack. `victim` selects the realm for the swap
    /// and the target of a double map.
    pub fn adversarial_step(&mut self, w: &mut World, victim: Option<RealmId>) -> RmmResult<AdversarialOutcome> {
        match self.policy {
            HostPolicy::Cooperative | HostPolicy::Starve | HostPolicy::WrongGranule => Ok(AdversarialOutcome::None),
            HostPolicy::Prober => Ok(Self::probe(w)),
            HostPolicy::DoubleMapper => Self::double_map(w, victim),
            HostPolicy::ToctouSwapper => self.swap(w, victim.ok_or(RmmError::NoSuchRealm)?),
        }
    }

    /// Reads and writes every Realm-PAS granule as the normal world.
    fn probe(w: &mut World) -> AdversarialOutcome {
        let targets: Vec<GranuleIdx> = (0..w.space().len())
            .filter(|&g| w.space().gpt().tag(g) == Some(PasTag::Realm))
            .collect();
        let mut attempts = 0;
        let mut successes = 0;
        for &g in &targets {
            for kind in [AccessKind::Read, AccessKind::Write] {
                attempts += 1;
                let mut buf = [0xA5u8; 8];
                let r = w.physical_access(SecurityState::Normal, g, kind, GRANULE_SIZE - 8, &mut buf);
                match r {
                    Ok(()) => successes += 1,
                    Err(AccessError::PhysicalFault { .. }) => {}
                    Err(_) => {}
                }
            }
        }
        AdversarialOutcome::Probe {
            realm_granules: targets.len(),
            attempts,
            successes,
        }
    }

    /// Maps a granule another realm already owns into `target`.
    fn double_map(w: &mut World, target: Option<RealmId>) -> RmmResult<AdversarialOutcome> {
        let target = match target {
            Some(t) => t,
            None => w
                .realms()
                .find(|r| r.lifecycle() == Lifecycle::Active)
                .map(|r| r.id())
                .ok_or(RmmError::NoSuchRealm)?,
        };
        let victim = w
            .realms()
            .filter(|r| r.id() != target)
            .flat_map(|r| r.rtt().entries().map(|(_, e)| e.pa).collect::<Vec<_>>())
            .find(|&g| w.space().state(g) == Some(GranuleState::Data))
            .ok_or(RmmError::NotMapped)?;
        let tr = w.realm(target).ok_or(RmmError::NoSuchRealm)?;
        let rd = tr.rd_granule();
        let ipa = (0..tr.unprotected_base() / GRANULE_SIZE as u64)
            .map(Ipa::from_granule)
            .find(|&ipa| tr.rtt().is_backed(ipa) && tr.rtt().get(ipa).is_none() && tr.consumer_window(ipa).is_none())
            .ok_or(RmmError::TableMiss)?;
        let result = match w.rmi_data_create_unknown(rd, victim, ipa) {
            Ok(()) => "ok".to_string(),
            Err(e) => e.code().to_string(),
        };
        Ok(AdversarialOutcome::DoubleMap {
            granule: victim,
            target,
            result,
        })
    }

    /// Destroys `victim` and recreates a realm at the same RD granule.
    fn swap(&mut self, w: &mut World, victim: RealmId) -> RmmResult<AdversarialOutcome> {
        let rd = Self::rd_of(w, victim)?;
        w.rmi_realm_destroy(rd)?;
        let new_id = w.rmi_realm_create(rd, 32)?;
        let mut calls = Vec::new();
        let rec = Self::delegate_fresh(w, &mut calls)?;
        w.rmi_rec_create(rd, rec)?;
        let apt = Self::delegate_fresh(w, &mut calls)?;
        w.rmi_apt_create(rd, apt)?;
        Self::ensure_table(w, rd, Ipa(0), &mut calls)?;
        w.rmi_realm_activate(rd)?;
        Ok(AdversarialOutcome::Swap {
            rd,
            old_id: victim,
            new_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rmm::{RsiOutcome, WorldConfig};

    fn setup(policy: HostPolicy) -> (World, Host, RealmId) {
        let mut w = World::new(&WorldConfig { granules: 48, seed: 0 });
        let mut h = Host::new(policy);
        let (id, _) = h.launch_realm(&mut w, 32, &[], true).unwrap();
        (w, h, id)
    }

    fn count(calls: &[RmiCall], f: impl Fn(&RmiCall) -> bool) -> usize {
        calls.iter().filter(|c| f(c)).count()
    }

    #[test]
    fn populate_skips_existing() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        let rd = w.realm(id).unwrap().rd_granule();
        let g = Host::delegate_fresh(&mut w, &mut Vec::new()).unwrap();
        w.rmi_data_create_unknown(rd, g, Ipa(0x2000)).unwrap();
        let calls = h.handle_exit_p_csm(&mut w, id, Ipa(0x1000), 4).unwrap();
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::GranuleDelegate { .. })), 3);
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::DataCreateUnknown { .. })), 3);
    }

    #[test]
    fn populate_single_fresh() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        let calls = h.handle_exit_p_csm(&mut w, id, Ipa(0x1000), 1).unwrap();
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::GranuleDelegate { .. })), 1);
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::DataCreateUnknown { .. })), 1);
    }

    #[test]
    fn populate_creates_tables() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        let far = Ipa::from_granule(1024);
        let calls = h.handle_exit_p_csm(&mut w, id, far, 1).unwrap();
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::RttCreate { .. })), 1);
    }

    #[test]
    fn reclaim_populated_only() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        let rd = w.realm(id).unwrap().rd_granule();
        for k in [0u64, 2] {
            let g = Host::delegate_fresh(&mut w, &mut Vec::new()).unwrap();
            w.rmi_data_create_unknown(rd, g, Ipa::from_granule(8 + k)).unwrap();
            w.realm_write(id, Ipa::from_granule(8 + k), b"secret").unwrap();
        }
        let calls = h.handle_exit_c_csm(&mut w, id, Ipa::from_granule(8), 3).unwrap();
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::DataDestroy { .. })), 2);
        assert_eq!(count(&calls, |c| matches!(c, RmiCall::GranuleUndelegate { .. })), 2);
        for c in &calls {
            if let RmiCall::GranuleUndelegate { granule } = c {
                assert!(w.space().granule(*granule).unwrap().is_zero());
            }
        }
        let again = h.handle_exit_c_csm(&mut w, id, Ipa::from_granule(8), 3).unwrap();
        assert_eq!(count(&again, |c| !matches!(c, RmiCall::RttReadEntry { .. })), 0);
    }

    #[test]
    fn starve_leaves_rsi_pending() {
        let (mut w, mut h, id) = setup(HostPolicy::Starve);
        let RsiOutcome::Pending(exit) = w.rsi_csm_create(id, Ipa(0x4000), 1).unwrap() else {
            panic!();
        };
        for _ in 0..3 {
            let (calls, re) = h.complete_pending(&mut w, id, exit).unwrap();
            assert!(calls.is_empty());
            assert_eq!(re, Reentry::Pending(exit));
        }
    }

    #[test]
    fn wrong_granule_never_completes() {
        let (mut w, mut h, id) = setup(HostPolicy::WrongGranule);
        let RsiOutcome::Pending(exit) = w.rsi_csm_create(id, Ipa(0x4000), 2).unwrap() else {
            panic!();
        };
        let (_, re) = h.complete_pending(&mut w, id, exit).unwrap();
        assert_eq!(re, Reentry::Pending(exit));
    }

    #[test]
    fn cooperative_completes_in_one_round() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        let RsiOutcome::Pending(exit) = w.rsi_csm_create(id, Ipa(0x4000), 2).unwrap() else {
            panic!();
        };
        let (_, re) = h.complete_pending(&mut w, id, exit).unwrap();
        assert!(matches!(re, Reentry::Completed(_)));
    }

    #[test]
    fn remove_is_idempotent() {
        let (mut w, mut h, id) = setup(HostPolicy::Cooperative);
        h.handle_exit_p_csm(&mut w, id, Ipa(0x1000), 1).unwrap();
        assert_eq!(h.csm_ranges().count(), 1);
        h.handle_remove_csm(id, Ipa(0x1000), 1);
        h.handle_remove_csm(id, Ipa(0x1000), 1);
        assert_eq!(h.csm_ranges().count(), 0);
    }

    #[test]
    fn out_of_granules() {
        let mut w = World::new(&WorldConfig { granules: 4, seed: 0 });
        let mut h = Host::default();
        assert_eq!(h.launch_realm(&mut w, 32, &[(Ipa(0), vec![1])], true), Err(RmmError::OutOfGranules));
    }

    #[test]
    fn prober_never_succeeds() {
        let (mut w, mut h, id) = setup(HostPolicy::Prober);
        h.handle_exit_p_csm(&mut w, id, Ipa(0x1000), 2).unwrap();
        let out = h.adversarial_step(&mut w, None).unwrap();
        let AdversarialOutcome::Probe {
            realm_granules,
            attempts,
            successes,
        } = out
        else {
            panic!()
        };
        assert_eq!(realm_granules, 6);
        assert_eq!(attempts, 12);
        assert_eq!(successes, 0);
        assert_eq!(w.counters().realm_pas_breaches, 0);
    }

    #[test]
    fn double_mapper_refused() {
        let (mut w, mut h, a) = setup(HostPolicy::DoubleMapper);
        let (b, _) = h.launch_realm(&mut w, 32, &[(Ipa(0), b"b".to_vec())], true).unwrap();
        let out = h.adversarial_step(&mut w, Some(a)).unwrap();
        assert!(matches!(out, AdversarialOutcome::DoubleMap { ref result, target, .. } if result == "AlreadyMapped" && target == a));
        assert!(w.realm(b).is_some());
    }

    #[test]
    fn swapper_gets_fresh_id() {
        let (mut w, mut h, a) = setup(HostPolicy::ToctouSwapper);
        let rd = w.realm(a).unwrap().rd_granule();
        let out = h.adversarial_step(&mut w, Some(a)).unwrap();
        let AdversarialOutcome::Swap { rd: rd2, old_id, new_id } = out else {
            panic!()
        };
        assert_eq!((rd2, old_id), (rd, a));
        assert_ne!(new_id, a);
        assert_eq!(w.registry_lookup(a).unwrap_err(), RmmError::NoSuchRealm);
    }
}
