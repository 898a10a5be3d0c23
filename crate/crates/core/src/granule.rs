//! Physical memory as an array of 4 KiB granules, each tagged with the
//! physical address space (PAS) that owns it.
//!
//! The Granule Protection Table holds one tag per granule and the Granule
//! Protection Check gates every physical access on (executing world, tag).

use std::sync::{Arc, OnceLock};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{AccessError, FaultReason, RmmError, RmmResult};
use crate::types::{AccessKind, GranuleIdx, GRANULE_SIZE};

/// Owning world of a granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum PasTag {
    Normal,
    Secure,
    Realm,
    Root,
}

impl PasTag {
    pub const ALL: [PasTag; 4] = [PasTag::Normal, PasTag::Secure, PasTag::Realm, PasTag::Root];
}

/// World the executing actor runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SecurityState {
    Normal,
    Secure,
    Realm,
    Root,
}

impl SecurityState {
    pub const ALL: [SecurityState; 4] = [
        SecurityState::Normal,
        SecurityState::Secure,
        SecurityState::Realm,
        SecurityState::Root,
    ];
}

/// Granule Protection Check.
pub fn gpc_check(state: SecurityState, pas: PasTag) -> bool {
    use PasTag as P;
    use SecurityState as S;
    match (state, pas) {
        (S::Root, _) => true,
        (_, P::Normal) => true,
        (S::Secure, P::Secure) => true,
        (S::Realm, P::Realm) => true,
        _ => false,
    }
}

/// RMM-level lifecycle of a granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum GranuleState {
    Undelegated,
    Delegated,
    Rd,
    Rec,
    Rtt,
    Data,
    Apt,
}

impl GranuleState {
    /// PAS tag implied by the state.
    pub fn expected_pas(self) -> PasTag {
        match self {
            GranuleState::Undelegated => PasTag::Normal,
            _ => PasTag::Realm,
        }
    }
}

/// Backing bytes of a granule. Shared between world clones until written.
#[derive(Clone, Debug)]
struct Page {
    bytes: [u8; GRANULE_SIZE],
    digest: OnceLock<[u8; 32]>,
}

/// One granule. A `None` content is all-zero.
#[derive(Clone, Debug)]
pub struct Granule {
    index: GranuleIdx,
    pub(crate) state: GranuleState,
    content: Option<Arc<Page>>,
}

impl Granule {
    fn new(index: GranuleIdx) -> Granule {
        Granule {
            index,
            state: GranuleState::Undelegated,
            content: None,
        }
    }

    pub fn index(&self) -> GranuleIdx {
        self.index
    }

    pub fn state(&self) -> GranuleState {
        self.state
    }

    pub fn is_zero(&self) -> bool {
        self.content.as_ref().is_none_or(|c| c.bytes.iter().all(|&b| b == 0))
    }

    pub fn bytes(&self) -> [u8; GRANULE_SIZE] {
        match &self.content {
            Some(c) => c.bytes,
            None => [0; GRANULE_SIZE],
        }
    }

    pub fn read(&self, offset: usize, out: &mut [u8]) {
        match &self.content {
            Some(c) => out.copy_from_slice(&c.bytes[offset..offset + out.len()]),
            None => out.fill(0),
        }
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) {
        if self.content.is_none() && data.iter().all(|&b| b == 0) {
            return;
        }
        let page = self.content.get_or_insert_with(|| {
            Arc::new(Page {
                bytes: [0; GRANULE_SIZE],
                digest: OnceLock::new(),
            })
        });
        let page = Arc::make_mut(page);
        page.bytes[offset..offset + data.len()].copy_from_slice(data);
        page.digest = OnceLock::new();
    }

    pub(crate) fn wipe(&mut self) {
        self.content = None;
    }

    /// SHA-256 of the content, or `None` for a granule never written since
    /// its last wipe. Cached per distinct page.
    pub fn content_digest(&self) -> Option<[u8; 32]> {
        self.content
            .as_ref()
            .map(|c| *c.digest.get_or_init(|| Sha256::digest(c.bytes).into()))
    }
}

/// Granule Protection Table.
#[derive(Clone, Debug)]
pub struct Gpt {
    tags: Vec<PasTag>,
}

impl Gpt {
    pub fn tag(&self, index: GranuleIdx) -> Option<PasTag> {
        self.tags.get(index).copied()
    }

    pub fn tags(&self) -> &[PasTag] {
        &self.tags
    }
}

/// Physical memory: the granules together with the GPT.
#[derive(Clone, Debug)]
pub struct GranuleSpace {
    gpt: Gpt,
    granules: Vec<Granule>,
}

impl GranuleSpace {
    pub const DEFAULT_GRANULES: usize = 64;

    pub fn new(count: usize) -> GranuleSpace {
        GranuleSpace {
            gpt: Gpt {
                tags: vec![PasTag::Normal; count],
            },
            granules: (0..count).map(Granule::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.granules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.granules.is_empty()
    }

    pub fn gpt(&self) -> &Gpt {
        &self.gpt
    }

    pub fn granule(&self, index: GranuleIdx) -> Option<&Granule> {
        self.granules.get(index)
    }

    pub(crate) fn granule_mut(&mut self, index: GranuleIdx) -> Option<&mut Granule> {
        self.granules.get_mut(index)
    }

    pub fn granules(&self) -> &[Granule] {
        &self.granules
    }

    pub fn state(&self, index: GranuleIdx) -> Option<GranuleState> {
        self.granules.get(index).map(|g| g.state)
    }

    pub fn count_in_state(&self, state: GranuleState) -> usize {
        self.granules.iter().filter(|g| g.state == state).count()
    }

    /// Lowest-indexed granule in `state`, if any.
    pub fn first_in_state(&self, state: GranuleState) -> Option<GranuleIdx> {
        self.granules.iter().position(|g| g.state == state)
    }

    /// Access from a world-level actor (host, secure world, monitor).
    ///
    /// On success a read fills `buf` from the granule at `offset`; a write
    /// copies `buf` into it. A fault leaves the content untouched.
    pub fn physical_access(
        &mut self,
        actor: SecurityState,
        index: GranuleIdx,
        kind: AccessKind,
        offset: usize,
        buf: &mut [u8],
    ) -> Result<(), AccessError> {
        let tag = self.gpt.tag(index).ok_or(AccessError::OutOfRange(index))?;
        if !gpc_check(actor, tag) {
            return Err(AccessError::PhysicalFault {
                granule: index,
                kind,
                reason: FaultReason::Gpc,
            });
        }
        let g = &mut self.granules[index];
        match kind {
            AccessKind::Read => g.read(offset, buf),
            AccessKind::Write => g.write(offset, buf),
        }
        Ok(())
    }

    /// Moves an undelegated granule into the realm world, zero-filled.
    pub fn delegate(&mut self, index: GranuleIdx) -> RmmResult<()> {
        let g = self.granules.get_mut(index).ok_or(RmmError::OutOfRange)?;
        if g.state != GranuleState::Undelegated {
            return Err(RmmError::BadState);
        }
        g.state = GranuleState::Delegated;
        g.wipe();
        self.gpt.tags[index] = PasTag::Realm;
        Ok(())
    }

    /// Returns a delegated (unused) granule to the normal world, zero-filled.
    pub fn undelegate(&mut self, index: GranuleIdx) -> RmmResult<()> {
        let g = self.granules.get_mut(index).ok_or(RmmError::OutOfRange)?;
        if g.state != GranuleState::Delegated {
            return Err(RmmError::BadState);
        }
        g.state = GranuleState::Undelegated;
        g.wipe();
        self.gpt.tags[index] = PasTag::Normal;
        Ok(())
    }

    /// Moves a Delegated granule into a metadata/data state.
    pub(crate) fn claim(&mut self, index: GranuleIdx, to: GranuleState) -> RmmResult<()> {
        let g = self.granules.get_mut(index).ok_or(RmmError::OutOfRange)?;
        if g.state != GranuleState::Delegated {
            return Err(RmmError::BadState);
        }
        g.state = to;
        Ok(())
    }

    /// Wipes an in-use realm granule and returns it to Delegated.
    pub(crate) fn release(&mut self, index: GranuleIdx) {
        let g = &mut self.granules[index];
        debug_assert!(!matches!(
            g.state,
            GranuleState::Undelegated | GranuleState::Delegated
        ));
        g.state = GranuleState::Delegated;
        g.wipe();
    }

    #[cfg(feature = "mutants")]
    pub(crate) fn force_state(&mut self, index: GranuleIdx, state: GranuleState) {
        self.granules[index].state = state;
        self.gpt.tags[index] = state.expected_pas();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Literal transcription of the access table; rows are security states,
    // columns are Normal, Secure, Realm, Root PAS.
    const TABLE: [[bool; 4]; 4] = [
        [true, false, false, false],
        [true, true, false, false],
        [true, false, true, false],
        [true, true, true, true],
    ];

    #[test]
    fn gpc_matches_table_for_all_pairs() {
        for (i, s) in SecurityState::ALL.iter().enumerate() {
            for (j, p) in PasTag::ALL.iter().enumerate() {
                assert_eq!(gpc_check(*s, *p), TABLE[i][j], "{s:?} x {p:?}");
            }
        }
    }

    #[test]
    fn named_cells() {
        assert!(!gpc_check(SecurityState::Normal, PasTag::Realm));
        assert!(gpc_check(SecurityState::Root, PasTag::Secure));
        assert!(gpc_check(SecurityState::Realm, PasTag::Normal));
        assert!(!gpc_check(SecurityState::Realm, PasTag::Secure));
    }

    #[test]
    fn delegate_wipes_and_retags() {
        let mut s = GranuleSpace::new(4);
        let mut buf = [0xAAu8; 16];
        s.physical_access(SecurityState::Normal, 1, AccessKind::Write, 0, &mut buf)
            .unwrap();
        assert!(!s.granule(1).unwrap().is_zero());
        s.delegate(1).unwrap();
        let g = s.granule(1).unwrap();
        assert_eq!(g.state(), GranuleState::Delegated);
        assert_eq!(s.gpt().tag(1), Some(PasTag::Realm));
        assert!(g.is_zero());
        assert_eq!(s.delegate(1), Err(RmmError::BadState));
    }

    #[test]
    fn undelegate_only_from_delegated() {
        let mut s = GranuleSpace::new(4);
        assert_eq!(s.undelegate(0), Err(RmmError::BadState));
        s.delegate(0).unwrap();
        s.claim(0, GranuleState::Data).unwrap();
        assert_eq!(s.undelegate(0), Err(RmmError::BadState));
        assert_eq!(s.delegate(0), Err(RmmError::BadState));
        s.release(0);
        s.undelegate(0).unwrap();
        assert_eq!(s.gpt().tag(0), Some(PasTag::Normal));
    }

    #[test]
    fn round_trip_restores_gpt() {
        let mut s = GranuleSpace::new(8);
        let before = s.gpt().tags().to_vec();
        s.delegate(3).unwrap();
        s.undelegate(3).unwrap();
        assert_eq!(s.gpt().tags(), &before[..]);
    }

    #[test]
    fn physical_access_rules() {
        let mut s = GranuleSpace::new(4);
        let mut buf = [0u8; 4];
        s.physical_access(SecurityState::Normal, 0, AccessKind::Read, 0, &mut buf)
            .unwrap();
        s.delegate(2).unwrap();
        s.claim(2, GranuleState::Data).unwrap();
        let err = s
            .physical_access(SecurityState::Normal, 2, AccessKind::Read, 0, &mut buf)
            .unwrap_err();
        assert_eq!(err.code(), "Fault");
        let mut data = [7u8; 4];
        s.physical_access(SecurityState::Root, 2, AccessKind::Write, 0, &mut data)
            .unwrap();
        let mut data = [1u8; 4];
        assert!(s
            .physical_access(SecurityState::Normal, 2, AccessKind::Write, 0, &mut data)
            .is_err());
        assert_eq!(&s.granule(2).unwrap().bytes()[..4], &[7, 7, 7, 7]);
        assert_eq!(
            s.physical_access(SecurityState::Root, 9, AccessKind::Read, 0, &mut buf),
            Err(AccessError::OutOfRange(9))
        );
    }

    #[test]
    fn state_count_is_total() {
        let mut s = GranuleSpace::new(6);
        s.delegate(0).unwrap();
        s.delegate(4).unwrap();
        let undelegated = s.count_in_state(GranuleState::Undelegated);
        assert_eq!(undelegated + (s.len() - undelegated), 6);
        assert_eq!(undelegated, 4);
    }
}
