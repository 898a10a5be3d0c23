//! Identifiers and small value types shared by every layer of the model.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Size of one granule in bytes.
pub const GRANULE_SIZE: usize = 4096;
const GRANULE_SHIFT: u32 = 12;

/// Index of a physical granule (0..N).
pub type GranuleIdx = usize;

/// System-wide realm identifier handed out by the RMM.
///
/// Identifiers come from a counter starting at 1 and are never reused; 0 means
/// "no realm".
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RealmId(pub u64);

impl RealmId {
    pub const NONE: RealmId = RealmId(0);
}

impl fmt::Display for RealmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CsmId(pub u64);

impl fmt::Display for CsmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Intermediate physical address as seen by a realm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ipa(pub u64);

impl Ipa {
    pub fn from_granule(n: u64) -> Ipa {
        Ipa(n << GRANULE_SHIFT)
    }

    pub fn is_aligned(self) -> bool {
        self.0 % GRANULE_SIZE as u64 == 0
    }

    /// Granule number containing this address.
    pub fn granule(self) -> u64 {
        self.0 >> GRANULE_SHIFT
    }

    pub fn page_offset(self) -> usize {
        (self.0 % GRANULE_SIZE as u64) as usize
    }

    /// Address `k` granules above this one.
    pub fn add_granules(self, k: u64) -> Ipa {
        Ipa(self.0 + (k << GRANULE_SHIFT))
    }
}

impl fmt::Display for Ipa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Permission {
    ReadOnly,
    ReadWrite,
}

impl Permission {
    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => true,
            AccessKind::Write => self == Permission::ReadWrite,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

/// Identifier of one P→C sharing of a CSM region.
///
/// Both sides can compute it independently: it is the provider id, the
/// consumer id, and the per-pair share counter, in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SharingId {
    pub p_id: RealmId,
    pub c_id: RealmId,
    pub counter: u32,
}

impl SharingId {
    pub fn compose(p_id: RealmId, c_id: RealmId, counter: u32) -> SharingId {
        SharingId { p_id, c_id, counter }
    }

    /// Fixed 20-byte big-endian wire form: p_id ‖ c_id ‖ counter.
    pub fn to_bytes(self) -> [u8; 20] {
        let mut out = [0u8; 20];
        out[..8].copy_from_slice(&self.p_id.0.to_be_bytes());
        out[8..16].copy_from_slice(&self.c_id.0.to_be_bytes());
        out[16..].copy_from_slice(&self.counter.to_be_bytes());
        out
    }

    pub fn from_bytes(b: [u8; 20]) -> SharingId {
        let p = u64::from_be_bytes(b[..8].try_into().unwrap());
        let c = u64::from_be_bytes(b[8..16].try_into().unwrap());
        let n = u32::from_be_bytes(b[16..].try_into().unwrap());
        SharingId::compose(RealmId(p), RealmId(c), n)
    }
}

impl fmt::Display for SharingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.p_id, self.c_id, self.counter)
    }
}
