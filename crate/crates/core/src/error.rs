use thiserror::Error;

use crate::types::{AccessKind, GranuleIdx, Ipa, RealmId};

/// Status codes returned by RMI and RSI handlers.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RmmError {
    #[error("granule or realm is in the wrong state for this command")]
    BadState,
    #[error("granule index out of range")]
    OutOfRange,
    #[error("object already exists")]
    AlreadyExists,
    #[error("access policy table still holds entries")]
    NotEmpty,
    #[error("target already mapped")]
    AlreadyMapped,
    #[error("granule is not delegated")]
    NotDelegated,
    #[error("address is not granule-aligned or outside the protected half")]
    Unaligned,
    #[error("address is not mapped")]
    NotMapped,
    #[error("no translation table backs this address")]
    TableMiss,
    #[error("realm has no access policy table")]
    MissingApt,
    #[error("no such realm")]
    NoSuchRealm,
    #[error("range overlaps an existing CSM entry")]
    Overlap,
    #[error("caller has no access policy table")]
    NoApt,
    #[error("caller does not own this CSM or sharing")]
    NotOwner,
    #[error("CSM already shared with this realm")]
    AlreadyShared,
    #[error("a realm cannot share with itself")]
    SelfShare,
    #[error("caller is not the consumer named by the sharing identifier")]
    WrongConsumer,
    #[error("provider has not shared this region")]
    NotShared,
    #[error("consumer has not reserved a window for this sharing")]
    NotReserved,
    #[error("reserved window size differs from the CSM size")]
    SizeMismatch,
    #[error("sharing already attached")]
    AlreadyAttached,
    #[error("CSM range is not fully populated")]
    Unpopulated,
    #[error("no such sharing")]
    NoSuchSharing,
    #[error("no such CSM")]
    NoSuchCsm,
    #[error("access policy table is full")]
    CapacityExceeded,
    #[error("realm has an RSI call awaiting host service")]
    RsiPending,
    #[error("address lies inside a consumer CSM window")]
    CsmWindow,
    #[error("host has no undelegated granules left")]
    OutOfGranules,
}

impl RmmError {
    /// Stable name used in scenario files and traces.
    pub fn code(&self) -> &'static str {
        use RmmError::*;
        match self {
            BadState => "BadState",
            OutOfRange => "OutOfRange",
            AlreadyExists => "AlreadyExists",
            NotEmpty => "NotEmpty",
            AlreadyMapped => "AlreadyMapped",
            NotDelegated => "NotDelegated",
            Unaligned => "Unaligned",
            NotMapped => "NotMapped",
            TableMiss => "TableMiss",
            MissingApt => "MissingApt",
            NoSuchRealm => "NoSuchRealm",
            Overlap => "Overlap",
            NoApt => "NoApt",
            NotOwner => "NotOwner",
            AlreadyShared => "AlreadyShared",
            SelfShare => "SelfShare",
            WrongConsumer => "WrongConsumer",
            NotShared => "NotShared",
            NotReserved => "NotReserved",
            SizeMismatch => "SizeMismatch",
            AlreadyAttached => "AlreadyAttached",
            Unpopulated => "Unpopulated",
            NoSuchSharing => "NoSuchSharing",
            NoSuchCsm => "NoSuchCsm",
            CapacityExceeded => "CapacityExceeded",
            RsiPending => "RsiPending",
            CsmWindow => "CsmWindow",
            OutOfGranules => "OutOfGranules",
        }
    }
}

/// Why a memory access was refused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum FaultReason {
    /// Granule Protection Check denied the access.
    Gpc,
    /// No valid stage-2 entry for the address.
    Unmapped,
    /// Stage-2 entry does not permit this access kind.
    Permission,
    /// The realm is not in a runnable state.
    NotRunnable,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("granule {0} out of range")]
    OutOfRange(GranuleIdx),
    #[error("{kind:?} fault on granule {granule}: {reason:?}")]
    PhysicalFault {
        granule: GranuleIdx,
        kind: AccessKind,
        reason: FaultReason,
    },
    #[error("realm {realm} {kind:?} fault at {ipa}: {reason:?}")]
    RealmFault {
        realm: RealmId,
        ipa: Ipa,
        kind: AccessKind,
        reason: FaultReason,
    },
    #[error("no such realm")]
    NoSuchRealm,
}

impl AccessError {
    pub fn code(&self) -> &'static str {
        match self {
            AccessError::OutOfRange(_) => "OutOfRange",
            AccessError::PhysicalFault { .. } | AccessError::RealmFault { .. } => "Fault",
            AccessError::NoSuchRealm => "NoSuchRealm",
        }
    }
}

pub type RmmResult<T> = Result<T, RmmError>;
