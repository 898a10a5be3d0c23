pub mod attestation;
pub mod csm;
pub mod error;
pub mod granule;
pub mod host;
pub mod invariants;
pub mod measurement;
pub mod rmm;
pub mod types;
pub mod explorer;
pub mod scenario;
