//! Realm Initial Measurement.
//!
//! Digests are SHA-256 over a length-prefixed encoding: every field is
//! written as a big-endian u32 byte length followed by the bytes, and each
//! input starts with a fixed domain label so that different record kinds
//! can never collide.
//!
//! ```text
//! rim0          = H(lp("rim.config") ‖ lp(ipa_width as u8))
//! rim(n+1)      = H(lp("rim.data") ‖ lp(rim(n)) ‖ lp(ipa as u64 BE) ‖ lp(H(content)))
//! ```
//!
//! `content` is always the full 4096-byte granule after zero padding.

use std::fmt;

use serde::{Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::types::{Ipa, GRANULE_SIZE};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

/// Hashes a sequence of fields with the length-prefixed encoding.
pub fn hash_fields(fields: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for f in fields {
        h.update((f.len() as u32).to_be_bytes());
        h.update(f);
    }
    Digest(h.finalize().into())
}

pub fn content_digest(content: &[u8; GRANULE_SIZE]) -> Digest {
    Digest(Sha256::digest(content).into())
}

pub fn initial_rim(ipa_width: u8) -> Digest {
    hash_fields(&[b"rim.config", &[ipa_width]])
}

pub fn extend_rim(rim: &Digest, ipa: Ipa, content: &[u8; GRANULE_SIZE]) -> Digest {
    let cd = content_digest(content);
    hash_fields(&[b"rim.data", &rim.0, &ipa.0.to_be_bytes(), &cd.0])
}

/// Zero-pads up to one granule. Longer input is truncated.
pub fn pad_granule(bytes: &[u8]) -> [u8; GRANULE_SIZE] {
    let mut out = [0u8; GRANULE_SIZE];
    let n = bytes.len().min(GRANULE_SIZE);
    out[..n].copy_from_slice(&bytes[..n]);
    out
}

/// Reference measurement a realm owner computes offline for an expected
/// image: configuration plus pages in load order.
pub fn measure_image<'a>(ipa_width: u8, pages: impl IntoIterator<Item = (Ipa, &'a [u8])>) -> Digest {
    pages
        .into_iter()
        .fold(initial_rim(ipa_width), |rim, (ipa, bytes)| {
            extend_rim(&rim, ipa, &pad_granule(bytes))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn order_sensitive() {
        let a = measure_image(32, [(Ipa(0), &b"a"[..]), (Ipa(0x1000), &b"b"[..])]);
        let b = measure_image(32, [(Ipa(0x1000), &b"b"[..]), (Ipa(0), &b"a"[..])]);
        assert_ne!(a, b);
    }

    #[test]
    fn config_is_measured() {
        assert_ne!(initial_rim(32), initial_rim(33));
    }

    #[test]
    fn length_prefix_separates_fields() {
        assert_ne!(hash_fields(&[b"ab", b"c"]), hash_fields(&[b"a", b"bc"]));
    }

    proptest! {
        #[test]
        fn single_byte_perturbation_changes_rim(
            data in proptest::collection::vec(any::<u8>(), 1..64),
            pos in any::<prop::sample::Index>(),
            flip in 1u8..=255,
        ) {
            let base = measure_image(32, [(Ipa(0), &data[..])]);
            let mut other = data.clone();
            let i = pos.index(other.len());
            other[i] ^= flip;
            prop_assert_ne!(base, measure_image(32, [(Ipa(0), &other[..])]));
            prop_assert_eq!(base, measure_image(32, [(Ipa(0), &data[..])]));
        }
    }
}
