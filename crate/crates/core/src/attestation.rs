//! Attestation tokens carrying the realm identifier claim.
//!
//! Canonical encoding of a token, every field length-prefixed with a
//! big-endian u32:
//!
//! ```text
//! claims = lp("csm.claims.v1") ‖ lp(rim: 32) ‖ lp(realm_id: u64 BE) ‖ lp(platform_digest: 32)
//! token  = claims ‖ lp(signature: 64)
//! ```
//!
//! The signature is Ed25519 over the `claims` bytes. The platform key pair
//! is derived from the world seed at boot so runs are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::measurement::{hash_fields, Digest};
use crate::rmm::{Lifecycle, World};
use crate::error::{RmmError, RmmResult};
use crate::types::RealmId;

const CLAIMS_LABEL: &[u8] = b"csm.claims.v1";

/// Firmware identity: the attestation key and the platform measurement.
#[derive(Clone)]
pub struct Platform {
    key: SigningKey,
    digest: Digest,
}

impl fmt::Debug for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Platform").field("digest", &self.digest).finish()
    }
}

impl Platform {
    pub fn boot(seed: u64) -> Platform {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = SigningKey::generate(&mut rng);
        let digest = hash_fields(&[b"platform", key.verifying_key().as_bytes()]);
        Platform { key, digest }
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    fn sign(&self, claims: ClaimSet) -> AttestationToken {
        let signature = self.key.sign(&claims.encode()).to_bytes();
        AttestationToken { claims, signature }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ClaimSet {
    pub rim: Digest,
    pub realm_id: RealmId,
    pub platform_digest: Digest,
}

impl ClaimSet {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * 4 + CLAIMS_LABEL.len() + 72);
        put(&mut out, CLAIMS_LABEL);
        put(&mut out, &self.rim.0);
        put(&mut out, &self.realm_id.0.to_be_bytes());
        put(&mut out, &self.platform_digest.0);
        out
    }
}

fn put(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_be_bytes());
    out.extend_from_slice(field);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum TokenParseError {
    #[error("token truncated")]
    Truncated,
    #[error("field {0} has the wrong length")]
    FieldLength(usize),
    #[error("unknown claim label")]
    Label,
    #[error("trailing bytes after token")]
    Trailing,
}

struct Reader<'a> {
    buf: &'a [u8],
    field: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, want: usize) -> Result<&'a [u8], TokenParseError> {
        if self.buf.len() < 4 {
            return Err(TokenParseError::Truncated);
        }
        let (len, rest) = self.buf.split_at(4);
        let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
        if len != want {
            return Err(TokenParseError::FieldLength(self.field));
        }
        if rest.len() < len {
            return Err(TokenParseError::Truncated);
        }
        let (field, rest) = rest.split_at(len);
        self.buf = rest;
        self.field += 1;
        Ok(field)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttestationToken {
    pub claims: ClaimSet,
    pub signature: [u8; 64],
}

impl AttestationToken {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.claims.encode();
        put(&mut out, &self.signature);
        out
    }

    /// Strict parse of the canonical encoding.
    pub fn from_bytes(bytes: &[u8]) -> Result<AttestationToken, TokenParseError> {
        let mut r = Reader { buf: bytes, field: 0 };
        if r.take(CLAIMS_LABEL.len())? != CLAIMS_LABEL {
            return Err(TokenParseError::Label);
        }
        let rim = Digest(r.take(32)?.try_into().unwrap());
        let realm_id = RealmId(u64::from_be_bytes(r.take(8)?.try_into().unwrap()));
        let platform_digest = Digest(r.take(32)?.try_into().unwrap());
        let signature = r.take(64)?.try_into().unwrap();
        if !r.buf.is_empty() {
            return Err(TokenParseError::Trailing);
        }
        Ok(AttestationToken {
            claims: ClaimSet {
                rim,
                realm_id,
                platform_digest,
            },
            signature,
        })
    }
}

impl Serialize for AttestationToken {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let sig = hex::encode(self.signature);
        let mut st = s.serialize_struct("AttestationToken", 2)?;
        st.serialize_field("claims", &self.claims)?;
        st.serialize_field("signature", &sig)?;
        st.end()
    }
}

/// What a realm owner expects of a genuine peer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OwnerExpectation {
    pub expected_rim: Digest,
    pub platform_pubkey: VerifyingKey,
    pub platform_digest: Digest,
}

impl OwnerExpectation {
    pub fn for_platform(platform: &Platform, expected_rim: Digest) -> OwnerExpectation {
        OwnerExpectation {
            expected_rim,
            platform_pubkey: platform.public_key(),
            platform_digest: platform.digest(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Verification {
    pub valid: bool,
    pub realm_id: Option<RealmId>,
}

impl Verification {
    const INVALID: Verification = Verification {
        valid: false,
        realm_id: None,
    };
}

pub fn verify_token(token: &AttestationToken, exp: &OwnerExpectation) -> Verification {
    let sig = Signature::from_bytes(&token.signature);
    let signed = exp
        .platform_pubkey
        .verify(&token.claims.encode(), &sig)
        .is_ok();
    if signed && token.claims.rim == exp.expected_rim && token.claims.platform_digest == exp.platform_digest {
        Verification {
            valid: true,
            realm_id: Some(token.claims.realm_id),
        }
    } else {
        Verification::INVALID
    }
}

/// Verifies a serialized token; malformed input is simply invalid.
pub fn verify_token_bytes(bytes: &[u8], exp: &OwnerExpectation) -> Verification {
    match AttestationToken::from_bytes(bytes) {
        Ok(t) => verify_token(&t, exp),
        Err(_) => Verification::INVALID,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("peer token failed verification")]
pub struct VerificationFailed;

/// Peer identifiers each realm's software has received from its owner.
/// This is guest state, provisioned over the owner's secure channel.
#[derive(Clone, Debug, Default)]
pub struct PeerStore {
    peers: BTreeMap<RealmId, BTreeSet<RealmId>>,
}

impl PeerStore {
    pub fn knows(&self, realm: RealmId, peer: RealmId) -> bool {
        self.peers.get(&realm).is_some_and(|s| s.contains(&peer))
    }

    pub fn peers_of(&self, realm: RealmId) -> impl Iterator<Item = RealmId> + '_ {
        self.peers.get(&realm).into_iter().flatten().copied()
    }
}

/// The owner verifies a peer token and, on success, hands the attested id
/// to its own realm.
pub fn owner_release_peer_id(
    store: &mut PeerStore,
    owner_realm: RealmId,
    peer_token: &AttestationToken,
    exp: &OwnerExpectation,
) -> Result<RealmId, VerificationFailed> {
    let v = verify_token(peer_token, exp);
    let id = v.realm_id.filter(|_| v.valid).ok_or(VerificationFailed)?;
    store.peers.entry(owner_realm).or_default().insert(id);
    Ok(id)
}

impl World {
    /// `RSI_ATTESTATION_TOKEN`. The only place the platform key signs.
    pub fn rsi_attestation_token(&self, caller: RealmId) -> RmmResult<AttestationToken> {
        let realm = self.realm(caller).ok_or(RmmError::NoSuchRealm)?;
        if realm.lifecycle() != Lifecycle::Active {
            return Err(RmmError::BadState);
        }
        Ok(self.platform.sign(ClaimSet {
            rim: realm.rim(),
            realm_id: caller,
            platform_digest: self.platform.digest(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granule::GranuleState;
    use crate::rmm::WorldConfig;
    use crate::types::{GranuleIdx, Ipa};

    fn realm_with_image(w: &mut World, image: &[u8], activate: bool) -> (RealmId, GranuleIdx) {
        let take = |w: &mut World| {
            let g = w.space().first_in_state(GranuleState::Undelegated).unwrap();
            w.granule_delegate(g).unwrap();
            g
        };
        let rd = take(w);
        let id = w.rmi_realm_create(rd, 32).unwrap();
        let g = take(w);
        w.rmi_rec_create(rd, g).unwrap();
        let g = take(w);
        w.rmi_apt_create(rd, g).unwrap();
        let g = take(w);
        w.rmi_rtt_create(rd, g, Ipa(0)).unwrap();
        let g = take(w);
        w.rmi_data_create(rd, g, Ipa(0), image).unwrap();
        if activate {
            w.rmi_realm_activate(rd).unwrap();
        }
        (id, rd)
    }

    fn world() -> World {
        World::new(&WorldConfig { granules: 32, seed: 3 })
    }

    #[test]
    fn token_round_trip_and_verify() {
        let mut w = world();
        let (id, _) = realm_with_image(&mut w, b"image", true);
        let t = w.rsi_attestation_token(id).unwrap();
        assert_eq!(id, RealmId(1));
        let bytes = t.to_bytes();
        assert_eq!(AttestationToken::from_bytes(&bytes), Ok(t));
        let rim = crate::measurement::measure_image(32, [(Ipa(0), &b"image"[..])]);
        let exp = OwnerExpectation::for_platform(w.platform(), rim);
        assert_eq!(
            verify_token(&t, &exp),
            Verification {
                valid: true,
                realm_id: Some(RealmId(1))
            }
        );
    }

    #[test]
    fn identical_images_differ_only_in_id() {
        let mut w = world();
        let (a, _) = realm_with_image(&mut w, b"same", true);
        let (b, _) = realm_with_image(&mut w, b"same", true);
        let ta = w.rsi_attestation_token(a).unwrap();
        let tb = w.rsi_attestation_token(b).unwrap();
        assert_eq!(ta.claims.rim, tb.claims.rim);
        assert_ne!(ta.claims.realm_id, tb.claims.realm_id);
    }

    #[test]
    fn token_before_activation() {
        let mut w = world();
        let (id, _) = realm_with_image(&mut w, b"x", false);
        assert_eq!(w.rsi_attestation_token(id), Err(RmmError::BadState));
    }

    #[test]
    fn flipped_realm_id_is_rejected() {
        let mut w = world();
        let (id, _) = realm_with_image(&mut w, b"x", true);
        let t = w.rsi_attestation_token(id).unwrap();
        let exp = OwnerExpectation::for_platform(w.platform(), t.claims.rim);
        let mut bytes = t.to_bytes();
        // Last byte of the realm_id field.
        let pos = 4 + CLAIMS_LABEL.len() + 4 + 32 + 4 + 7;
        bytes[pos] ^= 1;
        assert!(!verify_token_bytes(&bytes, &exp).valid);
    }

    #[test]
    fn other_platform_key_rejects() {
        let mut w = world();
        let (id, _) = realm_with_image(&mut w, b"x", true);
        let t = w.rsi_attestation_token(id).unwrap();
        let other = Platform::boot(99);
        let exp = OwnerExpectation {
            expected_rim: t.claims.rim,
            platform_pubkey: other.public_key(),
            platform_digest: w.platform().digest(),
        };
        assert!(!verify_token(&t, &exp).valid);
    }

    #[test]
    fn same_seed_same_key() {
        assert_eq!(Platform::boot(5).public_key(), Platform::boot(5).public_key());
        assert_ne!(Platform::boot(5).public_key(), Platform::boot(6).public_key());
    }

    #[test]
    fn impostor_rim_mismatch() {
        let mut w = world();
        let (genuine, _) = realm_with_image(&mut w, b"genuine", true);
        let (impostor, _) = realm_with_image(&mut w, b"evil", true);
        let exp = OwnerExpectation::for_platform(w.platform(), w.realm(genuine).unwrap().rim());
        let mut store = PeerStore::default();
        let t = w.rsi_attestation_token(impostor).unwrap();
        assert_eq!(owner_release_peer_id(&mut store, genuine, &t, &exp), Err(VerificationFailed));
        assert_eq!(store.peers_of(genuine).count(), 0);
    }

    #[test]
    fn mutual_attestation() {
        let mut w = world();
        let (a, _) = realm_with_image(&mut w, b"a", true);
        let (b, _) = realm_with_image(&mut w, b"b", true);
        let mut store = PeerStore::default();
        let ea = OwnerExpectation::for_platform(w.platform(), w.realm(a).unwrap().rim());
        let eb = OwnerExpectation::for_platform(w.platform(), w.realm(b).unwrap().rim());
        let ta = w.rsi_attestation_token(a).unwrap();
        let tb = w.rsi_attestation_token(b).unwrap();
        assert_eq!(owner_release_peer_id(&mut store, a, &tb, &eb), Ok(b));
        assert_eq!(owner_release_peer_id(&mut store, b, &ta, &ea), Ok(a));
        assert!(store.knows(a, b) && store.knows(b, a));
        assert!(!store.knows(a, a));
    }

    #[test]
    fn parse_rejects_malformed() {
        let mut w = world();
        let (id, _) = realm_with_image(&mut w, b"x", true);
        let bytes = w.rsi_attestation_token(id).unwrap().to_bytes();
        assert_eq!(AttestationToken::from_bytes(&bytes[..bytes.len() - 1]), Err(TokenParseError::Truncated));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(AttestationToken::from_bytes(&extra), Err(TokenParseError::Trailing));
        let mut label = bytes.clone();
        label[5] ^= 0x20;
        assert_eq!(AttestationToken::from_bytes(&label), Err(TokenParseError::Label));
        let mut len = bytes;
        len[3] += 1;
        assert_eq!(AttestationToken::from_bytes(&len), Err(TokenParseError::FieldLength(0)));
    }
}
