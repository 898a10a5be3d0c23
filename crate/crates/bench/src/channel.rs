//! Depth-1 message channel over a single shared buffer.
//!
//! The buffer holds one message slot and two acknowledgment counters. The
//! sender writes the slot only after the receiver has acknowledged the
//! previous message, and publishes it by bumping `sent` with release
//! ordering; the receiver polls `sent` with acquire ordering, consumes the
//! slot, and bumps `received`. Every slot access therefore happens between
//! matching counter transitions and the two endpoints never touch it at the
//! same time.

use std::cell::UnsafeCell;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use serde::Serialize;
use thiserror::Error;

/// Encoded header: payload length (u32), session id (u64), seq (u64), all
/// big-endian.
pub const HEADER_LEN: usize = 20;
pub const TAG_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Normal-world shared memory the host can read and modify.
    Plaintext,
    /// The same memory, with every payload encrypted and authenticated.
    Aead,
    /// Plaintext over confidential shared memory. The data path is the
    /// plaintext one; only host access differs.
    Csm,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Plaintext, Mode::Aead, Mode::Csm];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Plaintext => "plaintext",
            Mode::Aead => "aead",
            Mode::Csm => "csm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected plaintext, aead or csm)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageHeader {
    pub len: u32,
    pub session_id: u64,
    pub seq: u64,
}

impl MessageHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&self.len.to_be_bytes());
        out[4..12].copy_from_slice(&self.session_id.to_be_bytes());
        out[12..].copy_from_slice(&self.seq.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> MessageHeader {
        MessageHeader {
            len: u32::from_be_bytes(b[..4].try_into().unwrap()),
            session_id: u64::from_be_bytes(b[4..12].try_into().unwrap()),
            seq: u64::from_be_bytes(b[12..].try_into().unwrap()),
        }
    }

    /// 96-bit GCM nonce: low 32 bits of the session id, then the sequence
    /// number. The key is per session, so a nonce repeats only if a
    /// sequence number does, which the sender never allows.
    fn nonce(&self) -> [u8; 12] {
        let mut n = [0u8; 12];
        n[..4].copy_from_slice(&(self.session_id as u32).to_be_bytes());
        n[4..].copy_from_slice(&self.seq.to_be_bytes());
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("payload of {len} bytes exceeds the {max}-byte slot")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("message failed authentication")]
    AuthFailure,
    #[error("expected sequence number {expected}, got {got}")]
    SeqMismatch { expected: u64, got: u64 },
    #[error("message belongs to session {got:#x}, not {expected:#x}")]
    SessionMismatch { expected: u64, got: u64 },
    #[error("header claims {len} bytes but the slot holds at most {max}")]
    Malformed { len: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("confidential shared memory is not accessible to the host")]
pub struct HostDenied;

pub struct Channel {
    mode: Mode,
    max_payload: usize,
    slot: UnsafeCell<Box<[u8]>>,
    sent: AtomicU64,
    received: AtomicU64,
}

// SAFETY: the slot is only accessed under the counter protocol described in
// the module docs, which gives each endpoint exclusive use of it in turn.
unsafe impl Sync for Channel {}

impl Channel {
    /// A connected sender/receiver pair sharing one fresh buffer.
    pub fn pair(mode: Mode, max_payload: usize, session_id: u64, key: [u8; 32]) -> (Sender, Receiver) {
        let chan = Arc::new(Channel {
            mode,
            max_payload,
            slot: UnsafeCell::new(vec![0u8; HEADER_LEN + max_payload + TAG_LEN].into_boxed_slice()),
            sent: AtomicU64::new(0),
            received: AtomicU64::new(0),
        });
        let cipher = || (mode == Mode::Aead).then(|| Aes256Gcm::new(&key.into()));
        let tx = Sender {
            chan: Arc::clone(&chan),
            session_id,
            seq: 0,
            cipher: cipher(),
            scratch: Vec::with_capacity(max_payload),
            busy: Duration::ZERO,
        };
        let rx = Receiver {
            chan,
            session_id,
            expected: 0,
            cipher: cipher(),
            busy: Duration::ZERO,
        };
        (tx, rx)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn max_payload(&self) -> usize {
        self.max_payload
    }

    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Acquire)
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Acquire)
    }

    /// The host's view of the slot.
    ///
    /// # Safety
    /// Neither endpoint may be inside `send` or `recv` during the call.
    pub unsafe fn host_read(&self) -> Result<Vec<u8>, HostDenied> {
        if self.mode == Mode::Csm {
            return Err(HostDenied);
        }
        Ok((&*self.slot.get()).to_vec())
    }

    /// The host overwrites part of the slot.
    ///
    /// # Safety
    /// Neither endpoint may be inside `send` or `recv` during the call.
    pub unsafe fn host_write(&self, offset: usize, bytes: &[u8]) -> Result<(), HostDenied> {
        if self.mode == Mode::Csm {
            return Err(HostDenied);
        }
        (&mut *self.slot.get())[offset..offset + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }
}

fn wait_until(mut ready: impl FnMut() -> bool) {
    while !ready() {
        thread::yield_now();
    }
}

pub struct Sender {
    chan: Arc<Channel>,
    session_id: u64,
    seq: u64,
    cipher: Option<Aes256Gcm>,
    scratch: Vec<u8>,
    busy: Duration,
}

impl Sender {
    pub fn channel(&self) -> &Channel {
        &self.chan
    }

    /// Sequence number the next message will carry.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// Time spent writing messages, excluding time spent waiting.
    pub fn busy(&self) -> Duration {
        self.busy
    }

    pub fn reset_busy(&mut self) {
        self.busy = Duration::ZERO;
    }

    /// Blocks until the previous message has been acknowledged.
    pub fn wait_ack(&self) {
        let n = self.chan.sent.load(Ordering::Relaxed);
        wait_until(|| self.chan.received.load(Ordering::Acquire) >= n);
    }

    pub fn send(&mut self, payload: &[u8]) -> Result<(), ChannelError> {
        let max = self.chan.max_payload;
        if payload.len() > max {
            return Err(ChannelError::PayloadTooLarge { len: payload.len(), max });
        }
        self.wait_ack();
        let start = Instant::now();
        let n = self.chan.sent.load(Ordering::Relaxed);
        let header = MessageHeader {
            len: payload.len() as u32,
            session_id: self.session_id,
            seq: self.seq,
        };
        let hdr = header.encode();
        // SAFETY: received == sent, so the receiver stays out of the slot
        // until we publish n + 1 below.
        let slot = unsafe { &mut *self.chan.slot.get() };
        slot[..HEADER_LEN].copy_from_slice(&hdr);
        let body = HEADER_LEN..HEADER_LEN + payload.len();
        match &self.cipher {
            None => slot[body].copy_from_slice(payload),
            Some(c) => {
                // Plaintext never touches shared memory.
                self.scratch.clear();
                self.scratch.extend_from_slice(payload);
                let tag = c
                    .encrypt_in_place_detached(Nonce::from_slice(&header.nonce()), &hdr, &mut self.scratch)
                    .expect("encrypting a bounded in-memory buffer cannot fail");
                slot[body.clone()].copy_from_slice(&self.scratch);
                slot[body.end..body.end + TAG_LEN].copy_from_slice(&tag);
            }
        }
        self.seq += 1;
        self.chan.sent.store(n + 1, Ordering::Release);
        self.busy += start.elapsed();
        Ok(())
    }

    /// Makes the next message reuse an earlier sequence number, as a
    /// replaying or buggy sender would.
    pub fn rewind_seq(&mut self, seq: u64) {
        self.seq = seq;
    }
}

pub struct Receiver {
    chan: Arc<Channel>,
    session_id: u64,
    expected: u64,
    cipher: Option<Aes256Gcm>,
    busy: Duration,
}

impl Receiver {
    pub fn channel(&self) -> &Channel {
        &self.chan
    }

    /// Time spent consuming messages, excluding time spent waiting.
    pub fn busy(&self) -> Duration {
        self.busy
    }

    pub fn reset_busy(&mut self) {
        self.busy = Duration::ZERO;
    }

    /// Whether a message is waiting.
    pub fn poll(&self) -> bool {
        self.chan.sent.load(Ordering::Acquire) > self.chan.received.load(Ordering::Relaxed)
    }

    /// Waits for the next message and copies its payload into `out`. A
    /// rejected message is not acknowledged.
    pub fn recv(&mut self, out: &mut Vec<u8>) -> Result<(), ChannelError> {
        wait_until(|| self.poll());
        let start = Instant::now();
        let r = self.chan.received.load(Ordering::Relaxed);
        let res = self.consume(out);
        match res {
            Ok(()) => {
                self.expected += 1;
                self.chan.received.store(r + 1, Ordering::Release);
            }
            Err(_) => out.clear(),
        }
        self.busy += start.elapsed();
        res
    }

    fn consume(&self, out: &mut Vec<u8>) -> Result<(), ChannelError> {
        // SAFETY: sent > received, so the sender stays out of the slot until
        // we acknowledge.
        let slot = unsafe { &*self.chan.slot.get() };
        let hdr: [u8; HEADER_LEN] = slot[..HEADER_LEN].try_into().unwrap();
        let header = MessageHeader::decode(&hdr);
        let len = header.len as usize;
        let max = self.chan.max_payload;
        if len > max {
            return Err(ChannelError::Malformed { len, max });
        }
        if header.session_id != self.session_id {
            return Err(ChannelError::SessionMismatch {
                expected: self.session_id,
                got: header.session_id,
            });
        }
        if header.seq != self.expected {
            return Err(ChannelError::SeqMismatch {
                expected: self.expected,
                got: header.seq,
            });
        }
        out.clear();
        out.extend_from_slice(&slot[HEADER_LEN..HEADER_LEN + len]);
        if let Some(c) = &self.cipher {
            let tag = Tag::from_slice(&slot[HEADER_LEN + len..HEADER_LEN + len + TAG_LEN]);
            c.decrypt_in_place_detached(Nonce::from_slice(&header.nonce()), &hdr, out, tag)
                .map_err(|_| ChannelError::AuthFailure)?;
        }
        Ok(())
    }
}
