//! Inter-realm messaging benchmark over one shared buffer, in plaintext,
//! AEAD-encrypted and CSM modes.

pub mod channel;
mod run;

pub use channel::{Channel, ChannelError, HostDenied, MessageHeader, Mode, Receiver, Sender, HEADER_LEN, TAG_LEN};
pub use run::{bench_run, write_csv, BenchError, BenchReport, CSV_HEADER, MAX_SIZE, MIN_ITERS, MIN_SIZE};
