use std::fs::OpenOptions;
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::channel::{Channel, ChannelError, Mode};

pub const MIN_SIZE: usize = 64;
pub const MAX_SIZE: usize = 4 << 20;
/// Fewest measured messages per run, so medians rest on enough samples.
pub const MIN_ITERS: usize = 1000;

pub const CSV_HEADER: [&str; 6] = [
    "mode",
    "size_bytes",
    "iters",
    "median_latency_ns",
    "throughput_Bps",
    "cpu_ns_per_msg",
];

const SESSION_ID: u64 = 0x5e55_1011;
const KEY: [u8; 32] = [0x42; 32];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("message size {0} outside {MIN_SIZE}..={MAX_SIZE}")]
    Size(usize),
    #[error("{0} iterations is below the minimum of {MIN_ITERS}")]
    Iters(usize),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("payload corrupted in transit at message {0}")]
    Corrupted(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub mode: Mode,
    pub size_bytes: usize,
    pub iters: usize,
    /// Median one-way time from the start of `send` to the end of `recv`.
    pub median_latency_ns: u64,
    #[serde(rename = "throughput_Bps")]
    pub throughput_bps: f64,
    /// Busy time of both endpoints per message, waiting excluded.
    pub cpu_ns_per_msg: f64,
}

/// Sends `iters` messages of `size` random bytes through a fresh channel
/// after a short warmup, with the receiver on its own thread.
pub fn bench_run(mode: Mode, size: usize, iters: usize) -> Result<BenchReport, BenchError> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(BenchError::Size(size));
    }
    if iters < MIN_ITERS {
        return Err(BenchError::Iters(iters));
    }
    let warmup = (iters / 10).max(10);
    let total = warmup + iters;

    let mut payload = vec![0u8; size];
    StdRng::seed_from_u64(size as u64).fill_bytes(&mut payload);
    let expected = payload.clone();

    let (mut tx, mut rx) = Channel::pair(mode, size, SESSION_ID, KEY);
    let receiver = thread::spawn(move || -> Result<(Vec<Instant>, Duration), BenchError> {
        let mut done = Vec::with_capacity(iters);
        let mut out = Vec::with_capacity(size);
        for i in 0..total {
            if i == warmup {
                rx.reset_busy();
            }
            rx.recv(&mut out)?;
            if i >= warmup {
                done.push(Instant::now());
            }
            if out != expected {
                return Err(BenchError::Corrupted(i));
            }
        }
        Ok((done, rx.busy()))
    });

    let mut starts = Vec::with_capacity(iters);
    for i in 0..total {
        if i == warmup {
            tx.reset_busy();
        }
        tx.wait_ack();
        let t = Instant::now();
        tx.send(&payload).expect("payload fits the slot by construction");
        if i >= warmup {
            starts.push(t);
        }
    }
    tx.wait_ack();
    let tx_busy = tx.busy();
    let (done, rx_busy) = receiver.join().expect("receiver thread panicked")?;

    let mut lat: Vec<u64> = starts.iter().zip(&done).map(|(s, d)| d.duration_since(*s).as_nanos() as u64).collect();
    lat.sort_unstable();
    let span = done[iters - 1].duration_since(starts[0]).as_secs_f64();
    Ok(BenchReport {
        mode,
        size_bytes: size,
        iters,
        median_latency_ns: median(&lat),
        throughput_bps: (size * iters) as f64 / span,
        cpu_ns_per_msg: (tx_busy + rx_busy).as_nanos() as f64 / iters as f64,
    })
}

fn median(sorted: &[u64]) -> u64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Appends report rows to a CSV file, writing the header if it is new.
pub fn write_csv(path: &Path, reports: &[BenchReport]) -> Result<(), BenchError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[1, 5, 9]), 5);
        assert_eq!(median(&[1, 3, 5, 9]), 4);
    }

    #[test]
    fn rejects_out_of_range_arguments() {
        assert!(matches!(bench_run(Mode::Csm, 63, MIN_ITERS), Err(BenchError::Size(63))));
        assert!(matches!(bench_run(Mode::Csm, MAX_SIZE + 1, MIN_ITERS), Err(BenchError::Size(_))));
        assert!(matches!(bench_run(Mode::Csm, 64, 999), Err(BenchError::Iters(999))));
    }

    #[test]
    fn small_run_reports_sane_numbers() {
        for mode in Mode::ALL {
            let r = bench_run(mode, 256, MIN_ITERS).unwrap();
            assert_eq!(r.iters, MIN_ITERS);
            assert!(r.median_latency_ns > 0);
            assert!(r.throughput_bps > 0.0);
            assert!(r.cpu_ns_per_msg > 0.0);
        }
    }
}
