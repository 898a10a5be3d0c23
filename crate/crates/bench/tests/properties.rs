use csm_bench::{bench_run, write_csv, Channel, ChannelError, Mode, CSV_HEADER, HEADER_LEN};
use proptest::prelude::*;

const KEY: [u8; 32] = [7; 32];

fn deliver(mode: Mode, msgs: &[Vec<u8>]) -> Vec<(u64, Vec<u8>)> {
    let max = msgs.iter().map(Vec::len).max().unwrap_or(0);
    let (mut tx, mut rx) = Channel::pair(mode, max, 9, KEY);
    let mut out = Vec::new();
    let mut got = Vec::new();
    for (i, m) in msgs.iter().enumerate() {
        tx.send(m).unwrap();
        rx.recv(&mut out).unwrap();
        assert_eq!(rx.channel().received(), i as u64 + 1);
        got.push((tx.seq() - 1, out.clone()));
    }
    got
}

proptest! {
    #[test]
    fn every_mode_delivers_the_same_sequence(msgs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 1..12)) {
        let plain = deliver(Mode::Plaintext, &msgs);
        prop_assert_eq!(&deliver(Mode::Aead, &msgs), &plain);
        prop_assert_eq!(&deliver(Mode::Csm, &msgs), &plain);
        for (i, (seq, m)) in plain.iter().enumerate() {
            prop_assert_eq!(*seq, i as u64);
            prop_assert_eq!(m, &msgs[i]);
        }
    }

    #[test]
    fn any_single_bit_flip_is_caught_in_aead_mode(payload in prop::collection::vec(any::<u8>(), 1..256), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let (mut tx, mut rx) = Channel::pair(Mode::Aead, payload.len(), 3, KEY);
        tx.send(&payload).unwrap();
        // Header, ciphertext and tag are all covered.
        let span = HEADER_LEN + payload.len() + 16;
        let at = pick.index(span);
        let slot = unsafe { tx.channel().host_read() }.unwrap();
        unsafe { tx.channel().host_write(at, &[slot[at] ^ (1 << bit)]) }.unwrap();
        let mut out = Vec::new();
        prop_assert!(rx.recv(&mut out).is_err());
        prop_assert!(out.is_empty());
        prop_assert_eq!(rx.channel().received(), 0);
    }

    #[test]
    fn payload_bit_flip_goes_through_in_plaintext_mode(payload in prop::collection::vec(any::<u8>(), 1..256), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let (mut tx, mut rx) = Channel::pair(Mode::Plaintext, payload.len(), 3, KEY);
        tx.send(&payload).unwrap();
        let at = HEADER_LEN + pick.index(payload.len());
        let slot = unsafe { tx.channel().host_read() }.unwrap();
        unsafe { tx.channel().host_write(at, &[slot[at] ^ (1 << bit)]) }.unwrap();
        let mut out = Vec::new();
        rx.recv(&mut out).unwrap();
        prop_assert_ne!(out, payload);
    }
}

#[test]
fn truncated_tag_region_fails_with_auth_failure() {
    let (mut tx, mut rx) = Channel::pair(Mode::Aead, 32, 1, KEY);
    tx.send(&[1; 32]).unwrap();
    unsafe { tx.channel().host_write(HEADER_LEN + 32, &[0; 16]) }.unwrap();
    assert_eq!(rx.recv(&mut Vec::new()), Err(ChannelError::AuthFailure));
}

#[test]
fn csv_rows_append_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let a = bench_run(Mode::Plaintext, 64, 1000).unwrap();
    let b = bench_run(Mode::Aead, 64, 1000).unwrap();
    write_csv(&path, &[a]).unwrap();
    write_csv(&path, &[b]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert!(lines[1].starts_with("plaintext,64,1000,"));
    assert!(lines[2].starts_with("aead,64,1000,"));
    assert_eq!(lines[2].split(',').count(), CSV_HEADER.len());
}
