use fairproof::exec::Exec;
use fairproof::ledger::{decode_records, encode_ledger, head_path, verify_bytes, verify_file, BreachKind, LedgerWriter, RecordKind};
use proptest::prelude::*;

const KINDS: [RecordKind; 6] = [
    RecordKind::Config,
    RecordKind::Manifest,
    RecordKind::Template,
    RecordKind::Exchange,
    RecordKind::Parse,
    RecordKind::Report,
];

fn payloads() -> impl Strategy<Value = Vec<(RecordKind, String)>> {
    prop::collection::vec(
        (0..KINDS.len(), any::<i64>(), "[ -~]{0,12}").prop_map(|(k, n, s)| {
            (KINDS[k], serde_json::to_string(&serde_json::json!({"n": n, "s": s})).unwrap())
        }),
        1..12,
    )
}

fn encode(entries: &[(RecordKind, String)]) -> Vec<u8> {
    encode_ledger(entries.iter().map(|(k, p)| (*k, p.as_str())))
}

proptest! {
    #[test]
    fn encoded_ledgers_verify_and_decode(entries in payloads()) {
        let bytes = encode(&entries);
        let v = verify_bytes(&bytes, Exec::Parallel);
        prop_assert!(v.is_clean());
        prop_assert_eq!(v.verified, entries.len() as u64);
        prop_assert_eq!(v, verify_bytes(&bytes, Exec::Sequential));
        let records = decode_records(&bytes, Exec::Sequential).unwrap();
        for (r, (k, p)) in records.iter().zip(&entries) {
            prop_assert_eq!(r.kind, *k);
            prop_assert_eq!(r.payload.get(), p.as_str());
        }
    }

    #[test]
    fn any_single_byte_change_is_caught_no_later_than_its_record(
        entries in payloads(),
        pos in any::<prop::sample::Index>(),
        replacement in any::<u8>(),
    ) {
        let bytes = encode(&entries);
        let i = pos.index(bytes.len());
        prop_assume!(bytes[i] != replacement);
        let owner = bytes[..i].iter().filter(|&&b| b == b'\n').count().saturating_sub(1) as u64;
        let mut mutated = bytes.clone();
        mutated[i] = replacement;
        for exec in [Exec::Sequential, Exec::Parallel] {
            let breach = verify_bytes(&mutated, exec).breach;
            prop_assert!(breach.is_some());
            prop_assert!(breach.unwrap().index <= owner);
        }
    }

    #[test]
    fn the_head_file_catches_dropped_tail_records(entries in payloads(), keep in any::<prop::sample::Index>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ledger");
        let mut writer = LedgerWriter::create(&path).unwrap();
        for (k, p) in &entries {
            writer.append_canonical(*k, p.clone()).unwrap();
        }
        writer.seal().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        prop_assert_eq!(&bytes, &encode(&entries));

        // Cut at a record boundary: the bytes alone still verify.
        let keep = keep.index(entries.len());
        let cut: usize = bytes.split_inclusive(|&b| b == b'\n').take(1 + keep).map(<[u8]>::len).sum();
        std::fs::write(&path, &bytes[..cut]).unwrap();
        prop_assert!(verify_bytes(&bytes[..cut], Exec::Sequential).is_clean());
        let v = verify_file(&path, Exec::Sequential).unwrap();
        prop_assert_eq!(v.breach.map(|b| b.kind), Some(BreachKind::LengthMismatch));
        prop_assert!(head_path(&path).exists());
    }
}
