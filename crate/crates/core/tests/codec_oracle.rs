mod common;

use proptest::prelude::*;

use canids::canlog::Payload;
use canids::dbc::{parse_dbc, ByteOrder, MessageSpec, SignalSpec};
use canids::deserialize::{deserialize_with, extract_bits, insert_padded, occupancy, raw_to_int, RawSignal};
use canids::synth;

use common::{brute_force_int, brute_force_raw, fits};

fn spec_strategy() -> impl Strategy<Value = SignalSpec> {
    (0u16..64, 1u8..=64, prop::bool::ANY, prop::bool::ANY).prop_filter_map(
        "signal must fit in 8 bytes",
        |(start, len, big, signed)| {
            let order = if big {
                ByteOrder::BigEndian
            } else {
                ByteOrder::LittleEndian
            };
            fits(start, len, order, 8).then(|| {
                let s = SignalSpec::new("S", start, len, order);
                if signed {
                    s.signed()
                } else {
                    s
                }
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn extraction_matches_bit_walk(spec in spec_strategy(), bytes in any::<[u8; 8]>()) {
        let p = Payload::new(bytes, 8);
        let raw = extract_bits(&p, &spec).unwrap();
        let oracle = brute_force_raw(&p, &spec).unwrap();
        prop_assert_eq!(raw.0, oracle);
        prop_assert_eq!(raw_to_int(raw, &spec), brute_force_int(oracle, &spec));
    }

    #[test]
    fn insert_touches_only_own_bits(spec in spec_strategy(), bytes in any::<[u8; 8]>(), value in any::<u64>()) {
        let mut out = bytes;
        let mask = if spec.bit_length == 64 { u64::MAX } else { (1u64 << spec.bit_length) - 1 };
        insert_padded(&mut out, &spec, RawSignal(value & mask));
        let occ = occupancy(&spec);
        for i in 0..8 {
            prop_assert_eq!(out[i] & !occ[i], bytes[i] & !occ[i]);
        }
        prop_assert_eq!(brute_force_raw(&Payload::new(out, 8), &spec).unwrap(), value & mask);
    }

    #[test]
    fn short_payloads_reject_overhanging_signals(spec in spec_strategy(), dlc in 0usize..8) {
        let p = Payload::zeroed(dlc);
        prop_assert_eq!(extract_bits(&p, &spec).is_ok(), fits(spec.start_bit, spec.bit_length, spec.byte_order, dlc));
    }
}

#[test]
fn synthetic_database_survives_dbc_round_trip() {
    let db = synth::synthetic_database();
    let back = parse_dbc(&db.to_dbc_string()).unwrap();
    assert_eq!(back.messages.len(), db.messages.len());
    for (aid, m) in &db.messages {
        let b: &MessageSpec = back.message(*aid).unwrap();
        assert_eq!(b.signals, m.signals);
    }
}

#[test]
fn synthetic_log_decodes_in_range() {
    let out = synth::generate(&synth::SynthProfile::driving(5.0, 3)).unwrap();
    for msg in &out.log {
        let spec = out.db.message(msg.aid).unwrap();
        let v = deserialize_with(spec, &msg.payload).unwrap();
        assert_eq!(v.values().len(), spec.signals.len());
    }
}
