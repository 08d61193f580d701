use nnrw::payload::{frame_payload, parse_payload, HEADER_BITS};
use nnrw::sidecar::{decode_plan, encode_plan, find_plan, lsb_read, lsb_replace, read_plan, EmbedPlan};
use proptest::prelude::*;

fn arb_plan() -> impl Strategy<Value = EmbedPlan> {
    (1u16..40, 1u32..200, 2u8..=5, 99u16..=400, any::<u16>()).prop_flat_map(|(d, span, c, offset, layer)| {
        let order = Just((0..d).collect::<Vec<u16>>()).prop_shuffle();
        (
            order,
            1usize..=d as usize,
            prop::collection::btree_set(0u32..span, 0..8),
            0u16..197,
        )
            .prop_map(move |(order, n, excl, p)| EmbedPlan {
                layer_index: layer,
                c,
                offset,
                peak: offset - 99 + p,
                valley: offset - 99 + p + 1,
                out_channels: d,
                span,
                order: order[..n].to_vec(),
                exclusions: excl.into_iter().collect(),
            })
    })
}

proptest! {
    #[test]
    fn plan_round_trip(plan in arb_plan()) {
        let bits = encode_plan(&plan).unwrap();
        prop_assert_eq!(bits.len(), plan.bit_len());
        let (back, used) = decode_plan(&bits).unwrap();
        prop_assert_eq!(back, plan);
        prop_assert_eq!(used, bits.len());
    }

    #[test]
    fn single_flips_in_a_plan_are_caught(plan in arb_plan(), at in any::<prop::sample::Index>()) {
        let mut bits = encode_plan(&plan).unwrap();
        let i = at.index(bits.len());
        bits[i] = !bits[i];
        prop_assert!(decode_plan(&bits).map(|(p, _)| p) != Ok(plan));
    }

    #[test]
    fn plan_survives_in_weight_lsbs(plan in arb_plan(), extra in 0usize..50, seed in any::<u32>()) {
        let bits = encode_plan(&plan).unwrap();
        let weights: Vec<f32> = (0..bits.len() + extra)
            .map(|i| (seed.wrapping_mul(i as u32 + 1) % 2000) as f32 / 1000.0 - 1.0)
            .collect();
        let (marked, displaced) = lsb_replace(&weights, &bits).unwrap();
        prop_assert_eq!(displaced, lsb_read(&weights, bits.len()));
        prop_assert_eq!(lsb_read(&marked, bits.len()), bits.clone());
        for (a, b) in weights.iter().zip(&marked) {
            prop_assert!(a.to_bits() ^ b.to_bits() <= 1);
        }
        prop_assert_eq!(read_plan(&marked, plan.layer_index).unwrap(), plan.clone());
        prop_assert_eq!(find_plan(&marked).unwrap(), plan);
    }

    #[test]
    fn payload_round_trip(
        msg in prop::collection::vec(any::<bool>(), 0..300),
        backup in prop::collection::vec(any::<bool>(), 0..300),
        pad in 0usize..64,
    ) {
        let mut bits = frame_payload(&msg, &backup).unwrap();
        prop_assert_eq!(bits.len(), HEADER_BITS + msg.len() + backup.len());
        let framed = bits.len();
        bits.extend(std::iter::repeat_n(false, pad));
        let (p, used) = parse_payload(&bits).unwrap();
        prop_assert_eq!(used, framed);
        prop_assert_eq!(p.message, msg);
        prop_assert_eq!(p.lsb_backup, backup);
    }

    #[test]
    fn payload_flips_are_caught(
        msg in prop::collection::vec(any::<bool>(), 0..100),
        at in any::<prop::sample::Index>(),
    ) {
        let mut bits = frame_payload(&msg, &[]).unwrap();
        let i = at.index(bits.len());
        bits[i] = !bits[i];
        prop_assert!(parse_payload(&bits).is_err());
    }
}
