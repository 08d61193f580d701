use nnrw::hs::{build_histogram, choose_peak_valley, hs_embed, hs_extract, HsError};
use proptest::prelude::*;

const V: i32 = 128;

/// Hosts concentrated on a few symbols so a valley usually exists.
fn arb_host() -> impl Strategy<Value = Vec<i32>> {
    (V - 99..=V + 90, 1i32..10).prop_flat_map(|(base, width)| {
        prop::collection::vec(base..(base + width).min(V + 99), 1..300)
    })
}

proptest! {
    #[test]
    fn round_trip_is_exact(host in arb_host(), seed in any::<u64>()) {
        let params = choose_peak_valley(&build_histogram(&host, V).unwrap()).unwrap();
        let bits: Vec<bool> = (0..params.capacity).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let marked = hs_embed(&host, &bits, &params).unwrap();
        let (got, restored) = hs_extract(&marked, &params);
        prop_assert_eq!(got, bits);
        prop_assert_eq!(restored, host.clone());
        // Marked symbols move by at most one and never leave the range.
        for (a, b) in host.iter().zip(&marked) {
            prop_assert!(*b == *a || *b == *a + 1);
            prop_assert!(*b <= V + 99);
        }
    }

    #[test]
    fn capacity_is_the_peak_count(host in arb_host()) {
        let hist = build_histogram(&host, V).unwrap();
        let params = choose_peak_valley(&hist).unwrap();
        prop_assert_eq!(params.capacity as u64, hist.count(params.peak));
        prop_assert_eq!(hist.count(params.valley), 0);
        prop_assert!(params.peak < params.valley);
        // No occupied bin with room to its right beats the chosen peak.
        for (s, n) in hist.occupied() {
            let has_valley = (s + 1..=V + 99).any(|t| hist.count(t) == 0);
            prop_assert!(!has_valley || n < params.capacity as u64 || (n == params.capacity as u64 && s >= params.peak));
        }
        let over = vec![true; params.capacity + 1];
        prop_assert_eq!(
            hs_embed(&host, &over, &params),
            Err(HsError::CapacityExceeded { needed: params.capacity + 1, capacity: params.capacity })
        );
    }

    #[test]
    fn short_payloads_pad_with_zeros(host in arb_host(), keep in 0usize..50) {
        let params = choose_peak_valley(&build_histogram(&host, V).unwrap()).unwrap();
        let bits = vec![true; keep.min(params.capacity)];
        let (got, _) = hs_extract(&hs_embed(&host, &bits, &params).unwrap(), &params);
        prop_assert_eq!(&got[..bits.len()], &bits[..]);
        prop_assert!(got[bits.len()..].iter().all(|b| !b));
    }
}
