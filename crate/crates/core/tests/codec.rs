use nnrw::codec::{host_symbol, is_candidate, pair_value, step_up, write_pair, SymbolStep};
use nnrw::decimal::Dyadic;
use num_bigint::BigInt;
use proptest::prelude::*;

/// Significant digits and decimal exponent from an exact rendering. Every
/// f32 has at most 112 significant digits, so 150 are exact.
fn oracle_digits(w: f32) -> (Vec<u8>, i32) {
    let s = format!("{:.150e}", (w as f64).abs());
    let (mant, exp) = s.split_once('e').unwrap();
    let digits = mant.bytes().filter(u8::is_ascii_digit).map(|b| b - b'0').collect();
    (digits, exp.parse().unwrap())
}

fn oracle_pair(w: f32, c: u8) -> u8 {
    let (d, _) = oracle_digits(w);
    d[c as usize - 1] * 10 + d[c as usize]
}

/// `x * 2^149 * 10^k` as an exact integer.
fn scaled(w: f32, k: u32) -> BigInt {
    let d = Dyadic::of(w).unwrap();
    let v = BigInt::from(d.mantissa) << (d.exp2 + 149) as usize;
    let v = v * BigInt::from(10).pow(k);
    if d.negative { -v } else { v }
}

/// Checks that `out` is the binary32 nearest to `w + sign(w) * delta *
/// 10^(e-c)`, ties to even, with exact integer arithmetic.
fn is_nearest(w: f32, out: f32, delta: i64, unit_exp: i32) -> bool {
    let k = (-unit_exp).max(0) as u32;
    let unit = BigInt::from(1) << 149usize;
    let unit = unit * BigInt::from(10).pow((unit_exp.max(0)) as u32);
    let step = unit * BigInt::from(delta);
    let target = if w < 0.0 { scaled(w, k) - step } else { scaled(w, k) + step };
    let err = |v: f32| (scaled(v, k) - &target).magnitude().clone();
    let mine = err(out);
    [out.next_up(), out.next_down()]
        .into_iter()
        .filter(|v| v.is_finite() && *v != 0.0)
        .all(|nb| {
            let theirs = err(nb);
            mine < theirs || (mine == theirs && out.to_bits() & 1 == 0)
        })
}

fn arb_weight() -> impl Strategy<Value = f32> {
    any::<u32>()
        .prop_map(f32::from_bits)
        .prop_filter("finite nonzero", |w| w.is_finite() && *w != 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn pair_and_exponent_match_exact_rendering(w in arb_weight(), c in 2u8..=5) {
        let (_, e) = oracle_digits(w);
        prop_assert_eq!(Dyadic::of(w).unwrap().decimal_exponent(), e);
        prop_assert_eq!(pair_value(w, c).unwrap(), oracle_pair(w, c));
        let s = host_symbol(w, c, 128).unwrap();
        let p = oracle_pair(w, c) as i32;
        prop_assert_eq!(s, if w < 0.0 { 128 - p } else { 128 + p });
    }

    #[test]
    fn write_pair_is_nearest_and_invertible(w in arb_weight(), c in 2u8..=5, target in 0i32..100) {
        let old = pair_value(w, c).unwrap();
        if let Ok(out) = write_pair(w, c, target) {
            let (_, e) = oracle_digits(w);
            prop_assert_eq!(oracle_pair(out, c) as i32, target);
            prop_assert_eq!(oracle_digits(out).1, e);
            prop_assert_eq!(out.is_sign_negative(), w.is_sign_negative());
            prop_assert!(is_nearest(w, out, (target - old as i32) as i64, e - c as i32));
            prop_assert_eq!(write_pair(out, c, old as i32).unwrap().to_bits(), w.to_bits());
            let bound = 2.0 * 10f64.powi(e - c as i32) * (target - old as i32).abs().max(1) as f64;
            prop_assert!((out as f64 - w as f64).abs() <= bound);
        }
    }

    #[test]
    fn step_up_raises_the_symbol_by_one(w in arb_weight(), c in 2u8..=5) {
        prop_assume!(is_candidate(w));
        let s = host_symbol(w, c, 128).unwrap();
        match step_up(w, c).unwrap() {
            SymbolStep::Movable(out) => {
                prop_assert_eq!(host_symbol(out, c, 128).unwrap(), s + 1);
                let (_, e) = oracle_digits(w);
                prop_assert!((out as f64 - w as f64).abs() <= 2.0 * 10f64.powi(e - c as i32));
            }
            SymbolStep::Blocked => {
                let p = pair_value(w, c).unwrap();
                prop_assert!((w < 0.0 && p == 0) || (w > 0.0 && p == 99));
            }
            SymbolStep::Fragile => {}
        }
    }
}

#[test]
fn nearest_oracle_on_known_rewrite() {
    let out = write_pair(0.2513, 2, 52).unwrap();
    assert!(is_nearest(0.2513, out, 1, -3));
    assert!(!is_nearest(0.2513, out.next_up(), 1, -3));
}
