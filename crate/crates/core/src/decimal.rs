//! Exact decimal arithmetic on binary32 values.
//!
//! Every finite f32 is `m * 2^E` with `m < 2^24`, so its decimal expansion
//! terminates. Digits here are always digits of that exact expansion, never
//! of a rounded display string. All scaling is integer arithmetic: a `u128`
//! fast path with a `BigUint` fallback for extreme exponents.

use std::sync::OnceLock;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

/// `|w| = mantissa * 2^exp2`, for finite nonzero `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dyadic {
    pub negative: bool,
    pub mantissa: u32,
    pub exp2: i32,
}

impl Dyadic {
    pub fn of(w: f32) -> Option<Self> {
        if !w.is_finite() || w == 0.0 {
            return None;
        }
        let bits = w.to_bits();
        let exp_field = ((bits >> 23) & 0xFF) as i32;
        let frac = bits & 0x007F_FFFF;
        let (mantissa, exp2) = if exp_field == 0 {
            (frac, -149)
        } else {
            (frac | 0x0080_0000, exp_field - 150)
        };
        Some(Dyadic {
            negative: bits >> 31 == 1,
            mantissa,
            exp2,
        })
    }

    /// `floor(|w| * 10^t)`, exactly. Callers only ask for results well
    /// below `u128::MAX` (a handful of significant digits).
    pub fn scaled_floor(&self, t: i32) -> u128 {
        // |w| * 10^t = m * 2^(E+t) * 5^t
        let two = self.exp2 + t;
        if let Some(v) = self.scaled_floor_u128(two, t) {
            return v;
        }
        let mut num = BigUint::from(self.mantissa);
        let mut den = BigUint::from(1u32);
        if two >= 0 {
            num <<= two as usize;
        } else {
            den <<= (-two) as usize;
        }
        if t >= 0 {
            num *= pow5_big(t as u32);
        } else {
            den *= pow5_big((-t) as u32);
        }
        (num / den)
            .to_u128()
            .expect("scaled_floor result exceeds u128")
    }

    fn scaled_floor_u128(&self, two: i32, five: i32) -> Option<u128> {
        let mut num = self.mantissa as u128;
        let mut den: u128 = 1;
        if five >= 0 {
            num = num.checked_mul(pow5_u128(five as u32)?)?;
        } else {
            den = pow5_u128((-five) as u32)?;
        }
        if two >= 0 {
            let two = two as u32;
            if two >= 128 || num.leading_zeros() < two {
                return None;
            }
            num <<= two;
        } else {
            let shift = (-two) as u32;
            if shift >= 128 || den.leading_zeros() < shift {
                return None;
            }
            den <<= shift;
        }
        Some(num / den)
    }

    /// Decimal exponent `e` with `10^e <= |w| < 10^(e+1)`.
    pub fn decimal_exponent(&self) -> i32 {
        let bitlen = 32 - self.mantissa.leading_zeros() as i32;
        let log2_floor = self.exp2 + bitlen - 1;
        // floor(log2_floor * log10(2)) via a fixed-point constant, then
        // corrected with exact comparisons.
        let mut e = ((log2_floor as i64 * 315_653) >> 20) as i32;
        while self.scaled_floor(-e) == 0 {
            e -= 1;
        }
        while self.scaled_floor(-(e + 1)) >= 1 {
            e += 1;
        }
        e
    }

    /// Exact expansion as `coefficient * 10^exp10` (coefficient not normalized).
    pub fn exact(&self) -> (BigUint, i32) {
        if self.exp2 >= 0 {
            (BigUint::from(self.mantissa) << self.exp2 as usize, 0)
        } else {
            (
                BigUint::from(self.mantissa) * pow5_big((-self.exp2) as u32),
                self.exp2,
            )
        }
    }
}

fn pow5_u128(k: u32) -> Option<u128> {
    5u128.checked_pow(k)
}

fn pow5_big(k: u32) -> BigUint {
    static TABLE: OnceLock<Vec<BigUint>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut v = Vec::with_capacity(200);
        let mut p = BigUint::from(1u32);
        for _ in 0..200 {
            v.push(p.clone());
            p *= 5u32;
        }
        v
    });
    table
        .get(k as usize)
        .cloned()
        .unwrap_or_else(|| BigUint::from(5u32).pow(k))
}

fn pow10_big(k: u32) -> BigUint {
    BigUint::from(10u32).pow(k)
}

/// The exact decimal value of `sign * (|w| + delta * 10^unit_exp)` rounded
/// to the nearest binary32 (ties to even).
pub fn offset_round(w: f32, delta: i64, unit_exp: i32) -> Option<f32> {
    let d = Dyadic::of(w)?;
    let (coeff, exp10) = d.exact();
    let (coeff, exp10) = if unit_exp >= exp10 {
        let unit = pow10_big((unit_exp - exp10) as u32);
        let step = unit * BigUint::from(delta.unsigned_abs());
        let c = if delta >= 0 {
            coeff + step
        } else {
            if step > coeff {
                return None;
            }
            coeff - step
        };
        (c, exp10)
    } else {
        let scaled = coeff * pow10_big((exp10 - unit_exp) as u32);
        let step = BigUint::from(delta.unsigned_abs());
        let c = if delta >= 0 {
            scaled + step
        } else {
            if step > scaled {
                return None;
            }
            scaled - step
        };
        (c, unit_exp)
    };
    if coeff.is_zero() {
        return Some(if d.negative { -0.0 } else { 0.0 });
    }
    // The std parser rounds arbitrarily long decimal strings correctly.
    let text = format!("{coeff}e{exp10}");
    let magnitude: f32 = text.parse().ok()?;
    Some(if d.negative { -magnitude } else { magnitude })
}
