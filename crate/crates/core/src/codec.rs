//! Host-sequence construction from convolution weights.
//!
//! Each carrier weight contributes the integer formed by two of its
//! significant decimal digits, `n_c n_(c+1)`, signed like the weight and
//! offset by `V`. Digits come from the exact decimal expansion of the binary32
//! value (see [`crate::decimal`]). Writing a modified pair back rounds to the
//! nearest binary32, which is not always invertible; such carriers are
//! reported as [`CodecError::Fragile`] and must be excluded by the caller.

use std::ops::RangeInclusive;

use thiserror::Error;

use crate::container::ConvDims;
use crate::decimal::{offset_round, Dyadic};
use crate::entropy::entropy_bits;

/// Pair positions searched by [`select_pair_position`]. binary32 carries
/// about seven significant decimal digits; `(n_5, n_6)` is the last pair.
pub const PAIR_POSITIONS: RangeInclusive<u8> = 2..=5;
pub const DEFAULT_OFFSET: i32 = 128;
pub const MIN_OFFSET: i32 = 100;
/// Largest offset whose symbols still fit the 16-bit plan fields.
pub const MAX_OFFSET: i32 = u16::MAX as i32 - 99;
const MAX_PAIR_POSITION: u8 = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("weight is zero or not finite")]
    ZeroOrNonFinite,
    #[error("digit pair {0} outside [0, 99]")]
    PairOutOfRange(i32),
    #[error("pair position c = {0} outside the supported range")]
    InvalidPairPosition(u8),
    #[error("offset V = {0} outside [{MIN_OFFSET}, {MAX_OFFSET}]")]
    InvalidOffset(i32),
    #[error("digit substitution is not exactly invertible under binary32 rounding")]
    Fragile,
    #[error("no usable carrier weights")]
    NoUsableWeights,
    #[error("channel order is not a permutation prefix of 0..{0}")]
    BadPermutation(usize),
    #[error("N = {n} outside [1, {d}]")]
    NOutOfRange { n: usize, d: usize },
    #[error("layer holds {actual} weights, shape implies {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
}

/// Sign, decimal exponent and significant digits of a binary32 value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigitView {
    pub negative: bool,
    /// `10^exponent <= |w| < 10^(exponent + 1)`.
    pub exponent: i32,
    /// `n_1, n_2, ...` of the exact expansion; `n_1 != 0`, no trailing zeros.
    pub digits: Vec<u8>,
}

impl DigitView {
    /// The `gamma`-th significant digit (1-based), zero past the expansion.
    pub fn digit(&self, gamma: usize) -> u8 {
        gamma
            .checked_sub(1)
            .and_then(|i| self.digits.get(i))
            .copied()
            .unwrap_or(0)
    }
}

pub fn digit_view(w: f32) -> Result<DigitView, CodecError> {
    let d = Dyadic::of(w).ok_or(CodecError::ZeroOrNonFinite)?;
    let (coeff, exp10) = d.exact();
    let text = coeff.to_string();
    let trimmed = text.trim_end_matches('0');
    let stripped = (text.len() - trimmed.len()) as i32;
    let digits: Vec<u8> = trimmed.bytes().map(|b| b - b'0').collect();
    let exponent = digits.len() as i32 - 1 + exp10 + stripped;
    Ok(DigitView {
        negative: d.negative,
        exponent,
        digits,
    })
}

/// Whether `w` can carry a symbol at all: finite and nonzero even with its
/// least significant mantissa bit cleared. The predicate ignores bit 0, so
/// it reads the same before and after the metadata sidecar is written.
pub fn is_candidate(w: f32) -> bool {
    w.is_finite() && (w.to_bits() & 0x7FFF_FFFE) != 0
}

fn check_position(c: u8) -> Result<(), CodecError> {
    if (2..=MAX_PAIR_POSITION).contains(&c) {
        Ok(())
    } else {
        Err(CodecError::InvalidPairPosition(c))
    }
}

pub fn check_offset(v: i32) -> Result<(), CodecError> {
    if (MIN_OFFSET..=MAX_OFFSET).contains(&v) {
        Ok(())
    } else {
        Err(CodecError::InvalidOffset(v))
    }
}

/// `10 * n_c + n_(c+1)`, i.e. `floor(|w| * 10^(c - e)) mod 100`.
pub fn pair_value(w: f32, c: u8) -> Result<u8, CodecError> {
    check_position(c)?;
    let d = Dyadic::of(w).ok_or(CodecError::ZeroOrNonFinite)?;
    let e = d.decimal_exponent();
    Ok((d.scaled_floor(c as i32 - e) % 100) as u8)
}

/// `sign(w) * pair_value(w, c) + V`.
pub fn host_symbol(w: f32, c: u8, offset: i32) -> Result<i32, CodecError> {
    let pair = pair_value(w, c)? as i32;
    Ok(if w.is_sign_negative() { offset - pair } else { offset + pair })
}

/// Leading significant digits of a weight, enough to read every pair in
/// [`PAIR_POSITIONS`] from one exact scaling.
#[derive(Clone, Copy, Debug)]
struct LeadingDigits {
    negative: bool,
    /// `n_1 n_2 ... n_6` as an integer.
    six: u32,
}

impl LeadingDigits {
    fn of(w: f32) -> Option<Self> {
        let d = Dyadic::of(w)?;
        let e = d.decimal_exponent();
        Some(LeadingDigits {
            negative: d.negative,
            six: d.scaled_floor(5 - e) as u32,
        })
    }

    fn symbol(&self, c: u8, offset: i32) -> i32 {
        let pair = ((self.six / 10u32.pow(5 - c as u32)) % 100) as i32;
        if self.negative {
            offset - pair
        } else {
            offset + pair
        }
    }
}

/// Entropy of the host symbols one pair position would produce.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEntropy {
    pub c: u8,
    pub entropy_bits: f64,
    pub usable: usize,
}

/// Picks the pair position whose host symbols have minimum empirical
/// entropy; ties go to the smaller position. Non-candidate weights are
/// skipped for every position.
pub fn select_pair_position(
    weights: &[f32],
    positions: RangeInclusive<u8>,
    offset: i32,
) -> Result<(u8, Vec<PairEntropy>), CodecError> {
    check_offset(offset)?;
    let (lo, hi) = (*positions.start(), *positions.end());
    if lo < 2 || hi > 5 || lo > hi {
        return Err(CodecError::InvalidPairPosition(if lo < 2 { lo } else { hi }));
    }
    let leading: Vec<LeadingDigits> = weights
        .iter()
        .filter(|w| is_candidate(**w))
        .filter_map(|&w| LeadingDigits::of(w))
        .collect();
    if leading.is_empty() {
        return Err(CodecError::NoUsableWeights);
    }
    let mut table = Vec::new();
    for c in lo..=hi {
        let mut hist = vec![0u64; 199];
        for l in &leading {
            hist[(l.symbol(c, offset) - offset + 99) as usize] += 1;
        }
        table.push(PairEntropy {
            c,
            entropy_bits: entropy_bits(&hist),
            usable: leading.len(),
        });
    }
    let best = table
        .iter()
        .fold(None::<&PairEntropy>, |best, row| match best {
            Some(b) if b.entropy_bits <= row.entropy_bits => Some(b),
            _ => Some(row),
        })
        .map(|row| row.c)
        .expect("non-empty table");
    Ok((best, table))
}

/// Integer host symbols with back-pointers into the layer's flat weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HostSequence {
    pub symbols: Vec<i32>,
    /// Flat index into the layer tensor for each symbol.
    pub coords: Vec<usize>,
    /// Position in the candidate list for each symbol.
    pub slots: Vec<usize>,
    pub c: u8,
    pub offset: i32,
}

impl HostSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// One bit per candidate position; `true` = not a carrier.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ExclusionMap {
    pub bits: Vec<bool>,
}

impl ExclusionMap {
    pub fn excluded_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Validates that `order` is a prefix of a permutation of `0..d` holding at
/// least `n` entries.
pub fn check_order(order: &[usize], n: usize, d: usize) -> Result<(), CodecError> {
    if n == 0 || n > d {
        return Err(CodecError::NOutOfRange { n, d });
    }
    if order.len() < n || order.len() > d {
        return Err(CodecError::BadPermutation(d));
    }
    let mut seen = vec![false; d];
    for &ch in order {
        if ch >= d || std::mem::replace(&mut seen[ch], true) {
            return Err(CodecError::BadPermutation(d));
        }
    }
    Ok(())
}

/// Flat weight indices in host order: channels `order[..n]`, then input
/// channels, then the kernel row-major.
pub fn candidate_positions(dims: ConvDims, order: &[usize], n: usize) -> Vec<usize> {
    let per = dims.per_channel();
    order[..n]
        .iter()
        .flat_map(|&ch| (ch * per)..(ch * per + per))
        .collect()
}

/// Builds the host sequence over channels `order[..n]`. Non-candidate
/// weights are marked excluded and emit no symbol; `extra` marks further
/// exclusions by candidate slot.
pub fn build_host(
    weights: &[f32],
    dims: ConvDims,
    order: &[usize],
    n: usize,
    c: u8,
    offset: i32,
    extra: Option<&[bool]>,
) -> Result<(HostSequence, ExclusionMap), CodecError> {
    check_position(c)?;
    check_offset(offset)?;
    if weights.len() != dims.total() {
        return Err(CodecError::ShapeMismatch {
            expected: dims.total(),
            actual: weights.len(),
        });
    }
    check_order(order, n, dims.out_channels)?;
    let positions = candidate_positions(dims, order, n);
    let mut host = HostSequence {
        symbols: Vec::with_capacity(positions.len()),
        coords: Vec::with_capacity(positions.len()),
        slots: Vec::with_capacity(positions.len()),
        c,
        offset,
    };
    let mut excluded = vec![false; positions.len()];
    for (slot, &pos) in positions.iter().enumerate() {
        let w = weights[pos];
        let forced = extra.and_then(|e| e.get(slot)).copied().unwrap_or(false);
        if forced || !is_candidate(w) {
            excluded[slot] = true;
            continue;
        }
        host.symbols.push(host_symbol(w, c, offset)?);
        host.coords.push(pos);
        host.slots.push(slot);
    }
    Ok((host, ExclusionMap { bits: excluded }))
}

/// Rounds `sign(w) * (|w| + (new_pair - pair) * 10^(e - c))` to binary32
/// and checks that sign, exponent and the target pair survived. No
/// invertibility check.
pub fn rewrite_pair(w: f32, c: u8, new_pair: u8) -> Result<f32, CodecError> {
    check_position(c)?;
    if new_pair > 99 {
        return Err(CodecError::PairOutOfRange(new_pair as i32));
    }
    let d = Dyadic::of(w).ok_or(CodecError::ZeroOrNonFinite)?;
    let e = d.decimal_exponent();
    let old = (d.scaled_floor(c as i32 - e) % 100) as i64;
    let delta = new_pair as i64 - old;
    if delta == 0 {
        return Ok(w);
    }
    let out = offset_round(w, delta, e - c as i32).ok_or(CodecError::Fragile)?;
    let od = Dyadic::of(out).ok_or(CodecError::Fragile)?;
    if od.negative != d.negative || od.decimal_exponent() != e {
        return Err(CodecError::Fragile);
    }
    if (od.scaled_floor(c as i32 - e) % 100) as u8 != new_pair {
        return Err(CodecError::Fragile);
    }
    Ok(out)
}

/// Substitutes digit pair `c` of `w` with `new_pair`. Succeeds only if the
/// rewritten value keeps its sign and decimal exponent, reads back
/// `new_pair`, and rewriting the old pair reproduces `w` bit-exactly.
pub fn write_pair(w: f32, c: u8, new_pair: i32) -> Result<f32, CodecError> {
    if !(0..=99).contains(&new_pair) {
        return Err(CodecError::PairOutOfRange(new_pair));
    }
    let old = pair_value(w, c)?;
    let out = rewrite_pair(w, c, new_pair as u8)?;
    match rewrite_pair(out, c, old) {
        Ok(back) if back.to_bits() == w.to_bits() => Ok(out),
        _ => Err(CodecError::Fragile),
    }
}

/// What raising a carrier's host symbol by one does to the weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SymbolStep {
    /// The verified weight carrying `symbol + 1`.
    Movable(f32),
    /// `symbol + 1` is not representable: a negative weight with pair 0
    /// (would need a positive pair) or a positive weight with pair 99.
    Blocked,
    /// Representable, but the substitution fails verification.
    Fragile,
}

pub fn step_up(w: f32, c: u8) -> Result<SymbolStep, CodecError> {
    let pair = pair_value(w, c)? as i32;
    let target = if w.is_sign_negative() { pair - 1 } else { pair + 1 };
    if !(0..=99).contains(&target) {
        return Ok(SymbolStep::Blocked);
    }
    match write_pair(w, c, target) {
        Ok(out) if is_candidate(out) => Ok(SymbolStep::Movable(out)),
        Ok(_) | Err(CodecError::Fragile) => Ok(SymbolStep::Fragile),
        Err(e) => Err(e),
    }
}

pub fn flip_lsb(w: f32) -> f32 {
    f32::from_bits(w.to_bits() ^ 1)
}

pub fn with_lsb(w: f32, bit: bool) -> f32 {
    f32::from_bits((w.to_bits() & !1) | u32::from(bit))
}

/// Checks that overwriting mantissa bit 0 of a carrier commutes with its
/// digit-pair coding. `original` is the unmarked weight; `moved` is its
/// step-up value when the carrier may be shifted. Both LSB values must
/// leave the pair readable, and restoring the pair from a flipped marked
/// value then restoring the LSB must give back `original` bit-exactly.
pub fn lsb_commutes(original: f32, moved: Option<f32>, c: u8) -> bool {
    let Ok(pair) = pair_value(original, c) else {
        return false;
    };
    let flipped = flip_lsb(original);
    if flipped.is_sign_negative() != original.is_sign_negative()
        || pair_value(flipped, c) != Ok(pair)
    {
        return false;
    }
    let Some(moved) = moved else {
        return true;
    };
    let Ok(moved_pair) = pair_value(moved, c) else {
        return false;
    };
    let lsb = original.to_bits() & 1 == 1;
    [moved, flip_lsb(moved)].into_iter().all(|m| {
        pair_value(m, c) == Ok(moved_pair)
            && m.is_sign_negative() == original.is_sign_negative()
            && matches!(rewrite_pair(m, c, pair), Ok(r) if with_lsb(r, lsb).to_bits() == original.to_bits())
    })
}
