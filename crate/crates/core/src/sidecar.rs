//! Embedding metadata stored in mantissa bit 0 of a layer's weights.
//!
//! The plan occupies the first `plan.bit_len()` weights of the layer in
//! native `d x c_in x kh x kw` order, starting at flat index 0, so a reader
//! needs no prior knowledge to find it. Bit layout (MSB-first fields):
//!
//! ```text
//!  8  plan version
//! 16  layer index
//! 16  N (channels used)
//!  8  c (pair position)
//! 16  V (offset)
//! 16  peak
//! 16  valley
//! 16  d (output channels)
//! 32  span (weights per channel, c_in*kh*kw)
//!  *  channel order, N x ceil(log2 d)
//! 32  exclusion count
//!  *  excluded candidate slots, each ceil(log2(N*span)), ascending
//! 32  CRC-32 of everything above
//! ```
//!
//! Exclusions list only carriers the reader cannot rule out on its own;
//! zero and non-finite weights are recognised from the marked layer.

use thiserror::Error;

use crate::bits::{crc32_bits, index_width, BitReader, BitWriter};

pub const PLAN_VERSION: u8 = 1;
pub const PLAN_FIXED_BITS: usize = 8 + 16 + 16 + 8 + 16 + 16 + 16 + 16 + 32;
/// Leading bits compared against the expected version and layer index.
const SIGNATURE_BITS: usize = 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SidecarError {
    #[error("layer carries no embedding plan")]
    NotMarked,
    #[error("embedding plan CRC mismatch")]
    CrcMismatch,
    #[error("malformed embedding plan: {0}")]
    MalformedPlan(String),
    #[error("plan needs {bits} bits but the layer has {weights} weights")]
    PlanTooLarge { bits: usize, weights: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedPlan {
    pub layer_index: u16,
    pub c: u8,
    pub offset: u16,
    pub peak: u16,
    pub valley: u16,
    pub out_channels: u16,
    pub span: u32,
    /// First N entries of the channel ranking.
    pub order: Vec<u16>,
    /// Candidate slots dropped from the host, ascending.
    pub exclusions: Vec<u32>,
}

impl EmbedPlan {
    pub fn channels(&self) -> usize {
        self.order.len()
    }

    pub fn candidate_count(&self) -> usize {
        self.order.len() * self.span as usize
    }

    pub fn bit_len(&self) -> usize {
        plan_bit_len(
            self.order.len(),
            self.out_channels as usize,
            self.span as usize,
            self.exclusions.len(),
        )
    }

    fn check(&self) -> Result<(), SidecarError> {
        let bad = |m: &str| Err(SidecarError::MalformedPlan(m.to_owned()));
        let d = self.out_channels as usize;
        if self.order.len() > d {
            return bad("N exceeds d");
        }
        let mut seen = vec![false; d];
        for &ch in &self.order {
            let ch = ch as usize;
            if ch >= d || std::mem::replace(&mut seen[ch], true) {
                return bad("channel order is not a permutation prefix");
            }
        }
        if self.offset < 99 || self.peak >= self.valley {
            return bad("offset/peak/valley out of order");
        }
        let (lo, hi) = (self.offset as u32 - 99, self.offset as u32 + 99);
        if (self.peak as u32) < lo || self.valley as u32 > hi {
            return bad("peak/valley outside symbol range");
        }
        let cand = self.candidate_count() as u64;
        if self
            .exclusions
            .windows(2)
            .any(|w| w[0] >= w[1])
            || self.exclusions.last().is_some_and(|&x| x as u64 >= cand)
        {
            return bad("exclusions not ascending within candidates");
        }
        Ok(())
    }
}

pub fn plan_bit_len(n: usize, d: usize, span: usize, exclusions: usize) -> usize {
    PLAN_FIXED_BITS + n * index_width(d) + 32 + exclusions * index_width(n * span) + 32
}

pub fn encode_plan(plan: &EmbedPlan) -> Result<Vec<bool>, SidecarError> {
    plan.check()?;
    let n = u16::try_from(plan.order.len())
        .map_err(|_| SidecarError::MalformedPlan("N exceeds 16 bits".into()))?;
    let mut w = BitWriter::new();
    w.push_uint(PLAN_VERSION as u64, 8);
    w.push_uint(plan.layer_index as u64, 16);
    w.push_uint(n as u64, 16);
    w.push_uint(plan.c as u64, 8);
    w.push_uint(plan.offset as u64, 16);
    w.push_uint(plan.peak as u64, 16);
    w.push_uint(plan.valley as u64, 16);
    w.push_uint(plan.out_channels as u64, 16);
    w.push_uint(plan.span as u64, 32);
    let jw = index_width(plan.out_channels as usize);
    for &ch in &plan.order {
        w.push_uint(ch as u64, jw);
    }
    w.push_uint(plan.exclusions.len() as u64, 32);
    let xw = index_width(plan.candidate_count());
    for &x in &plan.exclusions {
        w.push_uint(x as u64, xw);
    }
    let crc = crc32_bits(w.as_bits());
    w.push_uint(crc as u64, 32);
    Ok(w.into_bits())
}

/// Decodes a plan from the front of `bits`, returning it with its length.
pub fn decode_plan(bits: &[bool]) -> Result<(EmbedPlan, usize), SidecarError> {
    let trunc = || SidecarError::MalformedPlan("truncated".into());
    let mut r = BitReader::new(bits);
    let version = r.read_uint(8).ok_or_else(trunc)? as u8;
    let layer_index = r.read_uint(16).ok_or_else(trunc)? as u16;
    let n = r.read_uint(16).ok_or_else(trunc)? as usize;
    let c = r.read_uint(8).ok_or_else(trunc)? as u8;
    let offset = r.read_uint(16).ok_or_else(trunc)? as u16;
    let peak = r.read_uint(16).ok_or_else(trunc)? as u16;
    let valley = r.read_uint(16).ok_or_else(trunc)? as u16;
    let out_channels = r.read_uint(16).ok_or_else(trunc)? as u16;
    let span = r.read_uint(32).ok_or_else(trunc)? as u32;
    let jw = index_width(out_channels as usize);
    if n.saturating_mul(jw) > r.remaining() {
        return Err(trunc());
    }
    let order = (0..n)
        .map(|_| r.read_uint(jw).map(|v| v as u16))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(trunc)?;
    let count = r.read_uint(32).ok_or_else(trunc)? as usize;
    let xw = index_width(n * span as usize);
    if count.saturating_mul(xw.max(1)) > r.remaining() {
        return Err(trunc());
    }
    let exclusions = (0..count)
        .map(|_| r.read_uint(xw).map(|v| v as u32))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(trunc)?;
    let covered = r.position();
    let crc = r.read_uint(32).ok_or_else(trunc)? as u32;
    if crc != crc32_bits(&bits[..covered]) {
        return Err(SidecarError::CrcMismatch);
    }
    if version != PLAN_VERSION {
        return Err(SidecarError::MalformedPlan(format!("version {version}")));
    }
    let plan = EmbedPlan {
        layer_index,
        c,
        offset,
        peak,
        valley,
        out_channels,
        span,
        order,
        exclusions,
    };
    plan.check()?;
    Ok((plan, r.position()))
}

/// Overwrites mantissa bit 0 of `weights[..bits.len()]`; returns the
/// modified weights and the displaced bits.
pub fn lsb_replace(weights: &[f32], bits: &[bool]) -> Result<(Vec<f32>, Vec<bool>), SidecarError> {
    if bits.len() > weights.len() {
        return Err(SidecarError::PlanTooLarge {
            bits: bits.len(),
            weights: weights.len(),
        });
    }
    let mut out = weights.to_vec();
    let mut displaced = Vec::with_capacity(bits.len());
    for (w, &b) in out.iter_mut().zip(bits) {
        let raw = w.to_bits();
        displaced.push(raw & 1 == 1);
        *w = f32::from_bits((raw & !1) | u32::from(b));
    }
    Ok((out, displaced))
}

pub fn lsb_read(weights: &[f32], count: usize) -> Vec<bool> {
    weights
        .iter()
        .take(count)
        .map(|w| w.to_bits() & 1 == 1)
        .collect()
}

/// Reads the plan of layer `layer_index` from its weights in two phases:
/// the fixed header first (to size the variable fields), then the rest.
///
/// A layer whose leading version/layer-index bits differ from the expected
/// values in more than one position is reported as [`SidecarError::NotMarked`];
/// anything closer is treated as a damaged plan and must pass the CRC.
pub fn read_plan(weights: &[f32], layer_index: u16) -> Result<EmbedPlan, SidecarError> {
    if weights.len() < PLAN_FIXED_BITS {
        return Err(SidecarError::NotMarked);
    }
    let header = lsb_read(weights, PLAN_FIXED_BITS);
    let mut expected = BitWriter::new();
    expected.push_uint(PLAN_VERSION as u64, 8);
    expected.push_uint(layer_index as u64, 16);
    let distance = header[..SIGNATURE_BITS]
        .iter()
        .zip(expected.as_bits())
        .filter(|(a, b)| a != b)
        .count();
    if distance > 1 {
        return Err(SidecarError::NotMarked);
    }
    let plan = find_plan(weights)?;
    if plan.layer_index != layer_index {
        return Err(SidecarError::MalformedPlan(format!(
            "plan belongs to layer {}",
            plan.layer_index
        )));
    }
    Ok(plan)
}

/// Reads whatever plan the LSBs of `weights` hold, without checking which
/// layer it claims to belong to.
pub fn find_plan(weights: &[f32]) -> Result<EmbedPlan, SidecarError> {
    if weights.len() < PLAN_FIXED_BITS {
        return Err(SidecarError::NotMarked);
    }
    let header = lsb_read(weights, PLAN_FIXED_BITS);
    let mut r = BitReader::new(&header);
    r.read_bits(SIGNATURE_BITS);
    let n = r.read_uint(16).unwrap_or(0) as usize;
    r.read_bits(8 + 16 + 16 + 16);
    let d = r.read_uint(16).unwrap_or(0) as usize;
    let span = r.read_uint(32).unwrap_or(0) as usize;
    let too_long = || SidecarError::MalformedPlan("plan longer than layer".into());

    let with_count = PLAN_FIXED_BITS
        .checked_add(n.checked_mul(index_width(d)).ok_or_else(too_long)?)
        .and_then(|v| v.checked_add(32))
        .filter(|&v| v <= weights.len())
        .ok_or_else(too_long)?;
    let prefix = lsb_read(weights, with_count);
    let count = BitReader::new(&prefix[with_count - 32..])
        .read_uint(32)
        .unwrap_or(0) as usize;
    let total = count
        .checked_mul(index_width(n.saturating_mul(span)))
        .and_then(|v| v.checked_add(with_count + 32))
        .filter(|&v| v <= weights.len())
        .ok_or_else(too_long)?;
    let bits = lsb_read(weights, total);
    let (plan, used) = decode_plan(&bits)?;
    debug_assert_eq!(used, total);
    Ok(plan)
}
